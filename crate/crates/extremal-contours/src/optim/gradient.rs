//! Gradient estimation over the `2K+3` parameters per contour.
//!
//! Two routes: an exact chain through the backend's input VJP, the compose
//! adjoints and the mask adjoint, or central finite differences over the
//! full loss. The adaptive area weight is frozen before either route runs;
//! it never contributes a derivative.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendInfo, Embedding, ModelBackend};
use crate::error::{Error, Result};
use crate::geometry::{geometry_gradients, ContourParams};
use crate::raster::mask_vjp;
use crate::raster::RasterConfig;

use super::{Evaluated, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientStrategy {
    /// Analytic chain when the backend supports the input VJP, finite
    /// differences otherwise.
    Auto,
    AnalyticChain,
    CentralFd,
}

impl Default for GradientStrategy {
    fn default() -> Self {
        GradientStrategy::Auto
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Resolved {
    Analytic,
    Fd,
}

pub(crate) fn resolve_strategy(
    requested: GradientStrategy,
    info: &BackendInfo,
) -> Result<Resolved> {
    match requested {
        GradientStrategy::CentralFd => Ok(Resolved::Fd),
        GradientStrategy::AnalyticChain => {
            if info.capability.supports_input_vjp {
                Ok(Resolved::Analytic)
            } else {
                Err(Error::Unsupported("input_vjp"))
            }
        }
        GradientStrategy::Auto => Ok(if info.capability.supports_input_vjp {
            Resolved::Analytic
        } else {
            Resolved::Fd
        }),
    }
}

/// Central finite differences of `f` at `point`, one coordinate at a time.
pub fn central_fd(
    point: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Gradient of `cos(a, b)` with respect to `a`.
fn cosine_grad(a: &Embedding, b: &Embedding) -> Result<Vec<f64>> {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegenerateEmbedding);
    }
    let cos = a.dot(b) / (na * nb);
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(ai, bi)| (bi / nb - cos * ai / na) / na)
        .collect())
}

/// FD step size for all contour parameters.
const FD_STEP: f64 = 1e-3;

/// Estimate the total-loss gradient for every contour, in canonical flat
/// order per contour. `lambda_a` is the frozen area weight for this
/// iteration; `base` is the already-evaluated state at `contours` (reused
/// by the analytic route).
pub(crate) fn estimate_gradient(
    objective: &Objective<'_>,
    backend: &mut dyn ModelBackend,
    contours: &[ContourParams],
    tau: f64,
    lambda_a: f64,
    strategy: Resolved,
    base: Option<&Evaluated>,
) -> Result<Vec<Vec<f64>>> {
    match strategy {
        Resolved::Analytic => {
            let owned;
            let eval = match base {
                Some(e) => e,
                None => {
                    owned = objective.evaluate(backend, contours, tau, Some(lambda_a))?;
                    &owned
                }
            };
            analytic_gradient(objective, backend, contours, tau, lambda_a, eval)
        }
        Resolved::Fd => fd_gradient(objective, backend, contours, tau, lambda_a),
    }
}

fn analytic_gradient(
    objective: &Objective<'_>,
    backend: &mut dyn ModelBackend,
    contours: &[ContourParams],
    tau: f64,
    lambda_a: f64,
    eval: &Evaluated,
) -> Result<Vec<Vec<f64>>> {
    let x = objective.x;
    let weights = objective.weights;

    // dL/de_p = −dcos(e_p,e_o)/de_p, dL/de_d = +dcos(e_d,e_o)/de_d
    let mut cot_p = cosine_grad(&eval.e_p, objective.e_o)?;
    for v in cot_p.iter_mut() {
        *v = -*v;
    }
    let cot_d = cosine_grad(&eval.e_d, objective.e_o)?;

    let g_p = backend.input_vjp(&eval.x_p, &Embedding::new(cot_p))?;
    let g_d = backend.input_vjp(&eval.x_d, &Embedding::new(cot_d))?;

    // ∂x_p/∂m = x − x̃ and ∂x_d/∂m = −(x − x̃), summed over channels
    let c = x.channels();
    let n_pix = x.height() * x.width();
    let mut mask_cot = vec![0.0; n_pix];
    for (pix, slot) in mask_cot.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..c {
            let idx = pix * c + ch;
            let diff = x.values()[idx] - objective.x_blur.values()[idx];
            acc += (g_p[idx] - g_d[idx]) * diff;
        }
        *slot = acc;
    }

    let mut grads = mask_vjp(
        contours,
        x.height(),
        x.width(),
        &RasterConfig::new(tau),
        &mask_cot,
    )?;

    // area term derivative: adaptive mode is λ_a·Σα, fixed mode is
    // λ_fixed·|Σα − α*| with the subgradient at 0 taken as 0
    let area_scale = match weights.target_area {
        None => lambda_a,
        Some(target) => {
            let dev = eval.report.area_fraction - target;
            if dev > 0.0 {
                weights.lambda_a_fixed
            } else if dev < 0.0 {
                -weights.lambda_a_fixed
            } else {
                0.0
            }
        }
    };

    for (contour, grad) in contours.iter().zip(grads.iter_mut()) {
        let geo = geometry_gradients(contour, objective.grid)?;
        for (i, g) in grad.iter_mut().enumerate() {
            *g += area_scale * geo.area[i] + weights.lambda_r * geo.spectral[i];
        }
    }
    Ok(grads)
}

fn fd_gradient(
    objective: &Objective<'_>,
    backend: &mut dyn ModelBackend,
    contours: &[ContourParams],
    tau: f64,
    lambda_a: f64,
) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = contours.iter().flat_map(|c| c.to_flat()).collect();
    let mut probe: Vec<ContourParams> = contours.to_vec();
    let grad = central_fd(&flat, FD_STEP, |point| {
        let mut offset = 0;
        for c in probe.iter_mut() {
            let dof = c.dof();
            c.set_from_flat(&point[offset..offset + dof]);
            offset += dof;
        }
        let eval = objective.evaluate(backend, &probe, tau, Some(lambda_a))?;
        Ok(eval.report.total)
    })?;

    let mut out = Vec::with_capacity(contours.len());
    let mut offset = 0;
    for c in contours {
        let dof = c.dof();
        out.push(grad[offset..offset + dof].to_vec());
        offset += dof;
    }
    Ok(out)
}
