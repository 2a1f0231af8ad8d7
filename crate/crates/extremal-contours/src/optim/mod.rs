//! Loss assembly, schedules and the optimization loop.
//!
//! One run: precompute the blurred reference and the original embedding,
//! then iterate rasterize → compose → embed → loss → gradient → update
//! until the total loss stops improving for `patience` iterations. The
//! best-loss parameters ever seen are returned, never the last iterate.

pub mod adamw;
pub mod gradient;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradient::{central_fd, GradientStrategy};

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{cosine_similarity, Embedding, ModelBackend};
use crate::error::{Error, Result};
use crate::geometry::{
    self, area_fraction, spectral_penalty, AngleGrid, ContourParams, DEFAULT_HARMONICS,
    DEFAULT_QUADRATURE,
};
use crate::image::ImageTensor;
use crate::perturb::{compose_delete, compose_preserve, gaussian_blur, BlurConfig};
use crate::raster::{rasterize_multi, MaskField, RasterConfig};

/// Early stopping counts an iteration as improving only when it beats the
/// best total seen by more than this, so float jitter cannot stall the
/// patience counter.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// r0 is projected into the open interval (r_min, r_max) by this margin
/// after every update step, keeping the bound scale positive.
const R0_MARGIN: f64 = 1e-4;

/// Loss term weights. `target_area = None` selects the adaptive area
/// weight; `Some(α*)` switches to the fixed-area objective
/// `λ_fixed·|Σα − α*|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Spectral (boundary smoothness) weight λ_r.
    pub lambda_r: f64,
    /// Upper clip for the adaptive area weight.
    pub lambda_a_cap: f64,
    /// Target area fraction α* for fixed-area runs.
    pub target_area: Option<f64>,
    /// Area weight used in fixed-area mode.
    pub lambda_a_fixed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.01,
            lambda_a_cap: 5.0,
            target_area: None,
            lambda_a_fixed: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_r < 0.0 || self.lambda_a_cap < 0.0 || self.lambda_a_fixed < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if let Some(a) = self.target_area {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!(
                    "target area {a} must lie strictly inside (0,1)"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the loop needs: budget, schedules, optimizer settings and
/// the contour parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Iteration budget T.
    pub max_iters: usize,
    /// Early-stop patience P.
    pub patience: usize,
    pub learning_rate: f64,
    /// Sharpness at t = 0.
    pub tau0: f64,
    /// Sharpness approached at t = T.
    pub tau_inf: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Harmonic budget K.
    pub harmonics: usize,
    /// Angular quadrature resolution M.
    pub quadrature: usize,
    pub seed: u64,
    pub gradient: GradientStrategy,
    /// Start centers; defaults to the image center for one contour and a
    /// ring of radius 0.4 for several.
    pub initial_centers: Option<Vec<[f64; 2]>>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iters: 5000,
            patience: 100,
            learning_rate: 0.003,
            tau0: 1.0,
            tau_inf: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            harmonics: DEFAULT_HARMONICS,
            quadrature: DEFAULT_QUADRATURE,
            seed: 0,
            gradient: GradientStrategy::Auto,
            initial_centers: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.tau0 > 0.0 && self.tau_inf >= self.tau0) {
            return Err(Error::Config(format!(
                "need tau_inf >= tau0 > 0, got tau0={} tau_inf={}",
                self.tau0, self.tau_inf
            )));
        }
        if self.quadrature < 8 {
            return Err(Error::QuadratureResolution(self.quadrature));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-iteration loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// −cos(e_p,e_o) + cos(e_d,e_o); always in [−2, 2].
    pub extremal: f64,
    /// Σ_i α_r over contours.
    pub area_fraction: f64,
    /// Area weight actually used this iteration.
    pub lambda_a: f64,
    /// Σ_i spectral penalty over contours.
    pub spectral: f64,
    pub total: f64,
    pub cos_preserve: f64,
    pub cos_delete: f64,
}

/// Sharpness τ(t) on a cosine ramp from τ0 (t = 0) to τ∞ (t = T);
/// monotone nondecreasing in t.
pub fn tau_schedule(t: usize, t_max: usize, tau0: f64, tau_inf: f64) -> f64 {
    debug_assert!(t <= t_max);
    let phase = std::f64::consts::PI * t as f64 / t_max as f64;
    tau0 + 0.5 * (tau_inf - tau0) * (1.0 - phase.cos())
}

/// Extremal objective: reward preserving the original embedding, penalize
/// the deleted variant still resembling it.
pub fn extremal_loss(e_o: &Embedding, e_p: &Embedding, e_d: &Embedding) -> Result<f64> {
    Ok(cosine_similarity(e_d, e_o)? - cosine_similarity(e_p, e_o)?)
}

/// Adaptive area weight `min(cap, 1/(1 − cos_op))`, clipped so compactness
/// is enforced only once fidelity is high. Treated as a constant by every
/// gradient path (no derivative flows through it); at cos_op = 1 the clip
/// value is returned as the continuous limit.
pub fn adaptive_area_weight(cos_preserve: f64, cap: f64) -> f64 {
    debug_assert!((-1.0..=1.0).contains(&cos_preserve));
    if cos_preserve >= 1.0 {
        return cap;
    }
    cap.min(1.0 / (1.0 - cos_preserve))
}

pub(crate) fn assemble_report(
    cos_preserve: f64,
    cos_delete: f64,
    area_sum: f64,
    spectral_sum: f64,
    weights: &LossWeights,
    lambda_override: Option<f64>,
) -> LossReport {
    let extremal = cos_delete - cos_preserve;
    let (lambda_a, area_term) = match weights.target_area {
        Some(target) => (weights.lambda_a_fixed, (area_sum - target).abs()),
        None => (
            lambda_override.unwrap_or_else(|| adaptive_area_weight(cos_preserve, weights.lambda_a_cap)),
            area_sum,
        ),
    };
    LossReport {
        extremal,
        area_fraction: area_sum,
        lambda_a,
        spectral: spectral_sum,
        total: extremal + lambda_a * area_term + weights.lambda_r * spectral_sum,
        cos_preserve,
        cos_delete,
    }
}

/// Total loss from precomputed embeddings and the contour geometry.
pub fn total_loss(
    contours: &[ContourParams],
    grid: &AngleGrid,
    e_o: &Embedding,
    e_p: &Embedding,
    e_d: &Embedding,
    weights: &LossWeights,
) -> Result<LossReport> {
    let cos_p = cosine_similarity(e_p, e_o)?;
    let cos_d = cosine_similarity(e_d, e_o)?;
    let mut area_sum = 0.0;
    let mut spec_sum = 0.0;
    for c in contours {
        area_sum += area_fraction(c, grid)?;
        spec_sum += spectral_penalty(c);
    }
    Ok(assemble_report(cos_p, cos_d, area_sum, spec_sum, weights, None))
}

/// Shared state of one optimization problem.
pub(crate) struct Objective<'a> {
    pub x: &'a ImageTensor,
    pub x_blur: &'a ImageTensor,
    pub e_o: &'a Embedding,
    pub weights: &'a LossWeights,
    pub grid: &'a AngleGrid,
}

/// All intermediates of one loss evaluation.
pub(crate) struct Evaluated {
    pub x_p: ImageTensor,
    pub x_d: ImageTensor,
    pub e_p: Embedding,
    pub e_d: Embedding,
    pub report: LossReport,
}

impl Objective<'_> {
    pub fn evaluate(
        &self,
        backend: &mut dyn ModelBackend,
        contours: &[ContourParams],
        tau: f64,
        lambda_override: Option<f64>,
    ) -> Result<Evaluated> {
        let raster = RasterConfig::new(tau);
        let mask = rasterize_multi(contours, self.x.height(), self.x.width(), &raster)?;
        let x_p = compose_preserve(self.x, self.x_blur, &mask)?;
        let x_d = compose_delete(self.x, self.x_blur, &mask)?;
        let e_p = backend.embed(&x_p)?;
        let e_d = backend.embed(&x_d)?;
        let cos_p = cosine_similarity(&e_p, self.e_o)?;
        let cos_d = cosine_similarity(&e_d, self.e_o)?;
        let mut area_sum = 0.0;
        let mut spec_sum = 0.0;
        for c in contours {
            area_sum += area_fraction(c, self.grid)?;
            spec_sum += spectral_penalty(c);
        }
        let report = assemble_report(cos_p, cos_d, area_sum, spec_sum, self.weights, lambda_override);
        Ok(Evaluated {
            x_p,
            x_d,
            e_p,
            e_d,
            report,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
}

/// One row of the run trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub tau: f64,
    pub report: LossReport,
    /// Hash of the parameter snapshot the loss was evaluated at.
    pub param_hash: String,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub entries: Vec<TraceEntry>,
    pub stop: StopReason,
}

impl RunTrace {
    /// CSV export with the pinned column set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "iter,tau,extremal,area,lambda_a,spectral,total,cos_op,cos_od,ms_per_iter\n",
        );
        for e in &self.entries {
            let r = &e.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.3}\n",
                e.iteration,
                e.tau,
                r.extremal,
                r.area_fraction,
                r.lambda_a,
                r.spectral,
                r.total,
                r.cos_preserve,
                r.cos_delete,
                e.ms
            ));
        }
        out
    }
}

/// Result of one optimization run: best-loss contours, the mask rendered
/// from them at the sharpest τ reached, the best report and the trace.
#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub contours: Vec<ContourParams>,
    pub mask: MaskField,
    pub report: LossReport,
    pub trace: RunTrace,
}

pub(crate) fn params_hash(contours: &[ContourParams]) -> String {
    let mut hasher = Sha256::new();
    for c in contours {
        for v in c.to_flat() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn flatten(contours: &[ContourParams]) -> Vec<f64> {
    contours.iter().flat_map(|c| c.to_flat()).collect()
}

fn unflatten(contours: &mut [ContourParams], flat: &[f64]) {
    let mut offset = 0;
    for c in contours.iter_mut() {
        let dof = c.dof();
        c.set_from_flat(&flat[offset..offset + dof]);
        offset += dof;
    }
}

/// Project r0 back into its open interval after a step.
fn clamp_bounds(contours: &mut [ContourParams]) {
    for c in contours.iter_mut() {
        c.r0 = c.r0.clamp(c.r_min + R0_MARGIN, c.r_max - R0_MARGIN);
    }
}

fn initial_contours(n: usize, config: &OptimConfig) -> Result<Vec<ContourParams>> {
    if n == 0 {
        return Err(Error::EmptyContourSet);
    }
    let centers = match &config.initial_centers {
        Some(c) => {
            if c.len() != n {
                return Err(Error::Config(format!(
                    "{} initial centers provided for {n} contours",
                    c.len()
                )));
            }
            c.clone()
        }
        None if n == 1 => vec![[0.0, 0.0]],
        None => geometry::ring_starts(n),
    };
    if n > 1 {
        for i in 0..n {
            for j in i + 1..n {
                if centers[i] == centers[j] {
                    return Err(Error::Config(
                        "initial centers must not coincide for multi-contour runs".into(),
                    ));
                }
            }
        }
    }
    centers
        .into_iter()
        .map(|c| geometry::init_at(c, config.harmonics))
        .collect()
}

/// Run the optimization loop for `n_contours` contours.
pub fn optimize(
    x: &ImageTensor,
    backend: &mut dyn ModelBackend,
    n_contours: usize,
    weights: &LossWeights,
    config: &OptimConfig,
    blur: &BlurConfig,
) -> Result<OptimOutcome> {
    config.validate()?;
    weights.validate()?;
    let strategy = gradient::resolve_strategy(config.gradient, &backend.info())?;

    let x_blur = gaussian_blur(x, blur)?;
    let e_o = backend.embed(x)?;
    let grid = AngleGrid::uniform(config.quadrature);
    let objective = Objective {
        x,
        x_blur: &x_blur,
        e_o: &e_o,
        weights,
        grid: &grid,
    };

    let mut contours = initial_contours(n_contours, config)?;
    let mut flat = flatten(&contours);
    let mut adam = AdamWState::new(flat.len());
    let adam_cfg = config.adamw();

    let mut entries = Vec::new();
    let mut best_total = f64::INFINITY;
    let mut best_contours = contours.clone();
    let mut best_report = None;
    let mut no_improve = 0usize;
    let mut stop = StopReason::MaxIters;
    let mut last_tau = config.tau0;

    for t in 0..config.max_iters {
        let started = Instant::now();
        let tau = tau_schedule(t, config.max_iters, config.tau0, config.tau_inf);
        last_tau = tau;

        let eval = objective.evaluate(backend, &contours, tau, None)?;
        let report = eval.report;
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                iteration: t,
            });
        }

        if report.total < best_total - MIN_IMPROVEMENT {
            best_total = report.total;
            best_contours = contours.clone();
            best_report = Some(report);
            no_improve = 0;
        } else {
            no_improve += 1;
        }

        let converged = no_improve >= config.patience;
        let exhausted = t + 1 == config.max_iters;
        if !converged && !exhausted {
            let grads = gradient::estimate_gradient(
                &objective,
                backend,
                &contours,
                tau,
                report.lambda_a,
                strategy,
                Some(&eval),
            )?;
            let grad_flat: Vec<f64> = grads.into_iter().flatten().collect();
            adam.step(&mut flat, &grad_flat, &adam_cfg).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, iteration: t },
                other => other,
            })?;
            unflatten(&mut contours, &flat);
            clamp_bounds(&mut contours);
            flat = flatten(&contours);
        }

        entries.push(TraceEntry {
            iteration: t,
            tau,
            report,
            param_hash: params_hash(&best_contours),
            ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if converged {
            stop = StopReason::Converged;
            break;
        }
    }

    let report = best_report.ok_or_else(|| Error::Optimization("no finite loss was seen".into()))?;
    let mask = rasterize_multi(
        &best_contours,
        x.height(),
        x.width(),
        &RasterConfig::new(last_tau),
    )?;
    Ok(OptimOutcome {
        contours: best_contours,
        mask,
        report,
        trace: RunTrace { entries, stop },
    })
}

/// One point of the area–fidelity sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub target_area: f64,
    pub achieved_area: f64,
    pub cos_preserve: f64,
    pub cos_delete: f64,
    pub prob_preserve: Option<f64>,
    pub prob_delete: Option<f64>,
}

fn softmax_prob(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    (logits[class] - max).exp() / denom
}

/// Argmax class of the original image, when the backend exposes logits.
fn target_class(backend: &mut dyn ModelBackend, x: &ImageTensor) -> Result<Option<usize>> {
    if !backend.info().capability.supports_logits {
        return Ok(None);
    }
    let logits = backend.logits(x)?;
    let class = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Protocol("backend returned empty logits".into()))?;
    Ok(Some(class))
}

/// Fixed-area optimization for each target fraction, independently
/// initialized; output is ordered by α*. Similarities (and class
/// probabilities when available) are re-evaluated at the final sharpness.
pub fn sweep_target_area(
    x: &ImageTensor,
    backend: &mut dyn ModelBackend,
    alphas: &[f64],
    weights: &LossWeights,
    config: &OptimConfig,
    blur: &BlurConfig,
) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one target area".into()));
    }
    let mut targets = alphas.to_vec();
    targets.sort_by(f64::total_cmp);

    let x_blur = gaussian_blur(x, blur)?;
    let e_o = backend.embed(x)?;
    let grid = AngleGrid::uniform(config.quadrature);
    let class = target_class(backend, x)?;

    let mut out = Vec::with_capacity(targets.len());
    for &target in &targets {
        let run_weights = LossWeights {
            target_area: Some(target),
            ..weights.clone()
        };
        run_weights.validate()?;
        let outcome = optimize(x, backend, 1, &run_weights, config, blur)?;

        let mut achieved = 0.0;
        for c in &outcome.contours {
            achieved += area_fraction(c, &grid)?;
        }
        let raster = RasterConfig::new(config.tau_inf);
        let mask = rasterize_multi(&outcome.contours, x.height(), x.width(), &raster)?;
        let x_p = compose_preserve(x, &x_blur, &mask)?;
        let x_d = compose_delete(x, &x_blur, &mask)?;
        let e_p = backend.embed(&x_p)?;
        let e_d = backend.embed(&x_d)?;
        let (prob_preserve, prob_delete) = match class {
            Some(c) => (
                Some(softmax_prob(&backend.logits(&x_p)?, c)),
                Some(softmax_prob(&backend.logits(&x_d)?, c)),
            ),
            None => (None, None),
        };
        out.push(SweepPoint {
            target_area: target,
            achieved_area: achieved,
            cos_preserve: cosine_similarity(&e_p, &e_o)?,
            cos_delete: cosine_similarity(&e_d, &e_o)?,
            prob_preserve,
            prob_delete,
        });
    }
    Ok(out)
}
