//! Star-convex contour parameterization.
//!
//! A contour is a radius profile over angle, expressed as a base radius plus
//! a truncated Fourier series squashed through `tanh` so the radius always
//! stays inside `[r_min, r_max]`:
//!
//! ```text
//! r(θ) = r0 + s̄ · tanh( Σ_k  re_k·cos(kθ) − im_k·sin(kθ) ),
//! s̄   = min(r0 − r_min, r_max − r0)
//! ```
//!
//! All quantities live in the normalized `[-1,1]^2` image domain. A contour
//! with `K` harmonics has `2K+3` scalar degrees of freedom: center (2), base
//! radius (1) and the complex coefficients (2K).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area of the normalized image domain `[-1,1]^2`.
pub const DOMAIN_AREA: f64 = 4.0;

pub const DEFAULT_R0: f64 = 0.5;
pub const DEFAULT_R_MIN: f64 = 0.1;
pub const DEFAULT_R_MAX: f64 = 1.0;
/// Harmonic budget that keeps masks expressive but rounded.
pub const DEFAULT_HARMONICS: usize = 5;
/// Default quadrature resolution for the area integral.
pub const DEFAULT_QUADRATURE: usize = 256;

/// Learnable parameters of one contour.
///
/// Serializes to the canonical on-disk JSON form
/// `{"center":[x,y],"r0":..,"coeffs":[[re,im],..],"r_min":..,"r_max":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourParams {
    /// Center in normalized image coordinates.
    pub center: [f64; 2],
    /// Base radius; must satisfy `r_min < r0 < r_max`.
    pub r0: f64,
    /// Complex Fourier coefficients as `(re, im)` pairs for k = 1..=K.
    pub coeffs: Vec<[f64; 2]>,
    /// Lower radius bound (>= 0).
    pub r_min: f64,
    /// Upper radius bound.
    pub r_max: f64,
}

/// Pointwise evaluation of the radius profile and the pieces its
/// derivatives are assembled from.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RadiusEval {
    /// r(θ)
    pub radius: f64,
    /// tanh(u(θ))
    pub tanh_u: f64,
    /// s̄ · (1 − tanh²(u)), the common factor of all coefficient partials.
    pub squash_scale: f64,
    /// dr/dθ
    pub d_theta: f64,
}

impl ContourParams {
    /// Circle of radius `r0` at `center` with `k` zeroed harmonics and the
    /// default radial bounds.
    pub fn circle(center: [f64; 2], r0: f64, k: usize) -> Self {
        ContourParams {
            center,
            r0,
            coeffs: vec![[0.0, 0.0]; k],
            r_min: DEFAULT_R_MIN,
            r_max: DEFAULT_R_MAX,
        }
    }

    /// Number of harmonics K.
    pub fn harmonics(&self) -> usize {
        self.coeffs.len()
    }

    /// Number of scalar degrees of freedom (2K+3).
    pub fn dof(&self) -> usize {
        2 * self.coeffs.len() + 3
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().all(|v| v.is_finite())
            && self.r0.is_finite()
            && self.r_min.is_finite()
            && self.r_max.is_finite()
            && self.coeffs.iter().flatten().all(|v| v.is_finite());
        if !finite || !(self.r_min < self.r0 && self.r0 < self.r_max) || self.r_min < 0.0 {
            return Err(Error::InvalidBounds {
                r_min: self.r_min,
                r0: self.r0,
                r_max: self.r_max,
            });
        }
        Ok(())
    }

    /// Bound scale s̄ = min(r0 − r_min, r_max − r0).
    pub fn bound_scale(&self) -> f64 {
        (self.r0 - self.r_min).min(self.r_max - self.r0)
    }

    /// ds̄/dr0. At the tie r0 − r_min = r_max − r0 the left branch (+1)
    /// is taken so runs stay reproducible.
    pub fn bound_scale_slope(&self) -> f64 {
        if self.r0 - self.r_min <= self.r_max - self.r0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Fourier argument u(θ) = Re Σ w_k e^{ikθ}.
    fn fourier_arg(&self, theta: f64) -> f64 {
        let mut u = 0.0;
        for (i, [re, im]) in self.coeffs.iter().enumerate() {
            let k = (i + 1) as f64;
            let (s, c) = (k * theta).sin_cos();
            u += re * c - im * s;
        }
        u
    }

    /// Radius profile at a single angle.
    pub fn radius_at(&self, theta: f64) -> f64 {
        self.r0 + self.bound_scale() * self.fourier_arg(theta).tanh()
    }

    pub(crate) fn radius_eval(&self, theta: f64) -> RadiusEval {
        let sbar = self.bound_scale();
        let mut u = 0.0;
        let mut du = 0.0;
        for (i, [re, im]) in self.coeffs.iter().enumerate() {
            let k = (i + 1) as f64;
            let (s, c) = (k * theta).sin_cos();
            u += re * c - im * s;
            du += k * (-re * s - im * c);
        }
        let tanh_u = u.tanh();
        let squash_scale = sbar * (1.0 - tanh_u * tanh_u);
        RadiusEval {
            radius: self.r0 + sbar * tanh_u,
            tanh_u,
            squash_scale,
            d_theta: squash_scale * du,
        }
    }

    /// Flatten to the canonical parameter order `[cx, cy, r0, re1, im1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dof());
        v.push(self.center[0]);
        v.push(self.center[1]);
        v.push(self.r0);
        for [re, im] in &self.coeffs {
            v.push(*re);
            v.push(*im);
        }
        v
    }

    /// Overwrite from a flat vector in canonical order. Panics on length
    /// mismatch; callers own the layout.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.dof(), "flat parameter length mismatch");
        self.center = [flat[0], flat[1]];
        self.r0 = flat[2];
        for (i, c) in self.coeffs.iter_mut().enumerate() {
            *c = [flat[3 + 2 * i], flat[4 + 2 * i]];
        }
    }
}

/// Uniform angular quadrature grid over `[0, 2π)`.
#[derive(Debug, Clone)]
pub struct AngleGrid {
    angles: Vec<f64>,
}

impl AngleGrid {
    /// `m` uniformly spaced angles starting at 0 with spacing 2π/m.
    pub fn uniform(m: usize) -> Self {
        assert!(m >= 1, "angle grid needs at least one sample");
        let step = std::f64::consts::TAU / m as f64;
        AngleGrid {
            angles: (0..m).map(|j| j as f64 * step).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

/// Radius profile sampled on `grid`. Every value lies in `[r_min, r_max]`.
pub fn radius_profile(params: &ContourParams, grid: &AngleGrid) -> Result<Vec<f64>> {
    params.validate()?;
    Ok(grid.angles().iter().map(|&t| params.radius_at(t)).collect())
}

/// Area fraction α_r = 1/(2S) ∮ r(θ)² dθ of the normalized domain,
/// by trapezoidal quadrature on `grid` (exact to spectral accuracy for the
/// smooth periodic integrand).
pub fn area_fraction(params: &ContourParams, grid: &AngleGrid) -> Result<f64> {
    params.validate()?;
    if grid.len() < 8 {
        return Err(Error::QuadratureResolution(grid.len()));
    }
    let step = std::f64::consts::TAU / grid.len() as f64;
    let sum: f64 = grid
        .angles()
        .iter()
        .map(|&t| {
            let r = params.radius_at(t);
            r * r
        })
        .sum();
    Ok(sum * step / (2.0 * DOMAIN_AREA))
}

/// Spectral penalty Σ k²·|w_k|². Zero iff all coefficients are zero.
pub fn spectral_penalty(params: &ContourParams) -> f64 {
    params
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, [re, im])| {
            let k = (i + 1) as f64;
            k * k * (re * re + im * im)
        })
        .sum()
}

/// Analytic partials of the radius profile, area fraction and spectral
/// penalty with respect to every parameter, in canonical flat order.
///
/// The center never enters the radius profile, so its rows are zero here;
/// it only acts through rasterization.
#[derive(Debug, Clone)]
pub struct GeometryGradients {
    /// `d r(θ_j) / d p` for each parameter p; shape (2K+3) × M.
    pub radius: Vec<Vec<f64>>,
    /// `d α_r / d p`, through the same quadrature as [`area_fraction`].
    pub area: Vec<f64>,
    /// `d L_spec / d p`.
    pub spectral: Vec<f64>,
}

pub fn geometry_gradients(params: &ContourParams, grid: &AngleGrid) -> Result<GeometryGradients> {
    params.validate()?;
    if grid.len() < 8 {
        return Err(Error::QuadratureResolution(grid.len()));
    }
    let dof = params.dof();
    let m = grid.len();
    let k = params.harmonics();
    let sbar_slope = params.bound_scale_slope();

    let mut radius = vec![vec![0.0; m]; dof];
    let mut radii = vec![0.0; m];
    for (j, &theta) in grid.angles().iter().enumerate() {
        let ev = params.radius_eval(theta);
        radii[j] = ev.radius;
        // r0 enters both directly and through s̄.
        radius[2][j] = 1.0 + sbar_slope * ev.tanh_u;
        for i in 0..k {
            let kk = (i + 1) as f64;
            let (s, c) = (kk * theta).sin_cos();
            radius[3 + 2 * i][j] = ev.squash_scale * c;
            radius[4 + 2 * i][j] = -ev.squash_scale * s;
        }
    }

    let step = std::f64::consts::TAU / m as f64;
    let scale = step / DOMAIN_AREA; // 1/(2S) · dθ · 2r cancels the 2
    let area = radius
        .iter()
        .map(|dr| dr.iter().zip(&radii).map(|(d, r)| d * r).sum::<f64>() * scale)
        .collect();

    let mut spectral = vec![0.0; dof];
    for (i, [re, im]) in params.coeffs.iter().enumerate() {
        let kk = (i + 1) as f64;
        spectral[3 + 2 * i] = 2.0 * kk * kk * re;
        spectral[4 + 2 * i] = 2.0 * kk * kk * im;
    }

    Ok(GeometryGradients {
        radius,
        area,
        spectral,
    })
}

/// Default initialization: a circle of radius 0.5 at the image center with
/// zeroed coefficients.
pub fn init_default(k: usize) -> ContourParams {
    ContourParams::circle([0.0, 0.0], DEFAULT_R0, k)
}

/// Initialization at an arbitrary start point inside the image domain.
pub fn init_at(start: [f64; 2], k: usize) -> Result<ContourParams> {
    if !(start[0].abs() <= 1.0 && start[1].abs() <= 1.0) {
        return Err(Error::StartOutsideDomain(start[0], start[1]));
    }
    Ok(ContourParams::circle(start, DEFAULT_R0, k))
}

/// The 3×3 grid of start centers used by robustness runs.
pub fn grid_starts() -> Vec<[f64; 2]> {
    let pos = [-0.5, 0.0, 0.5];
    let mut out = Vec::with_capacity(9);
    for &y in &pos {
        for &x in &pos {
            out.push([x, y]);
        }
    }
    out
}

/// Evenly spaced start centers on a circle of radius 0.4 for N-contour runs;
/// avoids the degenerate fully-overlapping initialization.
pub fn ring_starts(n: usize) -> Vec<[f64; 2]> {
    if n == 1 {
        return vec![[0.0, 0.0]];
    }
    (0..n)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / n as f64;
            [0.4 * phi.cos(), 0.4 * phi.sin()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::central_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_params(rng: &mut ChaCha8Rng, k: usize) -> ContourParams {
        let r_min = 0.1;
        let r_max = 1.0;
        ContourParams {
            center: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)],
            r0: rng.gen_range(0.15..0.95),
            coeffs: (0..k)
                .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
                .collect(),
            r_min,
            r_max,
        }
    }

    #[test]
    fn zero_coefficients_give_constant_circle() {
        let p = ContourParams::circle([0.0, 0.0], 0.5, 5);
        let grid = AngleGrid::uniform(64);
        for r in radius_profile(&p, &grid).unwrap() {
            assert_eq!(r, 0.5);
        }
    }

    #[test]
    fn radius_respects_tanh_bounds() {
        // s̄ = 0.4, so any coefficients stay within r0 ± 0.4.
        let mut p = ContourParams::circle([0.0, 0.0], 0.5, 3);
        p.coeffs = vec![[5.0, -3.0], [2.0, 2.0], [-4.0, 0.5]];
        let grid = AngleGrid::uniform(512);
        for r in radius_profile(&p, &grid).unwrap() {
            assert!(r >= 0.1 && r <= 0.9, "radius {r} escaped bounds");
        }
    }

    #[test]
    fn single_harmonic_matches_scalar_reference() {
        let mut p = ContourParams::circle([0.0, 0.0], 0.55, 1);
        p.coeffs = vec![[0.1, 0.0]];
        // independent scalar recomputation at θ = 0
        let sbar = (0.55f64 - 0.1).min(1.0 - 0.55);
        let expected = 0.55 + sbar * 0.1f64.tanh();
        assert!((p.radius_at(0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn invalid_r0_is_rejected() {
        let p = ContourParams::circle([0.0, 0.0], 1.2, 2);
        let grid = AngleGrid::uniform(32);
        assert!(matches!(
            radius_profile(&p, &grid),
            Err(Error::InvalidBounds { .. })
        ));
    }

    #[test]
    fn circle_area_matches_disc_formula() {
        let p = ContourParams::circle([0.2, -0.1], 0.5, 4);
        let grid = AngleGrid::uniform(256);
        let a = area_fraction(&p, &grid).unwrap();
        assert!((a - std::f64::consts::PI * 0.25 / 4.0).abs() < 1e-9);

        let unit = ContourParams {
            center: [0.0, 0.0],
            r0: 1.0,
            coeffs: vec![],
            r_min: 0.0,
            r_max: 2.0,
        };
        let a1 = area_fraction(&unit, &grid).unwrap();
        assert!((a1 - std::f64::consts::PI / 4.0).abs() < 1e-9);
    }

    #[test]
    fn area_matches_high_resolution_quadrature() {
        let mut p = ContourParams::circle([0.0, 0.0], 0.5, 3);
        p.coeffs = vec![[0.2, 0.0], [0.0, 0.0], [0.0, 0.1]];
        let coarse = area_fraction(&p, &AngleGrid::uniform(256)).unwrap();
        let fine = area_fraction(&p, &AngleGrid::uniform(65536)).unwrap();
        assert!((coarse - fine).abs() < 1e-6);
    }

    #[test]
    fn tiny_quadrature_grid_is_rejected() {
        let p = init_default(2);
        assert!(matches!(
            area_fraction(&p, &AngleGrid::uniform(4)),
            Err(Error::QuadratureResolution(4))
        ));
    }

    #[test]
    fn spectral_penalty_weights_by_squared_harmonic() {
        let mut p = init_default(3);
        assert_eq!(spectral_penalty(&p), 0.0);

        p.coeffs = vec![[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        assert_eq!(spectral_penalty(&p), 1.0);

        p.coeffs = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        assert_eq!(spectral_penalty(&p), 4.0);

        p.coeffs = vec![[0.3, 0.4], [0.0, 0.5], [0.0, 0.0]];
        assert!((spectral_penalty(&p) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn spectral_gradient_is_exact() {
        let mut p = init_default(2);
        p.coeffs = vec![[1.0, 0.0], [0.0, 0.0]];
        let g = geometry_gradients(&p, &AngleGrid::uniform(64)).unwrap();
        assert_eq!(g.spectral[3], 2.0);
        assert_eq!(g.spectral[4], 0.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = AngleGrid::uniform(128);
        for _ in 0..20 {
            let p = sample_params(&mut rng, 4);
            let g = geometry_gradients(&p, &grid).unwrap();
            let flat = p.to_flat();
            for pi in 0..p.dof() {
                let fd_area = central_diff(&flat, pi, 1e-5, |v| {
                    let mut q = p.clone();
                    q.set_from_flat(v);
                    area_fraction(&q, &grid).unwrap()
                });
                let denom = g.area[pi].abs().max(1e-6);
                assert!(
                    (g.area[pi] - fd_area).abs() / denom < 1e-4,
                    "area partial {pi}: analytic {} vs fd {}",
                    g.area[pi],
                    fd_area
                );

                let fd_spec = central_diff(&flat, pi, 1e-5, |v| {
                    let mut q = p.clone();
                    q.set_from_flat(v);
                    spectral_penalty(&q)
                });
                let denom = g.spectral[pi].abs().max(1e-6);
                assert!((g.spectral[pi] - fd_spec).abs() / denom < 1e-4);

                // radius profile partials, spot-checked at a few angles
                for &j in &[0usize, 17, 63] {
                    let theta = grid.angles()[j];
                    let fd_r = central_diff(&flat, pi, 1e-5, |v| {
                        let mut q = p.clone();
                        q.set_from_flat(v);
                        q.radius_at(theta)
                    });
                    let denom = g.radius[pi][j].abs().max(1e-6);
                    assert!(
                        (g.radius[pi][j] - fd_r).abs() / denom < 1e-4,
                        "radius partial {pi} at angle {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn circle_area_slope_in_r0_is_analytic() {
        let p = ContourParams::circle([0.0, 0.0], 0.4, 3);
        let grid = AngleGrid::uniform(256);
        let g = geometry_gradients(&p, &grid).unwrap();
        // dα/dr0 = π·r0/2 for a circle (tanh(0) = 0 kills the s̄ term)
        let expected = std::f64::consts::PI * 0.4 / 2.0;
        assert!((g.area[2] - expected).abs() < 1e-9);
        let fd = central_diff(&p.to_flat(), 2, 1e-5, |v| {
            let mut q = p.clone();
            q.set_from_flat(v);
            area_fraction(&q, &grid).unwrap()
        });
        assert!((g.area[2] - fd).abs() < 1e-8);
    }

    #[test]
    fn init_default_is_centered_circle() {
        let p = init_default(5);
        assert_eq!(p.center, [0.0, 0.0]);
        assert_eq!(p.r0, 0.5);
        assert_eq!(p.coeffs, vec![[0.0, 0.0]; 5]);
        assert_eq!((p.r_min, p.r_max), (0.1, 1.0));
    }

    #[test]
    fn init_at_keeps_shape_and_rejects_outside_starts() {
        let p = init_at([0.5, -0.5], 5).unwrap();
        assert_eq!(p.center, [0.5, -0.5]);
        assert_eq!(p.r0, 0.5);
        assert!(matches!(
            init_at([1.5, 0.0], 5),
            Err(Error::StartOutsideDomain(..))
        ));
    }

    #[test]
    fn nine_grid_starts_differ_only_in_center() {
        let starts = grid_starts();
        assert_eq!(starts.len(), 9);
        let contours: Vec<_> = starts.iter().map(|&s| init_at(s, 5).unwrap()).collect();
        for c in &contours {
            assert_eq!(c.r0, contours[0].r0);
            assert_eq!(c.coeffs, contours[0].coeffs);
        }
        let unique: std::collections::BTreeSet<String> = contours
            .iter()
            .map(|c| format!("{:?}", c.center))
            .collect();
        assert_eq!(unique.len(), 9);
    }

    #[test]
    fn contour_json_round_trips_canonical_format() {
        let mut p = init_default(2);
        p.coeffs = vec![[0.25, -0.5], [0.0, 0.125]];
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with("{\"center\":"));
        assert!(json.contains("\"coeffs\":[[0.25,-0.5],[0.0,0.125]]"));
        let back: ContourParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn radius_stays_bounded(
            r0 in 0.15f64..0.95,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ContourParams::circle([0.0, 0.0], r0, 5);
            for c in p.coeffs.iter_mut() {
                *c = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            }
            let grid = AngleGrid::uniform(128);
            for r in radius_profile(&p, &grid).unwrap() {
                prop_assert!(r >= p.r_min - 1e-12 && r <= p.r_max + 1e-12);
            }
        }

        #[test]
        fn phase_rotation_rotates_profile(
            seed in 0u64..500,
            phi in 0.0f64..std::f64::consts::TAU,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_params(&mut rng, 4);
            // w_k -> w_k · e^{-ikφ}
            let rotated = ContourParams {
                coeffs: p
                    .coeffs
                    .iter()
                    .enumerate()
                    .map(|(i, [re, im])| {
                        let k = (i + 1) as f64;
                        let (s, c) = (k * phi).sin_cos();
                        [re * c + im * s, im * c - re * s]
                    })
                    .collect(),
                ..p.clone()
            };
            let grid = AngleGrid::uniform(64);
            for &theta in grid.angles() {
                prop_assert!((rotated.radius_at(theta) - p.radius_at(theta - phi)).abs() < 1e-9);
            }
            let a = area_fraction(&p, &AngleGrid::uniform(256)).unwrap();
            let ar = area_fraction(&rotated, &AngleGrid::uniform(256)).unwrap();
            prop_assert!((a - ar).abs() < 1e-9);
            prop_assert!((spectral_penalty(&p) - spectral_penalty(&rotated)).abs() < 1e-9);
        }
    }

    #[test]
    fn quadrature_error_shrinks_with_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = sample_params(&mut rng, 5);
        let reference = area_fraction(&p, &AngleGrid::uniform(1 << 16)).unwrap();
        let mut last = f64::INFINITY;
        for m in [8usize, 16, 32, 64] {
            let err = (area_fraction(&p, &AngleGrid::uniform(m)).unwrap() - reference).abs();
            assert!(err <= last + 1e-15, "error grew from {last} to {err} at M={m}");
            last = err;
        }
    }
}
