//! Soft rasterization of contours into dense masks, plus the exact adjoint
//! used by the analytic gradient path.
//!
//! A pixel's mask value is `σ(τ·[r(θ_p) − ρ_p])` where `(ρ_p, θ_p)` are its
//! polar coordinates relative to the contour center: interior pixels go to 1,
//! exterior to 0, and the contour itself sits exactly at 0.5. Several
//! contours compose by pixel-wise maximum.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ContourParams;

/// Dense soft mask over the pixel grid; values in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskField {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

impl MaskField {
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Self {
        assert_eq!(values.len(), height * width);
        MaskField {
            values,
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Fraction of pixels at or above the 0.5 binarization threshold.
    pub fn binary_area_fraction(&self) -> f64 {
        let n = self.values.iter().filter(|&&v| v >= 0.5).count();
        n as f64 / self.values.len() as f64
    }

    /// Intersection-over-union of the 0.5-binarized masks.
    pub fn binary_iou(&self, other: &MaskField) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.values.iter().zip(&other.values) {
            let (a, b) = (*a >= 0.5, *b >= 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Centroid of the 0.5-binarized mask in normalized coordinates.
    pub fn binary_centroid(&self) -> [f64; 2] {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for i in 0..self.height {
            for j in 0..self.width {
                if self.get(i, j) >= 0.5 {
                    let (x, y) = pixel_center(i, j, self.height, self.width);
                    sx += x;
                    sy += y;
                    n += 1;
                }
            }
        }
        if n == 0 {
            [0.0, 0.0]
        } else {
            [sx / n as f64, sy / n as f64]
        }
    }
}

/// Rasterization settings. The sigmoid is oriented interior-high: the mask
/// is ≈1 inside the contour so it can gate the preserved image content.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RasterConfig {
    /// Boundary sharpness τ > 0.
    pub tau: f64,
}

impl RasterConfig {
    pub fn new(tau: f64) -> Self {
        assert!(tau > 0.0, "tau must be positive");
        RasterConfig { tau }
    }
}

/// Normalized coordinates of the center of pixel `(row, col)`.
#[inline]
pub fn pixel_center(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    let x = (2 * col + 1) as f64 / width as f64 - 1.0;
    let y = (2 * row + 1) as f64 / height as f64 - 1.0;
    (x, y)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn mask_value(params: &ContourParams, tau: f64, x: f64, y: f64) -> f64 {
    let dx = x - params.center[0];
    let dy = y - params.center[1];
    let rho = (dx * dx + dy * dy).sqrt();
    // A pixel exactly at the center is interior for any radius; θ = 0 there.
    let theta = if rho == 0.0 { 0.0 } else { dy.atan2(dx) };
    sigmoid(tau * (params.radius_at(theta) - rho))
}

/// Rasterize a single contour into an `height`×`width` soft mask.
pub fn rasterize(
    params: &ContourParams,
    height: usize,
    width: usize,
    cfg: &RasterConfig,
) -> Result<MaskField> {
    rasterize_multi(std::slice::from_ref(params), height, width, cfg)
}

/// Rasterize the pixel-wise maximum of several contours.
pub fn rasterize_multi(
    params_list: &[ContourParams],
    height: usize,
    width: usize,
    cfg: &RasterConfig,
) -> Result<MaskField> {
    if params_list.is_empty() {
        return Err(Error::EmptyContourSet);
    }
    assert!(height >= 1 && width >= 1, "empty raster target");
    for p in params_list {
        p.validate()?;
    }
    let tau = cfg.tau;
    let mut values = vec![0.0; height * width];
    values
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, cell) in out.iter_mut().enumerate() {
                let (x, y) = pixel_center(row, col, height, width);
                let mut best = f64::NEG_INFINITY;
                for p in params_list {
                    let m = mask_value(p, tau, x, y);
                    if m > best {
                        best = m;
                    }
                }
                *cell = best;
            }
        });
    Ok(MaskField::new(values, height, width))
}

/// Pull a mask cotangent back to per-contour parameter gradients:
/// `Σ_p cot(p) · ∂m̄(p)/∂Θ_i`, in canonical flat order per contour.
///
/// For the pixel-wise maximum the gradient routes to the argmax contour,
/// ties resolved toward the lowest index. Accumulation runs per row with a
/// fixed reduction order so results are bit-identical regardless of the
/// parallel schedule.
pub fn mask_vjp(
    params_list: &[ContourParams],
    height: usize,
    width: usize,
    cfg: &RasterConfig,
    cotangent: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if params_list.is_empty() {
        return Err(Error::EmptyContourSet);
    }
    for p in params_list {
        p.validate()?;
    }
    if cotangent.len() != height * width {
        return Err(Error::ShapeMismatch {
            what: "cotangent",
            got: cotangent.len().to_string(),
            expected: (height * width).to_string(),
        });
    }
    let tau = cfg.tau;
    let dofs: Vec<usize> = params_list.iter().map(|p| p.dof()).collect();

    let row_grads: Vec<Vec<Vec<f64>>> = (0..height)
        .into_par_iter()
        .map(|row| {
            let mut grads: Vec<Vec<f64>> = dofs.iter().map(|&d| vec![0.0; d]).collect();
            for col in 0..width {
                let cot = cotangent[row * width + col];
                if cot == 0.0 {
                    continue;
                }
                let (x, y) = pixel_center(row, col, height, width);

                // winner of the pixel-wise max (ties -> lowest index)
                let mut win = 0usize;
                let mut win_m = f64::NEG_INFINITY;
                for (i, p) in params_list.iter().enumerate() {
                    let m = mask_value(p, tau, x, y);
                    if m > win_m {
                        win_m = m;
                        win = i;
                    }
                }

                let p = &params_list[win];
                let dx = x - p.center[0];
                let dy = y - p.center[1];
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = if rho == 0.0 { 0.0 } else { dy.atan2(dx) };
                let ev = p.radius_eval(theta);
                let m = sigmoid(tau * (ev.radius - rho));
                let w = cot * m * (1.0 - m) * tau;

                let g = &mut grads[win];
                if rho > 0.0 {
                    // ∂z/∂c via both ρ and θ
                    let inv_rho = 1.0 / rho;
                    let inv_rho2 = inv_rho * inv_rho;
                    g[0] += w * (ev.d_theta * dy * inv_rho2 + dx * inv_rho);
                    g[1] += w * (-ev.d_theta * dx * inv_rho2 + dy * inv_rho);
                }
                g[2] += w * (1.0 + p.bound_scale_slope() * ev.tanh_u);
                for k in 0..p.harmonics() {
                    let kk = (k + 1) as f64;
                    let (s, c) = (kk * theta).sin_cos();
                    g[3 + 2 * k] += w * ev.squash_scale * c;
                    g[4 + 2 * k] -= w * ev.squash_scale * s;
                }
            }
            grads
        })
        .collect();

    // fixed-order reduction over rows
    let mut total: Vec<Vec<f64>> = dofs.iter().map(|&d| vec![0.0; d]).collect();
    for row in row_grads {
        for (acc, g) in total.iter_mut().zip(row) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{init_default, ContourParams};
    use crate::testutil::central_diff;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_on_contour_is_half() {
        // center placed so pixel (3,6) of an 8x8 grid sits exactly at ρ = 0.5
        let p = ContourParams::circle([0.125, -0.125], 0.5, 3);
        let m = rasterize(&p, 8, 8, &RasterConfig::new(7.0)).unwrap();
        assert!((m.get(3, 6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sharp_sigmoid_saturates() {
        let p = ContourParams::circle([0.0, 0.0], 0.5, 0);
        let m = rasterize(&p, 64, 64, &RasterConfig::new(100.0)).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let (x, y) = pixel_center(i, j, 64, 64);
                let rho = (x * x + y * y).sqrt();
                if rho <= 0.12 {
                    assert!(m.get(i, j) > 1.0 - 1e-10);
                } else if rho >= 0.88 {
                    assert!(m.get(i, j) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn soft_sigmoid_matches_scalar_value() {
        // τ=1 and a pixel half a unit inside the contour
        let p = ContourParams::circle([0.125, -0.125], 0.5, 0);
        let m = rasterize(&p, 8, 8, &RasterConfig::new(1.0)).unwrap();
        // pixel (3,4): x=0.125, y=-0.125 -> ρ=0, z = 1·(0.5-0) ... use ρ=0.5-0.5
        // instead check the exact σ(0.5) value at ρ = r̂ - 0.5 = 0.0 offset pixel:
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        // pixel (3,4) sits at the center => ρ=0 => z=0.5 exactly
        assert!((m.get(3, 4) - expected).abs() < 1e-12);
        assert!((expected - 0.6225).abs() < 1e-4);
    }

    #[test]
    fn multi_of_one_equals_single() {
        let p = ContourParams::circle([0.1, 0.2], 0.4, 2);
        let cfg = RasterConfig::new(25.0);
        let a = rasterize(&p, 33, 47, &cfg).unwrap();
        let b = rasterize_multi(&[p], 33, 47, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multi_takes_pixelwise_max_and_is_idempotent() {
        let a = ContourParams::circle([-0.5, 0.0], 0.2, 0);
        let b = ContourParams::circle([0.5, 0.0], 0.2, 0);
        let cfg = RasterConfig::new(40.0);
        let ma = rasterize(&a, 32, 32, &cfg).unwrap();
        let mb = rasterize(&b, 32, 32, &cfg).unwrap();
        let both = rasterize_multi(&[a.clone(), b], 32, 32, &cfg).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(both.get(i, j), ma.get(i, j).max(mb.get(i, j)));
            }
        }
        let twice = rasterize_multi(&[a.clone(), a.clone()], 32, 32, &cfg).unwrap();
        let once = rasterize(&a, 32, 32, &cfg).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn empty_contour_list_is_rejected() {
        assert!(matches!(
            rasterize_multi(&[], 8, 8, &RasterConfig::new(1.0)),
            Err(Error::EmptyContourSet)
        ));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let p = init_default(3);
        let cot = vec![0.0; 16 * 16];
        let g = mask_vjp(&[p], 16, 16, &RasterConfig::new(5.0), &cot).unwrap();
        assert!(g[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (24, 20);
        let cfg = RasterConfig::new(8.0);
        for _ in 0..5 {
            let mut p = ContourParams::circle(
                [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
                rng.gen_range(0.3..0.7),
                3,
            );
            for c in p.coeffs.iter_mut() {
                *c = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            }
            let cot: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = mask_vjp(&[p.clone()], h, w, &cfg, &cot).unwrap();
            let flat = p.to_flat();
            for pi in 0..p.dof() {
                let fd = central_diff(&flat, pi, 1e-4, |v| {
                    let mut q = p.clone();
                    q.set_from_flat(v);
                    let m = rasterize(&q, h, w, &cfg).unwrap();
                    m.values().iter().zip(&cot).map(|(a, b)| a * b).sum()
                });
                let denom = g[0][pi].abs().max(1e-5);
                assert!(
                    (g[0][pi] - fd).abs() / denom < 1e-3,
                    "param {pi}: analytic {} vs fd {}",
                    g[0][pi],
                    fd
                );
            }
        }
    }

    #[test]
    fn disjoint_contours_get_independent_gradients() {
        let a = ContourParams::circle([-0.55, 0.0], 0.15, 2);
        let b = ContourParams::circle([0.55, 0.0], 0.15, 2);
        let cfg = RasterConfig::new(80.0);
        let (h, w) = (48, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cot: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let joint = mask_vjp(&[a.clone(), b.clone()], h, w, &cfg, &cot).unwrap();
        let solo_a = mask_vjp(&[a], h, w, &cfg, &cot).unwrap();
        let solo_b = mask_vjp(&[b], h, w, &cfg, &cot).unwrap();
        for (j, s) in joint[0].iter().zip(&solo_a[0]) {
            assert!((j - s).abs() < 1e-9, "contour a gradient differs: {j} vs {s}");
        }
        for (j, s) in joint[1].iter().zip(&solo_b[0]) {
            assert!((j - s).abs() < 1e-9, "contour b gradient differs: {j} vs {s}");
        }
    }

    #[test]
    fn tau_moves_interior_and_exterior_monotonically() {
        let p = ContourParams::circle([0.0, 0.0], 0.5, 0);
        let lo = rasterize(&p, 32, 32, &RasterConfig::new(2.0)).unwrap();
        let hi = rasterize(&p, 32, 32, &RasterConfig::new(20.0)).unwrap();
        for (a, b) in lo.values().iter().zip(hi.values()) {
            if *a > 0.5 {
                assert!(b >= a);
            } else if *a < 0.5 {
                assert!(b <= a);
            }
        }
    }

    #[test]
    fn huge_tau_approaches_indicator() {
        let mut p = ContourParams::circle([0.1, -0.05], 0.45, 3);
        p.coeffs = vec![[0.15, 0.0], [0.0, -0.1], [0.05, 0.05]];
        let (h, w) = (128, 128);
        let m = rasterize(&p, h, w, &RasterConfig::new(1e4)).unwrap();
        let mut checked = 0usize;
        let mut agree = 0usize;
        for i in 0..h {
            for j in 0..w {
                let (x, y) = pixel_center(i, j, h, w);
                let dx = x - p.center[0];
                let dy = y - p.center[1];
                let rho = (dx * dx + dy * dy).sqrt();
                let r = p.radius_at(if rho == 0.0 { 0.0 } else { dy.atan2(dx) });
                if (rho - r).abs() < 1e-3 {
                    continue; // boundary band
                }
                checked += 1;
                let inside = rho < r;
                if (m.get(i, j) >= 0.5) == inside {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 / checked as f64 > 0.999);
    }

    #[test]
    fn translation_by_whole_pixels_shifts_mask() {
        let (h, w) = (40, 40);
        let p = ContourParams::circle([-0.2, -0.1], 0.3, 0);
        let mut q = p.clone();
        let (dx_pix, dy_pix) = (6usize, 4usize);
        q.center[0] += 2.0 * dx_pix as f64 / w as f64;
        q.center[1] += 2.0 * dy_pix as f64 / h as f64;
        let cfg = RasterConfig::new(15.0);
        let mp = rasterize(&p, h, w, &cfg).unwrap();
        let mq = rasterize(&q, h, w, &cfg).unwrap();
        for i in 0..h - dy_pix {
            for j in 0..w - dx_pix {
                assert!(
                    (mp.get(i, j) - mq.get(i + dy_pix, j + dx_pix)).abs() < 1e-6,
                    "mask does not translate at ({i},{j})"
                );
            }
        }
    }
}
