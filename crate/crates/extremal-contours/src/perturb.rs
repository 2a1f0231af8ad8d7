//! Blurred reference image and preserve/delete composition.
//!
//! The blurred background is computed once per image and stays fixed for the
//! whole optimization; the mask then blends original and blurred content
//! into the preserved variant (original inside, blur outside) and the
//! deleted variant (the complement).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::raster::MaskField;

/// Gaussian blur settings. Defaults follow the fixed blur scale used for
/// the deletion baseline: kernel 21, σ = 20.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BlurConfig {
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig {
            kernel_size: 21,
            sigma: 20.0,
        }
    }
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidKernel(self.kernel_size));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "blur sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Normalized 1-D kernel weights.
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.kernel_size / 2) as isize;
        let mut w: Vec<f64> = (-half..=half)
            .map(|t| (-((t * t) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= sum;
        }
        w
    }
}

/// Separable Gaussian blur with edge replication, channel by channel.
pub fn gaussian_blur(x: &ImageTensor, cfg: &BlurConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let limit = 2 * h.min(w) + 1;
    if cfg.kernel_size > limit {
        return Err(Error::KernelTooLarge {
            kernel: cfg.kernel_size,
            limit,
            height: h,
            width: w,
        });
    }
    let kernel = cfg.kernel();
    let half = (kernel.len() / 2) as isize;

    // horizontal pass
    let mut tmp = vec![0.0; h * w * c];
    tmp.par_chunks_mut(w * c).enumerate().for_each(|(i, row)| {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in kernel.iter().enumerate() {
                    let jj = (j as isize + t as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += wt * x.get(i, jj, ch);
                }
                row[j * c + ch] = acc;
            }
        }
    });

    // vertical pass
    let mut out = vec![0.0; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(i, row)| {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in kernel.iter().enumerate() {
                    let ii = (i as isize + t as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[(ii * w + j) * c + ch];
                }
                // convex combination of [0,1] values; clamp guards rounding
                row[j * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    });
    Ok(ImageTensor::from_parts(out, h, w, c))
}

fn check_shapes(x: &ImageTensor, x_blur: &ImageTensor, m: &MaskField) -> Result<()> {
    if !x.same_shape(x_blur) {
        return Err(Error::ShapeMismatch {
            what: "blurred image",
            got: format!("{}x{}x{}", x_blur.height(), x_blur.width(), x_blur.channels()),
            expected: format!("{}x{}x{}", x.height(), x.width(), x.channels()),
        });
    }
    if m.height() != x.height() || m.width() != x.width() {
        return Err(Error::ShapeMismatch {
            what: "mask",
            got: format!("{}x{}", m.height(), m.width()),
            expected: format!("{}x{}", x.height(), x.width()),
        });
    }
    Ok(())
}

/// Preserved variant `x_p = m⊙x + (1−m)⊙x̃`, mask broadcast over channels.
pub fn compose_preserve(
    x: &ImageTensor,
    x_blur: &ImageTensor,
    m: &MaskField,
) -> Result<ImageTensor> {
    check_shapes(x, x_blur, m)?;
    let c = x.channels();
    let values = x
        .values()
        .iter()
        .zip(x_blur.values())
        .enumerate()
        .map(|(idx, (orig, blur))| {
            let mv = m.values()[idx / c];
            mv * orig + (1.0 - mv) * blur
        })
        .collect();
    Ok(ImageTensor::from_parts(
        values,
        x.height(),
        x.width(),
        x.channels(),
    ))
}

/// Deleted variant `x_d = (1−m)⊙x + m⊙x̃`; computed as the preserve
/// composition of the complemented mask so the duality holds bit-exactly.
pub fn compose_delete(x: &ImageTensor, x_blur: &ImageTensor, m: &MaskField) -> Result<ImageTensor> {
    compose_preserve(x, x_blur, &complement(m))
}

/// Pixel-wise `1 − m`.
pub fn complement(m: &MaskField) -> MaskField {
    MaskField::new(
        m.values().iter().map(|v| 1.0 - v).collect(),
        m.height(),
        m.width(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::new(
            (0..h * w * c).map(|_| rng.gen_range(0.0..=1.0)).collect(),
            h,
            w,
            c,
        )
        .unwrap()
    }

    fn mask_of(values: Vec<f64>, h: usize, w: usize) -> MaskField {
        MaskField::new(values, h, w)
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let x = ImageTensor::constant(0.37, 40, 30, 3).unwrap();
        let b = gaussian_blur(&x, &BlurConfig::default()).unwrap();
        for (a, v) in x.values().iter().zip(b.values()) {
            assert!((a - v).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_response_is_separable_kernel() {
        let mut x = ImageTensor::constant(0.0, 11, 11, 1).unwrap();
        x.set(5, 5, 0, 1.0);
        let cfg = BlurConfig {
            kernel_size: 5,
            sigma: 1.0,
        };
        let b = gaussian_blur(&x, &cfg).unwrap();
        let g = cfg.kernel();
        for di in 0..5 {
            for dj in 0..5 {
                let expected = g[di] * g[dj];
                let got = b.get(3 + di, 3 + dj, 0);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "impulse response mismatch at ({di},{dj}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn interior_mass_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = ImageTensor::constant(0.0, 64, 64, 1).unwrap();
        for i in 20..44 {
            for j in 20..44 {
                x.set(i, j, 0, rng.gen_range(0.0..=1.0));
            }
        }
        let b = gaussian_blur(&x, &BlurConfig::default()).unwrap();
        let sum_x: f64 = x.values().iter().sum();
        let sum_b: f64 = b.values().iter().sum();
        assert!(((sum_x - sum_b) / sum_x).abs() < 1e-6);
    }

    #[test]
    fn blur_is_not_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 48, 48, 1);
        let cfg = BlurConfig::default();
        let once = gaussian_blur(&x, &cfg).unwrap();
        let twice = gaussian_blur(&once, &cfg).unwrap();
        let max_diff = once
            .values()
            .iter()
            .zip(twice.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "double blur should differ from single blur");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = ImageTensor::constant(0.5, 8, 8, 1).unwrap();
        let cfg = BlurConfig {
            kernel_size: 21,
            sigma: 5.0,
        };
        assert!(matches!(
            gaussian_blur(&x, &cfg),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn even_kernel_is_rejected() {
        let x = ImageTensor::constant(0.5, 32, 32, 1).unwrap();
        let cfg = BlurConfig {
            kernel_size: 4,
            sigma: 1.0,
        };
        assert!(matches!(gaussian_blur(&x, &cfg), Err(Error::InvalidKernel(4))));
    }

    #[test]
    fn extreme_masks_select_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(&mut rng, 6, 5, 3);
        let xb = random_image(&mut rng, 6, 5, 3);

        let ones = mask_of(vec![1.0; 30], 6, 5);
        assert_eq!(compose_preserve(&x, &xb, &ones).unwrap(), x);
        assert_eq!(compose_delete(&x, &xb, &ones).unwrap(), xb);

        let zeros = mask_of(vec![0.0; 30], 6, 5);
        assert_eq!(compose_preserve(&x, &xb, &zeros).unwrap(), xb);
        assert_eq!(compose_delete(&x, &xb, &zeros).unwrap(), x);

        let half = mask_of(vec![0.5; 30], 6, 5);
        let avg = compose_preserve(&x, &xb, &half).unwrap();
        for ((a, b), v) in x.values().iter().zip(xb.values()).zip(avg.values()) {
            assert!((0.5 * (a + b) - v).abs() < 1e-15);
        }
    }

    #[test]
    fn preserve_plus_delete_is_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(&mut rng, 9, 7, 3);
        let xb = random_image(&mut rng, 9, 7, 3);
        let m = mask_of((0..63).map(|_| rng.gen_range(0.0..=1.0)).collect(), 9, 7);
        let xp = compose_preserve(&x, &xb, &m).unwrap();
        let xd = compose_delete(&x, &xb, &m).unwrap();
        for i in 0..x.values().len() {
            let lhs = xp.values()[i] + xd.values()[i];
            let rhs = x.values()[i] + xb.values()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn delete_is_preserve_of_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(&mut rng, 5, 5, 1);
        let xb = random_image(&mut rng, 5, 5, 1);
        let m = mask_of((0..25).map(|_| rng.gen_range(0.0..=1.0)).collect(), 5, 5);
        let lhs = compose_delete(&x, &xb, &m).unwrap();
        let rhs = compose_preserve(&x, &xb, &complement(&m)).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = ImageTensor::constant(0.5, 4, 4, 1).unwrap();
        let xb = ImageTensor::constant(0.5, 4, 5, 1).unwrap();
        let m = mask_of(vec![0.5; 16], 4, 4);
        assert!(compose_preserve(&x, &xb, &m).is_err());
    }
}
