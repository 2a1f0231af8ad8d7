//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;

/// Central finite difference of `f` along coordinate `i` at `point`.
pub fn central_diff(point: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut plus = point.to_vec();
    let mut minus = point.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Sparse bright speckles on a black background. Blurring spreads the
/// speckle energy almost uniformly, so the blurred embedding points in a
/// very different direction from the original one — a strong
/// preserve/delete contrast for the planted-region oracle.
pub fn speckle_image(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..height * width)
        .map(|_| {
            if rng.gen::<f64>() < 0.04 {
                rng.gen_range(0.7..1.0)
            } else {
                0.0
            }
        })
        .collect();
    ImageTensor::new(values, height, width, 1).unwrap()
}
