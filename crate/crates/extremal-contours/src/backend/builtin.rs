//! Deterministic in-process backends used as test oracles.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageTensor;

use super::{BackendCapability, BackendInfo, Embedding, ModelBackend};

/// A disc in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscRegion {
    pub center: [f64; 2],
    pub radius: f64,
}

impl DiscRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        dx * dx + dy * dy <= self.radius * self.radius
    }

    /// Fraction of the normalized `[-1,1]^2` domain covered by this disc.
    pub fn area_fraction(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius / crate::geometry::DOMAIN_AREA
    }
}

struct PoolCell {
    row0: usize,
    row1: usize,
    col0: usize,
    col1: usize,
    in_region: bool,
}

impl PoolCell {
    fn pixel_count(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// Embedding that depends only on a known region: average-pooled luminance
/// on cells whose center falls inside the planted discs, zero elsewhere.
///
/// Perturbing any pixel outside the region leaves the embedding unchanged
/// bit-exactly, which makes this the ground-truth oracle for recovery
/// tests. The map is linear in the image, so it also supports the exact
/// input VJP.
pub struct PlantedRegionBackend {
    height: usize,
    width: usize,
    channels: usize,
    pool: usize,
    cells: Vec<PoolCell>,
    discs: Vec<DiscRegion>,
}

impl PlantedRegionBackend {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        discs: Vec<DiscRegion>,
        pool: usize,
    ) -> Result<Self> {
        use crate::error::Error;
        if pool == 0 {
            return Err(Error::Config("pool must be positive".into()));
        }
        if discs.is_empty() {
            return Err(Error::Config("planted backend needs at least one disc".into()));
        }
        let rows = height.div_ceil(pool);
        let cols = width.div_ceil(pool);
        let mut cells = Vec::with_capacity(rows * cols);
        for ci in 0..rows {
            for cj in 0..cols {
                let row0 = ci * pool;
                let row1 = ((ci + 1) * pool).min(height);
                let col0 = cj * pool;
                let col1 = ((cj + 1) * pool).min(width);
                // cell center = mean of first and last pixel centers
                let x = (col0 + col1) as f64 / width as f64 - 1.0;
                let y = (row0 + row1) as f64 / height as f64 - 1.0;
                let in_region = discs.iter().any(|d| d.contains(x, y));
                cells.push(PoolCell {
                    row0,
                    row1,
                    col0,
                    col1,
                    in_region,
                });
            }
        }
        Ok(PlantedRegionBackend {
            height,
            width,
            channels,
            pool,
            cells,
            discs,
        })
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn discs(&self) -> &[DiscRegion] {
        &self.discs
    }

    /// True when the pixel belongs to a cell inside the planted region.
    pub fn pixel_in_region(&self, row: usize, col: usize) -> bool {
        let cols = self.width.div_ceil(self.pool);
        let cell = (row / self.pool) * cols + col / self.pool;
        self.cells[cell].in_region
    }
}

impl ModelBackend for PlantedRegionBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            height: self.height,
            width: self.width,
            channels: self.channels,
            embed_dim: self.cells.len(),
            capability: BackendCapability {
                supports_input_vjp: true,
                supports_logits: false,
            },
        }
    }

    fn embed(&mut self, x: &ImageTensor) -> Result<Embedding> {
        self.info().check_dims(x)?;
        let values = self
            .cells
            .iter()
            .map(|cell| {
                if !cell.in_region {
                    return 0.0;
                }
                let mut acc = 0.0;
                for i in cell.row0..cell.row1 {
                    for j in cell.col0..cell.col1 {
                        acc += x.luminance(i, j);
                    }
                }
                acc / cell.pixel_count() as f64
            })
            .collect();
        Ok(Embedding::new(values))
    }

    fn input_vjp(&mut self, x: &ImageTensor, cotangent: &Embedding) -> Result<Vec<f64>> {
        self.info().check_dims(x)?;
        let mut grad = vec![0.0; self.height * self.width * self.channels];
        for (cell, &cot) in self.cells.iter().zip(cotangent.values()) {
            if !cell.in_region || cot == 0.0 {
                continue;
            }
            let w = cot / (cell.pixel_count() as f64 * self.channels as f64);
            for i in cell.row0..cell.row1 {
                for j in cell.col0..cell.col1 {
                    let base = (i * self.width + j) * self.channels;
                    for c in 0..self.channels {
                        grad[base + c] += w;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// `e(x) = A·vec(x)` with `A` drawn once from a seeded generator.
///
/// Linear, so the VJP is exactly `Aᵀ·cotangent`; used for
/// gradient-exactness tests. Logits are the projection itself.
pub struct LinearProjectionBackend {
    height: usize,
    width: usize,
    channels: usize,
    embed_dim: usize,
    // row-major D × (H·W·C)
    matrix: Vec<f64>,
}

impl LinearProjectionBackend {
    pub fn new(height: usize, width: usize, channels: usize, embed_dim: usize, seed: u64) -> Self {
        let n = height * width * channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n as f64).sqrt();
        let matrix = (0..embed_dim * n)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect();
        LinearProjectionBackend {
            height,
            width,
            channels,
            embed_dim,
            matrix,
        }
    }

    pub fn matrix_entry(&self, out: usize, input: usize) -> f64 {
        self.matrix[out * self.height * self.width * self.channels + input]
    }
}

impl ModelBackend for LinearProjectionBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            height: self.height,
            width: self.width,
            channels: self.channels,
            embed_dim: self.embed_dim,
            capability: BackendCapability {
                supports_input_vjp: true,
                supports_logits: true,
            },
        }
    }

    fn embed(&mut self, x: &ImageTensor) -> Result<Embedding> {
        self.info().check_dims(x)?;
        let n = x.values().len();
        let values = (0..self.embed_dim)
            .map(|k| {
                let row = &self.matrix[k * n..(k + 1) * n];
                row.iter().zip(x.values()).map(|(a, v)| a * v).sum()
            })
            .collect();
        Ok(Embedding::new(values))
    }

    fn input_vjp(&mut self, x: &ImageTensor, cotangent: &Embedding) -> Result<Vec<f64>> {
        self.info().check_dims(x)?;
        let n = x.values().len();
        let mut grad = vec![0.0; n];
        for (k, &cot) in cotangent.values().iter().enumerate() {
            if cot == 0.0 {
                continue;
            }
            let row = &self.matrix[k * n..(k + 1) * n];
            for (g, a) in grad.iter_mut().zip(row) {
                *g += cot * a;
            }
        }
        Ok(grad)
    }

    fn logits(&mut self, x: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.embed(x)?.values().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::cosine_similarity;
    use crate::testutil::central_diff;
    use rand_chacha::ChaCha8Rng;

    fn disc() -> DiscRegion {
        DiscRegion {
            center: [0.3, -0.2],
            radius: 0.25,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(
            (0..h * w * c).map(|_| rng.gen_range(0.0..=1.0)).collect(),
            h,
            w,
            c,
        )
        .unwrap()
    }

    #[test]
    fn planted_zero_image_embeds_to_zero() {
        let mut b = PlantedRegionBackend::new(32, 32, 1, vec![disc()], 4).unwrap();
        let x = ImageTensor::constant(0.0, 32, 32, 1).unwrap();
        let e = b.embed(&x).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_embedding_is_deterministic_and_local() {
        let mut b = PlantedRegionBackend::new(32, 32, 1, vec![disc()], 4).unwrap();
        let x = random_image(1, 32, 32, 1);
        let e1 = b.embed(&x).unwrap();
        let e2 = b.embed(&x).unwrap();
        assert_eq!(e1, e2);

        // flip a pixel outside every region cell: embedding unchanged bit-exactly
        let mut y = x.clone();
        let (mut oi, mut oj) = (0, 0);
        'outer: for i in 0..32 {
            for j in 0..32 {
                if !b.pixel_in_region(i, j) {
                    (oi, oj) = (i, j);
                    break 'outer;
                }
            }
        }
        y.set(oi, oj, 0, 1.0 - y.get(oi, oj, 0));
        assert_eq!(b.embed(&y).unwrap(), e1);

        // and a pixel inside moves it
        let (mut ii, mut ij) = (0, 0);
        'outer2: for i in 0..32 {
            for j in 0..32 {
                if b.pixel_in_region(i, j) {
                    (ii, ij) = (i, j);
                    break 'outer2;
                }
            }
        }
        let mut z = x.clone();
        z.set(ii, ij, 0, 1.0 - z.get(ii, ij, 0));
        assert_ne!(b.embed(&z).unwrap(), e1);
    }

    #[test]
    fn planted_vjp_is_zero_outside_region() {
        let mut b = PlantedRegionBackend::new(24, 24, 1, vec![disc()], 4).unwrap();
        let x = random_image(2, 24, 24, 1);
        let e = b.embed(&x).unwrap();
        let cot = Embedding::new((0..e.dim()).map(|i| (i as f64 * 0.37).sin()).collect());
        let g = b.input_vjp(&x, &cot).unwrap();
        for i in 0..24 {
            for j in 0..24 {
                if !b.pixel_in_region(i, j) {
                    assert_eq!(g[i * 24 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn linear_projection_matches_dot_product() {
        let mut b = LinearProjectionBackend::new(8, 8, 1, 16, 42);
        let x = random_image(3, 8, 8, 1);
        let e = b.embed(&x).unwrap();
        // verify one coordinate by explicit dot product
        let k = 5;
        let manual: f64 = (0..64).map(|i| b.matrix_entry(k, i) * x.values()[i]).sum();
        assert!((e.values()[k] - manual).abs() < 1e-12);
    }

    #[test]
    fn linear_vjp_matches_finite_differences() {
        let mut b = LinearProjectionBackend::new(6, 5, 1, 8, 7);
        let x = random_image(4, 6, 5, 1);
        let cot = Embedding::new((0..8).map(|i| 0.5 - 0.1 * i as f64).collect());
        let g = b.input_vjp(&x, &cot).unwrap();
        let flat = x.values().to_vec();
        for i in [0usize, 7, 13, 29] {
            let fd = central_diff(&flat, i, 1e-6, |v| {
                let img = ImageTensor::from_parts(v.to_vec(), 6, 5, 1);
                let mut bb = LinearProjectionBackend::new(6, 5, 1, 8, 7);
                let e = bb.embed(&img).unwrap();
                cot.dot(&e)
            });
            let denom = g[i].abs().max(1e-8);
            assert!((g[i] - fd).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn linear_vjp_is_additive_in_cotangent() {
        let mut b = LinearProjectionBackend::new(7, 7, 3, 12, 11);
        let x = random_image(5, 7, 7, 3);
        let c1 = Embedding::new((0..12).map(|i| (i as f64).cos()).collect());
        let c2 = Embedding::new((0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let sum = Embedding::new(
            c1.values()
                .iter()
                .zip(c2.values())
                .map(|(a, b)| a + b)
                .collect(),
        );
        let g1 = b.input_vjp(&x, &c1).unwrap();
        let g2 = b.input_vjp(&x, &c2).unwrap();
        let gs = b.input_vjp(&x, &sum).unwrap();
        for i in 0..gs.len() {
            assert!((gs[i] - g1[i] - g2[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn preserving_region_reproduces_original_embedding() {
        let mut b = PlantedRegionBackend::new(48, 48, 1, vec![disc()], 2).unwrap();
        let x = random_image(6, 48, 48, 1);
        let e_o = b.embed(&x).unwrap();

        // keep region pixels, replace the rest with garbage
        let mut kept = x.clone();
        for i in 0..48 {
            for j in 0..48 {
                if !b.pixel_in_region(i, j) {
                    kept.set(i, j, 0, 0.123);
                }
            }
        }
        assert_eq!(b.embed(&kept).unwrap(), e_o);
        assert!((cosine_similarity(&e_o, &b.embed(&kept).unwrap()).unwrap() - 1.0).abs() < 1e-15);
    }
}
