//! Explanation-quality metrics over attribution maps, plus bootstrap
//! confidence intervals.
//!
//! All metrics accept any nonnegative H×W attribution; for this crate's own
//! explanations the final soft mask plays that role. Locality metrics
//! (rank/mass accuracy) compare against a ground-truth annotation;
//! complexity (entropy) and sparseness (Gini) look at the attribution
//! alone; faithfulness correlates attribution mass with the model-score
//! drop under blurred-patch perturbations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{cosine_similarity, ModelBackend};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::perturb::{gaussian_blur, BlurConfig};

/// Nonnegative H×W attribution values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

impl AttributionMap {
    pub fn new(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "attribution",
                got: values.len().to_string(),
                expected: (height * width).to_string(),
            });
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config(
                "attribution values must be finite and nonnegative".into(),
            ));
        }
        Ok(AttributionMap {
            values,
            height,
            width,
        })
    }

    pub fn from_mask(mask: &crate::raster::MaskField) -> Self {
        AttributionMap {
            values: mask.values().to_vec(),
            height: mask.height(),
            width: mask.width(),
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

    fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Ground-truth region as a boolean pixel mask with at least one set pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMask {
    values: Vec<bool>,
    height: usize,
    width: usize,
}

impl AnnotationMask {
    pub fn new(values: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "annotation",
                got: values.len().to_string(),
                expected: (height * width).to_string(),
            });
        }
        if !values.iter().any(|&v| v) {
            return Err(Error::Config("annotation mask has no positive pixels".into()));
        }
        Ok(AnnotationMask {
            values,
            height,
            width,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

fn check_same_shape(attr: &AttributionMap, ann: &AnnotationMask) -> Result<()> {
    if attr.height != ann.height || attr.width != ann.width {
        return Err(Error::ShapeMismatch {
            what: "annotation",
            got: format!("{}x{}", ann.height, ann.width),
            expected: format!("{}x{}", attr.height, attr.width),
        });
    }
    Ok(())
}

/// Fraction of the top-k attributed pixels that fall inside the
/// annotation, with k the annotation size. Ties break in row-major order.
pub fn relevance_rank_accuracy(attr: &AttributionMap, ann: &AnnotationMask) -> Result<f64> {
    check_same_shape(attr, ann)?;
    if attr.total() <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relevance rank needs a nonzero attribution",
        ));
    }
    let k = ann.count();
    let mut order: Vec<usize> = (0..attr.values.len()).collect();
    order.sort_by(|&a, &b| {
        attr.values[b]
            .total_cmp(&attr.values[a])
            .then(a.cmp(&b))
    });
    let hits = order[..k].iter().filter(|&&i| ann.values[i]).count();
    Ok(hits as f64 / k as f64)
}

/// Share of total attribution mass lying inside the annotation.
pub fn relevance_mass_accuracy(attr: &AttributionMap, ann: &AnnotationMask) -> Result<f64> {
    check_same_shape(attr, ann)?;
    let total = attr.total();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relevance mass needs a nonzero attribution",
        ));
    }
    let inside: f64 = attr
        .values
        .iter()
        .zip(ann.values())
        .filter_map(|(v, &keep)| keep.then_some(*v))
        .sum();
    Ok(inside / total)
}

/// Shannon entropy (natural log) of the attribution normalized to sum 1.
/// Zero-mass pixels contribute nothing; a one-hot map scores 0.
pub fn complexity_entropy(attr: &AttributionMap) -> Result<f64> {
    let total = attr.total();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric("entropy needs a nonzero attribution"));
    }
    let mut h = 0.0;
    for &v in &attr.values {
        if v > 0.0 {
            let p = v / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Gini index of the attribution values:
/// `G = Σ_i (2i − n − 1)·a_(i) / (n·Σa)` over ascending `a_(i)`.
/// 0 for a uniform map, `(n−1)/n` for a one-hot map.
pub fn sparseness_gini(attr: &AttributionMap) -> Result<f64> {
    let total = attr.total();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric("gini needs a nonzero attribution"));
    }
    let mut sorted = attr.values.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (2.0 * (i + 1) as f64 - n - 1.0) * v)
        .sum();
    Ok(weighted / (n * total))
}

/// Settings for the faithfulness estimator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FaithfulnessConfig {
    /// Number of random pixel subsets S.
    pub subsets: usize,
    /// Pixels per subset; `None` means 5% of the image.
    pub subset_size: Option<usize>,
    pub seed: u64,
    pub blur: BlurConfig,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        FaithfulnessConfig {
            subsets: 64,
            subset_size: None,
            seed: 0,
            blur: BlurConfig::default(),
        }
    }
}

/// Pearson correlation between the attribution mass of random pixel
/// subsets and the model-score drop when those pixels are replaced by the
/// blurred baseline. Score is the target-class probability when the
/// backend exposes logits, cosine similarity to the original embedding
/// otherwise.
pub fn faithfulness_correlation(
    attr: &AttributionMap,
    x: &ImageTensor,
    backend: &mut dyn ModelBackend,
    cfg: &FaithfulnessConfig,
) -> Result<f64> {
    if attr.height != x.height() || attr.width != x.width() {
        return Err(Error::ShapeMismatch {
            what: "attribution",
            got: format!("{}x{}", attr.height, attr.width),
            expected: format!("{}x{}", x.height(), x.width()),
        });
    }
    if cfg.subsets < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: cfg.subsets,
        });
    }
    let n_pixels = x.height() * x.width();
    let subset_size = cfg
        .subset_size
        .unwrap_or_else(|| ((n_pixels as f64 * 0.05).round() as usize).max(1))
        .min(n_pixels);

    let x_blur = gaussian_blur(x, &cfg.blur)?;
    let e_o = backend.embed(x)?;
    let use_logits = backend.info().capability.supports_logits;
    let target = if use_logits {
        let logits = backend.logits(x)?;
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    } else {
        None
    };
    let score = |img: &ImageTensor, backend: &mut dyn ModelBackend| -> Result<f64> {
        match target {
            Some(class) => {
                let logits = backend.logits(img)?;
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                Ok((logits[class] - max).exp() / denom)
            }
            None => cosine_similarity(&e_o, &backend.embed(img)?),
        }
    };
    let base_score = score(x, backend)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let channels = x.channels();
    let mut masses = Vec::with_capacity(cfg.subsets);
    let mut drops = Vec::with_capacity(cfg.subsets);
    for _ in 0..cfg.subsets {
        let picks = rand::seq::index::sample(&mut rng, n_pixels, subset_size);
        let mut perturbed = x.clone();
        let mut mass = 0.0;
        for pix in picks.iter() {
            mass += attr.values[pix];
            for c in 0..channels {
                let idx = pix * channels + c;
                perturbed.values_mut()[idx] = x_blur.values()[idx];
            }
        }
        masses.push(mass);
        drops.push(base_score - score(&perturbed, backend)?);
    }
    pearson(&masses, &drops)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - mean_a, y - mean_b);
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation is undefined for zero-variance series",
        ));
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(
    samples: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level {level} must lie in (0,1)"
        )));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..n {
                acc += samples[rng.gen_range(0..n)];
            }
            acc / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((mean, quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Empirical quantile with linear interpolation; input must be sorted.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}
