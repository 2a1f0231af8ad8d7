//! Classifier abstraction: an embedding function with optional
//! input-gradient and logit capabilities.
//!
//! Two deterministic in-process backends cover testing (a planted-region
//! oracle and a seeded linear projection); real models attach through the
//! newline-delimited JSON protocol in [`external`].

mod builtin;
pub mod external;

pub use builtin::{DiscRegion, LinearProjectionBackend, PlantedRegionBackend};
pub use external::{Endpoint, ExternalBackend};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Fixed-length embedding vector produced by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
///
/// Embeddings are compared without separate normalization; near-zero
/// vectors are rejected as degenerate.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            what: "embedding",
            got: b.dim().to_string(),
            expected: a.dim().to_string(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// What a backend can do beyond plain embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapability {
    pub supports_input_vjp: bool,
    pub supports_logits: bool,
}

/// Static facts about a backend: accepted input dims and capabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendInfo {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub capability: BackendCapability,
}

impl BackendInfo {
    pub(crate) fn check_dims(&self, x: &ImageTensor) -> Result<()> {
        if x.height() != self.height || x.width() != self.width || x.channels() != self.channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}x{}", self.height, self.width, self.channels),
                got: format!("{}x{}x{}", x.height(), x.width(), x.channels()),
            });
        }
        Ok(())
    }
}

/// An embedding model. Implementations must be deterministic: the same
/// image yields a bit-identical embedding. One instance serves one
/// optimization loop at a time; batch parallelism uses one instance per
/// worker.
pub trait ModelBackend: Send {
    fn info(&self) -> BackendInfo;

    fn embed(&mut self, x: &ImageTensor) -> Result<Embedding>;

    /// `Jᵀ·cotangent` with `J = ∂embed/∂x`, flattened HWC. Only when
    /// `capability.supports_input_vjp`; callers fall back to finite
    /// differences otherwise.
    fn input_vjp(&mut self, _x: &ImageTensor, _cotangent: &Embedding) -> Result<Vec<f64>> {
        Err(Error::Unsupported("input_vjp"))
    }

    /// Class logits, when `capability.supports_logits`.
    fn logits(&mut self, _x: &ImageTensor) -> Result<Vec<f64>> {
        Err(Error::Unsupported("logits"))
    }
}

/// Parsed `--backend` specification. Builtin backends bind to the image
/// dimensions when built; external ones learn their dims from the
/// handshake.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Planted { discs: Vec<DiscRegion>, pool: usize },
    Linear { dim: usize, seed: u64 },
    External(Endpoint),
}

impl BackendSpec {
    /// Parse specs like `planted:disc=0.3,-0.2,0.25;pool=4`,
    /// `linear:dim=64;seed=7`, `external:cmd=python3 serve.py`,
    /// `external:tcp=127.0.0.1:9000`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("backend spec `{s}`: {msg}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "planted" => {
                let mut discs = Vec::new();
                let mut pool = 4usize;
                for field in rest.split(';').filter(|f| !f.is_empty()) {
                    let (key, value) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("field `{field}` is not key=value")))?;
                    match key {
                        "disc" => {
                            let nums: Vec<f64> = value
                                .split(',')
                                .map(|v| v.trim().parse::<f64>())
                                .collect::<std::result::Result<_, _>>()
                                .map_err(|e| bad(format!("disc `{value}`: {e}")))?;
                            if nums.len() != 3 {
                                return Err(bad(format!(
                                    "disc needs cx,cy,radius but got {} numbers",
                                    nums.len()
                                )));
                            }
                            discs.push(DiscRegion {
                                center: [nums[0], nums[1]],
                                radius: nums[2],
                            });
                        }
                        "pool" => {
                            pool = value
                                .parse()
                                .map_err(|e| bad(format!("pool `{value}`: {e}")))?;
                        }
                        other => return Err(bad(format!("unknown field `{other}`"))),
                    }
                }
                if discs.is_empty() {
                    return Err(bad("planted backend needs at least one disc".into()));
                }
                Ok(BackendSpec::Planted { discs, pool })
            }
            "linear" => {
                let mut dim = 64usize;
                let mut seed = 0u64;
                for field in rest.split(';').filter(|f| !f.is_empty()) {
                    let (key, value) = field
                        .split_once('=')
                        .ok_or_else(|| bad(format!("field `{field}` is not key=value")))?;
                    match key {
                        "dim" => dim = value.parse().map_err(|e| bad(format!("dim: {e}")))?,
                        "seed" => seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
                        other => return Err(bad(format!("unknown field `{other}`"))),
                    }
                }
                Ok(BackendSpec::Linear { dim, seed })
            }
            "external" => {
                let (key, value) = rest
                    .split_once('=')
                    .ok_or_else(|| bad("external needs cmd=... or tcp=...".into()))?;
                match key {
                    "cmd" => {
                        let argv: Vec<String> =
                            value.split_whitespace().map(str::to_string).collect();
                        if argv.is_empty() {
                            return Err(bad("empty command".into()));
                        }
                        Ok(BackendSpec::External(Endpoint::Command(argv)))
                    }
                    "tcp" => Ok(BackendSpec::External(Endpoint::Tcp(value.to_string()))),
                    other => return Err(bad(format!("unknown transport `{other}`"))),
                }
            }
            other => Err(bad(format!(
                "unknown backend kind `{other}` (expected planted|linear|external)"
            ))),
        }
    }

    /// Instantiate for images of the given shape.
    pub fn build(&self, height: usize, width: usize, channels: usize) -> Result<Box<dyn ModelBackend>> {
        Ok(match self {
            BackendSpec::Planted { discs, pool } => Box::new(PlantedRegionBackend::new(
                height,
                width,
                channels,
                discs.clone(),
                *pool,
            )?),
            BackendSpec::Linear { dim, seed } => Box::new(LinearProjectionBackend::new(
                height, width, channels, *dim, *seed,
            )),
            BackendSpec::External(endpoint) => Box::new(ExternalBackend::connect(endpoint)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let a = Embedding::new(vec![1.0, 2.0, -3.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let e1 = Embedding::new(vec![1.0, 0.0]);
        let e2 = Embedding::new(vec![0.0, 5.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);

        let neg = Embedding::new(vec![-1.0, -2.0, 3.0]);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = Embedding::new(vec![0.3, -1.2, 0.7, 2.0]);
        let b = Embedding::new(vec![1.1, 0.4, -0.2, 0.9]);
        let base = cosine_similarity(&a, &b).unwrap();
        let a2 = Embedding::new(a.values().iter().map(|v| v * 17.5).collect());
        let b2 = Embedding::new(b.values().iter().map(|v| v * 0.003).collect());
        assert!((cosine_similarity(&a2, &b2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn degenerate_embedding_is_rejected() {
        let a = Embedding::new(vec![0.0, 0.0]);
        let b = Embedding::new(vec![1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn parse_planted_spec() {
        let spec = BackendSpec::parse("planted:disc=0.3,-0.2,0.25;pool=8").unwrap();
        assert_eq!(
            spec,
            BackendSpec::Planted {
                discs: vec![DiscRegion {
                    center: [0.3, -0.2],
                    radius: 0.25
                }],
                pool: 8
            }
        );
    }

    #[test]
    fn parse_linear_and_external_specs() {
        assert_eq!(
            BackendSpec::parse("linear:dim=32;seed=9").unwrap(),
            BackendSpec::Linear { dim: 32, seed: 9 }
        );
        assert_eq!(
            BackendSpec::parse("external:tcp=127.0.0.1:4000").unwrap(),
            BackendSpec::External(Endpoint::Tcp("127.0.0.1:4000".into()))
        );
        assert!(BackendSpec::parse("planted:").is_err());
        assert!(BackendSpec::parse("magic:x=1").is_err());
    }
}
