//! Run configuration: defaults, TOML config file, CLI-flag overrides.
//!
//! Precedence is defaults < config file < flags. The fully resolved
//! configuration is embedded in the run manifest so any run can be
//! replayed bit-identically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FaithfulnessConfig;
use crate::optim::{LossWeights, OptimConfig};
use crate::perturb::BlurConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Explain,
    Sweep,
    Robustness,
    Metrics,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Explain => "explain",
            Mode::Sweep => "sweep",
            Mode::Robustness => "robustness",
            Mode::Metrics => "metrics",
        };
        f.write_str(s)
    }
}

/// Complete description of one CLI run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Input image (explain / sweep / robustness).
    pub input: Option<PathBuf>,
    /// Dataset manifest: lines of `image_path annotation_path` (metrics).
    pub dataset: Option<PathBuf>,
    /// Backend specification, e.g. `planted:disc=0.3,-0.2,0.25;pool=2`.
    pub backend: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Number of contours N.
    pub contours: usize,
    /// Worker pool width for dataset commands; 0 = library default.
    pub workers: usize,
    /// Images are scaled so the shorter side matches this and then
    /// center-cropped square before processing.
    pub resolution: usize,
    /// Target area fractions for `sweep`.
    pub alphas: Vec<f64>,
    /// Random circles per α* for the sweep baseline column.
    pub random_baseline_samples: usize,
    /// λ_r values exercised by `robustness`.
    pub lambda_r_sweep: Vec<f64>,
    /// Start-center count for `robustness`; 9 selects the 3×3 grid.
    pub starts: usize,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub blur: BlurConfig,
    pub faithfulness: FaithfulnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Explain,
            input: None,
            dataset: None,
            backend: String::new(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            contours: 1,
            workers: 0,
            resolution: 224,
            alphas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            random_baseline_samples: 16,
            lambda_r_sweep: vec![1e-1, 1e-2, 1e-3],
            starts: 9,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            blur: BlurConfig::default(),
            faithfulness: FaithfulnessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Mode-specific required fields.
    pub fn validate(&self) -> Result<()> {
        if self.backend.is_empty() {
            return Err(Error::Config("no backend specified".into()));
        }
        match self.mode {
            Mode::Metrics => {
                if self.dataset.is_none() {
                    return Err(Error::Config("metrics mode needs a dataset manifest".into()));
                }
            }
            _ => {
                if self.input.is_none() {
                    return Err(Error::Config(format!(
                        "{} mode needs an input image",
                        self.mode
                    )));
                }
            }
        }
        if self.mode == Mode::Sweep {
            if self.alphas.is_empty() {
                return Err(Error::Config("sweep needs a non-empty alpha list".into()));
            }
            for &a in &self.alphas {
                if !(a > 0.0 && a < 1.0) {
                    return Err(Error::Config(format!("target area {a} outside (0,1)")));
                }
            }
        }
        if self.contours == 0 {
            return Err(Error::Config("contour count must be at least 1".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        self.optim.validate()?;
        self.weights.validate()?;
        self.blur.validate()?;
        Ok(())
    }
}

/// Parse a comma-separated list of target areas.
pub fn parse_alpha_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad alpha `{p}`: {e}")))
        })
        .collect()
}
