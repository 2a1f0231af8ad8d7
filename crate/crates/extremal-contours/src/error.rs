use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the contour-explanation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid radial bounds: require r_min < r0 < r_max with r_min >= 0, got r_min={r_min}, r0={r0}, r_max={r_max}")]
    InvalidBounds { r_min: f64, r0: f64, r_max: f64 },

    #[error("quadrature resolution {0} is too small (need at least 8 angles)")]
    QuadratureResolution(usize),

    #[error("start point ({0}, {1}) lies outside the [-1,1]^2 image domain")]
    StartOutsideDomain(f64, f64),

    #[error("contour list is empty")]
    EmptyContourSet,

    #[error("shape mismatch: {what} is {got} but expected {expected}")]
    ShapeMismatch {
        what: &'static str,
        got: String,
        expected: String,
    },

    #[error("blur kernel size {kernel} exceeds limit {limit} for a {height}x{width} image")]
    KernelTooLarge {
        kernel: usize,
        limit: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid blur kernel size {0}: must be odd and >= 3")]
    InvalidKernel(usize),

    #[error("degenerate embedding: norm below 1e-12")]
    DegenerateEmbedding,

    #[error("backend does not support {0}")]
    Unsupported(&'static str),

    #[error("backend expects {expected} input but got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("backend transport failure: {0}")]
    Transport(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("non-finite {what} encountered at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    ImageDecode { path: String, message: String },

    #[error("optimization failed: {0}")]
    Optimization(String),
}

impl Error {
    /// Process exit code for the CLI: 1 optimization, 2 I/O or config,
    /// 3 backend/protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::ImageDecode { .. } | Error::Config(_) => 2,
            Error::Transport(_)
            | Error::Protocol(_)
            | Error::Unsupported(_)
            | Error::DimensionMismatch { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
