//! Contour-based explanations for image classifiers.
//!
//! Instead of optimizing a dense per-pixel saliency mask, this crate
//! parameterizes a smooth star-convex region by a truncated Fourier series
//! (a center, a base radius and K complex harmonics) and optimizes those
//! few parameters under an extremal preserve/delete objective: keeping the
//! region should keep the model's embedding, deleting it should suppress
//! it. The result is a single simply connected mask with a smooth boundary,
//! no cleanup required.
//!
//! The crate ships:
//! - contour geometry with analytic derivatives ([`geometry`]),
//! - differentiable soft rasterization and its adjoint ([`raster`]),
//! - blurred-reference perturbations ([`perturb`]),
//! - pluggable embedding backends with a JSON wire protocol ([`backend`]),
//! - the optimization loop, schedules and gradient estimators ([`optim`]),
//! - attribution-quality metrics with bootstrap CIs ([`metrics`]),
//! - CLI entry points and reproducible run artifacts ([`runner`]).

pub mod backend;
pub mod config;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod perturb;
pub mod raster;
pub mod runner;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
