//! Heteroscedastic multi-task segmentation under label noise, desk scale.
//!
//! The crate is a complete, deterministic pipeline: synthetic 3D phantoms
//! with controllable label corruption, a minimal reverse-mode autodiff
//! engine, a small encoder/decoder segmentation network with a dilated
//! dense bottleneck, heteroscedastic classification losses (learned
//! label smoothing and Monte-Carlo predictive variance), the training
//! protocol (RMSprop + cosine warm restarts, staged loss schedules,
//! sporadic-error rejection), and full-volume three-view evaluation with
//! Dice tables and Wilcoxon signed-rank comparisons.
//!
//! Everything is seeded; repeated runs produce byte-identical artifacts.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod phantom;
pub mod scalar;
pub mod trainer;
pub mod volio;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = autodiff::Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = autodiff::Tape<f32>;
/// Gradient-check-precision tape.
pub type Tape64 = autodiff::Tape<f64>;
