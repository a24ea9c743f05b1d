//! Teacher–student knowledge distillation for multivariate time-series
//! classification.
//!
//! A teacher trained on a rich multi-channel view transfers its soft
//! labels and segment-attention behavior to a smaller student that only
//! sees a channel subset. The student objective sums attention KL, hard
//! and soft cross-entropies, and a learnable combined-label term.
//!
//! The crate is organized as:
//! - [`autodiff`]: tape-based reverse-mode differentiation engine
//! - [`model`]: the shared CNN + BiLSTM + self-attention architecture
//! - [`distill`]: imitation losses and the frozen teacher bundle
//! - [`data`]: ingestion, framing, projection, noise, splits, synthesis
//! - [`metrics`]: ROC-AUC, PR-AUC, macro-F1 with per-class breakdowns
//! - [`train`]: Adam, early stopping, checkpoints, multi-seed drivers

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod real;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use real::{Precision, Real};
