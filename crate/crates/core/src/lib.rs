//! Multi-scenario click-through-rate modeling.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a define-by-run reverse-mode tape.
//! - [`data`]: feature schema, synthetic multi-scenario generator, CSV I/O.
//! - [`model`]: dual embeddings, per-scenario field gates, shared-information
//!   transfer (FCN / MoE / CGC), the cross-scenario orthogonality loss and
//!   hypernetwork-gated scenario towers.
//! - [`train`]: Adam, AUC/logloss evaluation, early stopping, comparisons.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use params::{ParamId, ParamStore};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use config::{ConfigError, RunConfig};
