//! Hard-attention gates and gradient routing on a small f64 autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, the computation graph and finite-difference checks
//! - [`gate`]: sigmoid-scored feature gates
//! - [`nn`]: linear/attention/convolution layers, the gated micro-ViT,
//!   the gated multi-stream CNN and a gated MLP
//! - [`optim`]: clipping, Adam, cosine warm restarts and the two-phase
//!   gradient-routing step
//! - [`loss`]: size-weighted Huber loss, target normalization, cross-entropy
//! - [`metrics`]: size binning, confusion matrices and fold consolidation
//! - [`data`]: CSV/CIFAR-100 loaders, synthetic data, augmentation and grouped k-fold splits
//! - [`train`]: epoch loops, validation loss and prediction helpers

pub mod data;
pub mod error;
pub mod gate;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{GradientMap, Group, Param, ParamId, ParamStore};
pub use tensor::{Array, Graph, Var};
