//! Dense and sparse convolution engine for gridded traffic forecasting.
//!
//! * [`tensor`]: dense tensors and layers with hand-written backward passes.
//! * [`sparse`]: COO sparse tensors, rulebooks, and sparse convolutions.
//! * [`models`]: the residual 3D network, its ablations, and the two UNets.
//! * [`data`]: day-file container, synthetic corpus generator, epoch sampler and loader.
//! * [`train`]: optimizers, training loop, evaluation and metrics.

pub mod data;
pub mod error;
pub mod models;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
