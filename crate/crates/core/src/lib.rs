//! Dual-branch deformable transformer denoiser: tensors with reverse-mode
//! differentiation, the network building blocks, checkpointing and an
//! analytic/empirical cost model.

pub mod blocks;
pub mod checkpoint;
pub mod cost;
pub mod counter;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use error::{Error, Result};
pub use network::{count_params, Architecture, Model, NetworkConfig};
pub use params::{Ctx, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
