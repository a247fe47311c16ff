//! Synthetic-noise training and evaluation for the DDT denoiser.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::{Config, DataConfig, PatchStage, TrainConfig};
pub use error::{HarnessError, Result};
pub use train::{evaluate, EvalRow, MetricsRow, Trainer};
