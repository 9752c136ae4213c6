//! A small convolutional-network framework built around the Amplifying Sine
//! Unit activation `z·sin z`, with CIFAR-10 training, a finite-difference
//! gradient oracle and feature-map export.

pub mod activations;
pub mod artifacts;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use activations::ActivationKind;
pub use error::{Error, Result};
pub use model::{build_model, forward_full, Architecture, ModelParams};
pub use tensor::{Shape, Tensor};
pub use train::{EpochMetrics, TrainConfig};
