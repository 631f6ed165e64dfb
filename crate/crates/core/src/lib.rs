//! DeepFusionNet: a lightweight convolutional autoencoder for low-light
//! image enhancement and 2× super-resolution, built on a small NCHW
//! reverse-mode differentiation engine.

pub mod autograd;
pub mod data;
pub mod error;
pub mod fixture;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{BatchStats, BnStats, Tape, Var};
pub use error::{DfnError, Result};
pub use gradcheck::finite_difference_grad;
pub use metrics::{MetricRecord, SsimConfig};
pub use model::{DfnModel, ModelConfig, ParameterReport, Variant};
pub use nn::{Ctx, Mode, ParamId, ParamStore};
pub use optim::AdamState;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor4};
