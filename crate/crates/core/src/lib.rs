//! Deep generative classifier: a multi-label image classifier whose latent
//! code is sampled from a learned Gaussian during training and replaced by
//! its mean at inference, with the deterministic ablation, a tape-based
//! reverse-mode autodiff engine, data pipeline, metrics and trainer.
//!
//! Training runs in `f32`; gradient checks and oracles run in `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, OpKind, Tape};
pub use error::{Error, Result};
pub use model::{DgcModel, Mode, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
