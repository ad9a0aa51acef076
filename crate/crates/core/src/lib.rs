//! Dual cross-modal denoising pre-training for paired and unpaired speech
//! and text: autodiff, features, model, corruption, objectives, the
//! iterative denoising process, training, fine-tuning and metrics.

pub mod audio;
pub mod autograd;
mod binio;
pub mod config;
pub mod corpus;
pub mod corruption;
pub mod error;
pub mod finetune;
pub mod idp;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
