//! Desk-scale financial sentiment pipeline: a small BERT-style encoder with
//! masked-LM/next-sentence pre-training, classification and regression
//! fine-tuning on [CLS], and the training strategies that keep fine-tuning
//! from clobbering the pre-trained weights (slanted triangular learning
//! rates, discriminative per-layer rates, gradual unfreezing).

pub mod autograd;
pub mod check;
pub mod data;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod train;

pub use autograd::{Scalar, Tape, Tensor, TensorError, TensorId};
pub use model::{ModelConfig, ParamSet};
pub use schedule::{StrategyPreset, TrainingPlan};
