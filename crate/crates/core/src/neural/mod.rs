//! The neural relation extractor: a small transformer encoder with three
//! heads sharing it.
//!
//! - NRC: sigmoid on `h_0` deciding whether any relation holds.
//! - EC: per-token sigmoid marking rationale tokens.
//! - RC: softmax over relations from `[avg ctx | avg subj | avg obj]`, where
//!   the context average covers only the rationale tokens.
//!
//! All arithmetic is `f64`; gradients are derived by hand and checked against
//! finite differences in the tests.

mod checkpoint;
mod encoder;
mod loss;
mod model;
pub(crate) mod ops;
mod optim;
mod params;

#[cfg(test)]
pub(crate) mod tests;

pub use crate::labels::{context_mask, ExplanationLabels, LabelSource};
pub use checkpoint::{MAGIC, VERSION};
pub use encoder::EncoderOutput;
pub use loss::{joint_loss, LossParts};
pub use model::{Ablation, Features, Model, PoolMask, Prediction, Targets};
pub use ops::sigmoid;
pub use optim::{AdamW, Schedule};
pub use params::{ModelConfig, TensorInfo};
