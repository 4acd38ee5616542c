//! Patch-wise masked autoencoder: tokenization, model, optimizer and
//! pretraining loop.

pub mod adamw;
pub mod model;
pub mod patch;
pub mod train;

pub use adamw::{AdamWConfig, AdamWState};
pub use model::{full_mse, masked_mse, Dense, Gradients, LossScope, MaeModel, TENSOR_NAMES};
pub use patch::PatchSpec;
pub use train::{
    pretrain, sample_loss, training_mask, AtlasInputs, Sample, TrainConfig, TrainOutcome,
};
