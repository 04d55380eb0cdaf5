//! Optimization: learning-rate schedule, gradient clipping, Adam,
//! checkpoints, and the training loop shared by pre-training and
//! fine-tuning.

mod checkpoint;
mod config;
mod optim;
mod run;

pub use checkpoint::Checkpoint;
pub use config::{NegativeMode, TrainConfig};
pub use optim::{adam_update, clip_global_norm, lr_schedule, AdamConfig, OptState};
pub use run::{finetune, train, StepMetrics, TrainData, TrainReport};
