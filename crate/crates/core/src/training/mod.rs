//! Fine-tuning loop: trainable-set selection, AdamW, cosine schedule.

mod optim;
mod trainer;

pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use trainer::{evaluate, select_trainable, train, EpochRecord, EvalMetrics, Policy, TrainConfig, TrainReport};
