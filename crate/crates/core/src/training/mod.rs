//! AdamW training with trainable masks, optimizer warm-up and checkpoints.

mod checkpoint;
mod optimizer;
mod trainer;

pub use checkpoint::{Checkpoint, Provenance};
pub use optimizer::{adamw_step, adamw_step_masked, AdamW, OptimizerState};
pub use trainer::{
    train, train_step, warmup_optimizer_state, BatchSource, CheckpointKind, TrainOptions, TrainOutcome, TrainableMask,
};
