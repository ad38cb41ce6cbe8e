//! Losses, the deletion-ratio controller, AdamW and the training loop.

mod loss;
mod optim;
mod pi;
mod train;

pub use loss::{attention_score_regularizer, clamped_score_mean, gate_regularizer, gate_weights, total_loss};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use pi::{pi_update, PIControllerState};
pub use train::{
    load_training_checkpoint, save_training_checkpoint, step_seed, train_loop, train_step, AlphaMode, BatchSource,
    DatasetSource, EvalHook, MetricsRow, TaskSource, TrainConfig, TrainState, TrainSummary, METRICS_HEADER,
};
