pub mod optim;
pub mod trainer;

pub use optim::{
    adamw_step, clip_global_norm, global_norm, huber_loss, layer_lr_scale, layer_lr_scales, lr_at, OptimizerState,
};
pub use trainer::{train, train_until, write_log_csv, Checkpoint, EpochLog, SelectBy, TrainConfig, TrainOutcome, TrainOutput};
