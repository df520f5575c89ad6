//! Choice pre-training, flow pre-training, prefix-conditioned post-training
//! and the optimizer.

mod batch;
mod optim;
mod trainer;

pub use batch::{Sample, Sampler, chunk_at, sample_at};
pub use optim::{AdamConfig, OptimizerState, adamw_step, warmup_lr};
pub use trainer::{
    LogRow, PostMask, Stage, TrainConfig, draw_prefix_len, posttrain_async, posttrain_sync, pretrain_choice,
    pretrain_flow, train, trainable_mask, write_log_csv,
};
