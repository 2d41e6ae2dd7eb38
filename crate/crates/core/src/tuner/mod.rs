//! Prompt-tuning machinery: the parameter store and its frozen/trainable
//! partition, AdamW, checkpointing, and the training loop.

pub mod checkpoint;
mod fit;
pub mod optim;
mod store;

pub use fit::{fit, lr_at, FitResult, StepRecord, TrainSchedule};
pub use optim::{adamw_step, AdamW};
pub use store::{
    count_specs, Init, ParamEntry, ParamFilter, ParamGroup, ParamSpec, ParamStore, TuneMode,
};
