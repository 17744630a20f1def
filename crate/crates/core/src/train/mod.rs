//! Optimisation: Adam with exponential decay, the batch loop and checkpoints.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use optim::{adam_step, lr_schedule, AdamState, TrainConfig};
pub use trainer::{metrics_csv, Control, EpochMetrics, Trainer};
