//! Encoders, optimizer, momentum-encoder state and the training loop.

mod checkpoint;
mod network;
mod optim;
mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, NetRecord, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use network::{
    spectral_norm, Activation, Architecture, Encoder, Model, NetSpec, Network, Projector,
};
pub use optim::{momentum_update, sgd_step, LrSchedule, MoCoState, OptConfig};
pub use trainer::{
    batch_gradient_check, history_csv, train, Diagnostics, EpochRecord, TrainOutput,
    DIAGNOSTIC_SAMPLES,
};
