//! The layered scene model: networks, objective, training and inference.

mod checkpoint;
mod config;
mod elbo;
mod infer;
pub mod nets;
mod params;
mod train;

pub use config::{ModelConfig, TrainConfig};
pub use elbo::{elbo_batch, stage2_batch, ElboBreakdown, ImageNoise, Objective, Schedule, Stage2Breakdown};
pub use infer::{
    decompose, generate, interpolate, interpolate_latents, posterior_modes, render_latents, sample_latents,
    Decomposition, InterpolationMode, ObjectLatent, Overrides, Rendering, SceneLatents,
};
pub use params::{Bound, Group, Init, ParamSpec, Params};
pub use checkpoint::{
    Checkpoint, CheckpointManifest, OptimizerEntry, OptimizerState, Progress, TensorEntry, BLOB_FILE,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION, MANIFEST_FILE,
};
pub use train::{epoch_at, schedule_at, train_stage, validation_loss, StepLog, TrainData, TrainObserver};
