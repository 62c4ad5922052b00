//! Synthetic data, file formats, configuration and the training loop.

pub mod annotations;
pub mod checkpoint;
pub mod config;
pub mod sgd;
pub mod synth;
pub mod train;

pub use annotations::{
    format_annotations, format_predictions, parse_annotations, parse_predictions,
};
pub use checkpoint::Checkpoint;
pub use config::{parse_key_values, RunConfig, Schedule, TrainConfig};
pub use sgd::{sgd_step, Sgd};
pub use synth::{synth_scene, synth_split, ClassSpec, ObjectKind, Scene, SceneConfig};
pub use train::{evaluate_model, load_model, predict, train, Dataset, TrainOptions, TrainResult};
