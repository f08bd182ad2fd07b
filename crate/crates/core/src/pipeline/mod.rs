//! Configuration, model assembly, training, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, TrainState};
pub use config::{DataConfig, ModelConfig, Preprocess, TrainConfig, TrainPattern};
pub use eval::{complete_files, evaluate, evaluate_samples};
pub use model::{Prediction, SparseDc};
pub use optim::Adam;
pub use train::{train, Trainer};
