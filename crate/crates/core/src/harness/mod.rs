//! Optimisation, training loops, configuration and the experiment matrix.

pub mod config;
pub mod data;
pub mod experiment;
pub mod optim;
pub mod pipeline;
pub mod train;

pub use config::{ExperimentConfig, Precision, TrainConfig};
pub use experiment::{run_matrix, ExperimentMatrix, MatrixReport, SystemSpec, TeacherKind};
pub use optim::{adam_step, lr_schedule, AdamState};
