//! Reproducible experiments over the octave detector: dataset builds, training,
//! evaluation, ablation grids, gradient-check sweeps and frequency diagnostics.

pub mod ab;
pub mod ablate;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod freq;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use config::{ExperimentConfig, NeckKind};
pub use data::{cmd_build_data, ensure_dataset, open_dataset};
pub use error::{HarnessError, Result, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
pub use eval::{cmd_eval, ReportRow};
pub use model::{Detector, Neck};
pub use train::{cmd_train, train_model, LogRow, TrainSummary};
