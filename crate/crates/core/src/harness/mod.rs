//! Training, evaluation, ablation and gradient checking.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use metrics::{MetricsRecord, Prediction};
pub use train::{train, train_on, train_to_dir, Dataset, RunSummary, Session};
