//! Training, evaluation and visual inspection of the pose-search model.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod train;
pub mod viz;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{Ablation, GridSettings, LossWeights, TrainConfig};
pub use data::{prepare, Prepared};
pub use error::{ExperimentError, Result};
pub use eval::{evaluate, write_report, Aggregates, EvalReport, SampleResult};
pub use loss::{total_loss, LossTerms, LossValues};
pub use train::{train, train_prepared, LossRecord, TrainOutcome};
pub use viz::emit_visualizations;
