//! Training loop, embedding extraction, rank-1 evaluation and the
//! ablation grid.

use std::io;
use std::path::{Path, PathBuf};

use lstcn_core::{CheckpointError, ModelError};
use lstcn_data::DataError;
use thiserror::Error;

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod metrics;
pub mod run;
pub mod train;

pub use ablation::{ablation_suite, ablation_table, default_grid, AblationRow, AblationSpec};
pub use config::{desk_model, DataSource, EvalConfig, Precision, TrainConfig};
pub use dataset::{load_run_data, RunData};
pub use eval::{extract_embeddings, rank1, write_report, EmbeddingTable, EvalResult};
pub use metrics::{read_metrics, summarize, MetricsLog, MetricsRecord, MetricsSummary};
pub use run::{evaluate_model, run_experiment};
pub use train::{train, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss: {0}")]
    Loss(String),
    #[error("non-finite {what} at iteration {iteration}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite {
        iteration: u64,
        what: String,
        last_checkpoint: Option<PathBuf>,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
