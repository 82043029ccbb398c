//! Metrics, synthetic networks, the experiment grid and its reports.

mod config;
mod metrics;
mod report;
mod runner;
pub mod stage;
mod synth;

pub use config::{ExternalSpec, GridSpec, ModelChoice, STANDARD_REDUNDANCIES};
pub use metrics::mae_rmse;
pub use report::{emit_reports, heatmap_name, pivot_table, write_results_csv};
pub use runner::{cell_seed, resolve_workers, run_grid, Cell, CellStatus, DataSource, EvalRecord, GraphArtifact, GridOutput};
pub use synth::{gen_synthetic, write_metadata_csv, write_readings_csv, LayoutKind, LayoutSpec, SiteSpec, SyntheticSpec};

use thiserror::Error;

use crate::ensemble::{AdapterError, BlendError};
use crate::graph::GraphError;
use crate::models::ModelError;
use crate::spatial::SpatialError;
use crate::timeseries::TimeSeriesError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("prediction shape {pred:?} differs from truth {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("no values to score")]
    EmptyMetrics,
    #[error("non-finite prediction error")]
    NonFinite,
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("no records to report")]
    NoRecords,
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.display().to_string(), source }
}
