//! Sensor ingestion, resampling onto regular grids, day-based splits and
//! sliding-window datasets.

mod ingest;
mod normalize;
mod resample;
mod split;
mod window;

pub use ingest::{apply_metadata, ingest_csv, read_metadata, CsvSchema, IngestReport, SensorMeta};
pub use normalize::NormStats;
pub use resample::resample;
pub use split::{split_by_days, SplitSpec, Splits, TestSplit, TrainSplit, ValSplit};
pub use window::{make_windows, window_lengths, WindowSet};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling rates (minutes) the experiment grid is defined over.
pub const SUPPORTED_RATES: [u32; 5] = [5, 15, 30, 45, 60];

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum TimeSeriesError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("no valid rows in {0}")]
    NoValidRows(String),
    #[error("unsupported sampling interval {0} min (supported: 5, 15, 30, 45, 60)")]
    UnsupportedRate(u32),
    #[error("sensors share no common time span")]
    NoOverlap,
    #[error("sensor `{0}` has no observations inside the common span")]
    EmptySensor(String),
    #[error("panel spans {have} whole days but the split needs {need}")]
    SpanTooShort { have: usize, need: usize },
    #[error("split days must all be positive, got {0:?}")]
    InvalidSplit(SplitSpec),
    #[error("window lengths and stride must be >= 1 (context {context}, horizon {horizon}, stride {stride})")]
    InvalidWindow { context: usize, horizon: usize, stride: usize },
    #[error("normalisation stats cover {stats} nodes, panel has {panel}")]
    NodeMismatch { stats: usize, panel: usize },
}

pub type Result<T, E = TimeSeriesError> = std::result::Result<T, E>;

/// One sensor's readings, strictly increasing in time, all finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSeries {
    pub sensor_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// `(UTC epoch seconds, value)`.
    pub samples: Vec<(i64, f64)>,
}

impl SensorSeries {
    pub fn new(sensor_id: impl Into<String>, samples: Vec<(i64, f64)>) -> Self {
        Self { sensor_id: sensor_id.into(), latitude: 0.0, longitude: 0.0, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `N x T` sensors-by-time matrix on a shared regular timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPanel {
    pub sensor_ids: Vec<String>,
    pub interval_minutes: u32,
    /// Timestamp of column 0 (left edge of its bucket).
    pub start: i64,
    pub values: Array2<f64>,
    /// `true` where the cell was observed, `false` where it was imputed.
    pub mask: Array2<bool>,
}

impl AlignedPanel {
    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn interval_seconds(&self) -> i64 {
        i64::from(self.interval_minutes) * 60
    }

    pub fn samples_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.interval_seconds()) as usize
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start + step as i64 * self.interval_seconds()
    }

    /// Columns `[from, from + len)` as a new panel.
    pub fn slice_steps(&self, from: usize, len: usize) -> AlignedPanel {
        AlignedPanel {
            sensor_ids: self.sensor_ids.clone(),
            interval_minutes: self.interval_minutes,
            start: self.timestamp(from),
            values: self.values.slice(s![.., from..from + len]).to_owned(),
            mask: self.mask.slice(s![.., from..from + len]).to_owned(),
        }
    }

    /// Rows for the given node indices, in that order.
    pub fn select_nodes(&self, nodes: &[usize]) -> AlignedPanel {
        AlignedPanel {
            sensor_ids: nodes.iter().map(|&i| self.sensor_ids[i].clone()).collect(),
            interval_minutes: self.interval_minutes,
            start: self.start,
            values: self.values.select(ndarray::Axis(0), nodes),
            mask: self.mask.select(ndarray::Axis(0), nodes),
        }
    }

    pub fn imputed_cells(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }
}

pub(crate) fn check_rate(f_s: u32) -> Result<()> {
    if SUPPORTED_RATES.contains(&f_s) {
        Ok(())
    } else {
        Err(TimeSeriesError::UnsupportedRate(f_s))
    }
}
