//! File-staged pipeline: splits go to disk, fitting reads only the train and
//! validation files, evaluation alone opens the test file.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use super::metrics::mae_rmse;
use super::{io_err, BenchError};
use crate::graph::{build_graph, normalize_adjacency, pearson_abs};
use crate::models::{FitReport, Forecaster, ForecasterSpec, ModelKind, TrainConfig};
use crate::timeseries::{make_windows, split_by_days, window_lengths, AlignedPanel, SplitSpec, TrainSplit, ValSplit};

pub const TRAIN_FILE: &str = "train.csv";
pub const VAL_FILE: &str = "val.csv";
pub const TEST_FILE: &str = "test.csv";

/// Wide CSV: a `timestamp` column then one column per sensor.
pub fn write_panel_csv(panel: &AlignedPanel, path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(panel.sensor_ids.iter().cloned());
    w.write_record(&header)?;
    for t in 0..panel.n_steps() {
        let mut row = vec![panel.timestamp(t).to_string()];
        row.extend(panel.values.column(t).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_panel_csv(path: &Path) -> Result<AlignedPanel, BenchError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(file);
    let sensor_ids: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let bad = |m: &str| BenchError::Config(format!("{}: {m}", path.display()));
    let mut times = Vec::new();
    let mut cols: Vec<f64> = Vec::new();
    for record in r.records() {
        let record = record?;
        times.push(record.get(0).and_then(|v| v.parse::<i64>().ok()).ok_or_else(|| bad("bad timestamp"))?);
        for v in record.iter().skip(1) {
            cols.push(v.parse().map_err(|_| bad("bad value"))?);
        }
    }
    if times.len() < 2 {
        return Err(bad("need at least two rows"));
    }
    let interval = times[1] - times[0];
    if interval <= 0 || interval % 60 != 0 || times.windows(2).any(|w| w[1] - w[0] != interval) {
        return Err(bad("irregular timestamps"));
    }
    let (n, t) = (sensor_ids.len(), times.len());
    let values = Array2::from_shape_vec((t, n), cols).map_err(|_| bad("ragged rows"))?.reversed_axes().as_standard_layout().to_owned();
    Ok(AlignedPanel {
        sensor_ids,
        interval_minutes: (interval / 60) as u32,
        start: times[0],
        values,
        mask: Array2::from_elem((n, t), true),
    })
}

/// Splits `panel` and writes the three parts into `dir`.
pub fn stage_splits(panel: &AlignedPanel, spec: SplitSpec, dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let splits = split_by_days(panel, spec)?;
    write_panel_csv(&splits.train, &dir.join(TRAIN_FILE))?;
    write_panel_csv(&splits.val, &dir.join(VAL_FILE))?;
    write_panel_csv(&splits.test, &dir.join(TEST_FILE))?;
    Ok(())
}

/// Fits a model from the staged train and validation files and saves it to
/// `model_dir`. Graph models derive their graph from the training file.
pub fn stage_fit(
    dir: &Path,
    kind: ModelKind,
    redundancy: Option<f64>,
    seed: u64,
    cfg: &TrainConfig,
    model_dir: &Path,
) -> Result<FitReport, BenchError> {
    let train = TrainSplit::assume(read_panel_csv(&dir.join(TRAIN_FILE))?);
    let val = ValSplit::assume(read_panel_csv(&dir.join(VAL_FILE))?);
    let (c, h) = window_lengths(train.interval_minutes)?;
    let mut spec = ForecasterSpec::new(kind, train.n_nodes(), c, h, seed);
    if kind.uses_graph() {
        let corr = pearson_abs(train.values.view())?;
        spec = spec.with_graph(normalize_adjacency(&build_graph(&corr, redundancy.unwrap_or(60.0))?));
    }
    let (model, report) = Forecaster::fit(spec, &train, &val, cfg)?;
    model.save(model_dir)?;
    Ok(report)
}

/// Loads a saved model and scores it on the staged test file.
pub fn stage_evaluate(model_dir: &Path, dir: &Path) -> Result<(f64, f64), BenchError> {
    let model = Forecaster::load(model_dir)?;
    let test = read_panel_csv(&dir.join(TEST_FILE))?;
    let spec = model.spec();
    let ws = make_windows(&test, spec.context_len, spec.horizon_len, 1)?;
    let forecast = model.predict_windows(&ws, 256)?;
    let mut truth = Array3::zeros(forecast.predictions.raw_dim());
    for i in 0..ws.len() {
        truth.index_axis_mut(Axis(0), i).assign(&ws.target(i));
    }
    mae_rmse(forecast.predictions.view(), truth.view())
}
