use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{GridSpec, ModelChoice};
use super::metrics::mae_rmse;
use super::report::emit_reports;
use super::synth::{gen_synthetic, SyntheticSpec};
use super::{io_err, BenchError};
use crate::ensemble::{blend, per_node_forecast, ExternalForecaster};
use crate::graph::{build_graph, normalize_adjacency, pearson_abs, CorrelationMatrix, NormalizedAdjacency, WeightedGraph};
use crate::models::{Forecaster, ForecasterSpec, ModelKind};
use crate::spatial::{agglomerative_cluster, select_subset, LatLon, SubsetPlan};
use crate::timeseries::{
    apply_metadata, ingest_csv, make_windows, read_metadata, resample, split_by_days, window_lengths, AlignedPanel, CsvSchema,
    SensorSeries, Splits, WindowSet,
};

const PREDICT_CHUNK: usize = 256;

/// Where sensor readings come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Csv { readings: PathBuf, metadata: Option<PathBuf>, schema: CsvSchema },
    Synthetic(SyntheticSpec),
    Series(Vec<SensorSeries>),
}

impl DataSource {
    pub fn resolve(&self) -> Result<Vec<SensorSeries>, BenchError> {
        match self {
            DataSource::Csv { readings, metadata, schema } => {
                let (mut series, report) = ingest_csv(readings, schema)?;
                log::info!("ingested {} rows ({} dropped) for {} sensors", report.rows_read, report.rows_dropped, report.sensors);
                if let Some(meta) = metadata {
                    let missing = apply_metadata(&mut series, &read_metadata(meta)?);
                    if !missing.is_empty() {
                        log::warn!("no coordinates for {}", missing.join(", "));
                    }
                }
                Ok(series)
            }
            DataSource::Synthetic(spec) => gen_synthetic(spec),
            DataSource::Series(series) => Ok(series.clone()),
        }
    }
}

/// One coordinate of the experiment grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub rate: u32,
    pub k: usize,
    pub model: ModelChoice,
    /// Redundancy level; only set for graph models.
    pub p: Option<u32>,
    pub seed: u64,
}

impl Cell {
    /// Every cell of the grid, sorted by coordinate.
    pub fn enumerate(grid: &GridSpec) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &rate in &grid.rates {
            for &k in &grid.node_counts {
                for model in grid.choices() {
                    let ps: Vec<Option<u32>> = match model {
                        ModelChoice::Builtin(kind) if kind.uses_graph() => grid.redundancies.iter().map(|&p| Some(p)).collect(),
                        _ => vec![None],
                    };
                    for p in ps {
                        for &seed in &grid.seeds {
                            cells.push(Cell { rate, k, model: model.clone(), p, seed });
                        }
                    }
                }
            }
        }
        cells.sort();
        cells.dedup();
        cells
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Model seed for a cell: a hash of the global seed and the cell coordinates.
pub fn cell_seed(global_seed: u64, cell: &Cell, label: &str) -> u64 {
    let p = cell.p.map_or_else(|| "na".to_string(), |p| p.to_string());
    let key = format!("{}|{}|{}|{}|{}", cell.rate, cell.k, label, p, cell.seed);
    splitmix64(fnv1a(key.as_bytes()) ^ splitmix64(global_seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub f_s: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub p: Option<u32>,
    pub seed: u64,
    pub status: CellStatus,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// Training plus inference time.
    pub wall_seconds: f64,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub epochs: usize,
    pub error: Option<String>,
}

impl EvalRecord {
    fn new(label: &str, cell: &Cell) -> Self {
        Self {
            model: label.to_string(),
            f_s: cell.rate,
            k: cell.k,
            p: cell.p,
            seed: cell.seed,
            status: CellStatus::Failed,
            mae: None,
            rmse: None,
            wall_seconds: 0.0,
            train_windows: 0,
            val_windows: 0,
            test_windows: 0,
            epochs: 0,
            error: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

/// Weighted adjacency used by graph cells at one `(f_s, K, p)`.
#[derive(Clone, Debug)]
pub struct GraphArtifact {
    pub rate: u32,
    pub k: usize,
    pub p: u32,
    pub sensor_ids: Vec<String>,
    pub graph: WeightedGraph,
}

#[derive(Clone, Debug)]
pub struct GridOutput {
    /// Sorted by cell coordinate.
    pub records: Vec<EvalRecord>,
    pub graphs: Vec<GraphArtifact>,
    pub subsets: Vec<SubsetPlan>,
}

impl GridOutput {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

/// Data shared by every cell at one `(f_s, K)`.
struct Prepared {
    splits: Splits,
    corr: CorrelationMatrix,
    graphs: BTreeMap<u32, (WeightedGraph, NormalizedAdjacency)>,
    context: usize,
    horizon: usize,
}

fn prepare(panel: &AlignedPanel, plan: &SubsetPlan, grid: &GridSpec, rate: u32) -> Result<Prepared, BenchError> {
    let panel = panel.select_nodes(&plan.indices);
    let splits = split_by_days(&panel, grid.split)?;
    let corr = pearson_abs(splits.train.values.view())?;
    let mut graphs = BTreeMap::new();
    if grid.models.iter().any(|m| m.uses_graph()) {
        for &p in &grid.redundancies {
            let g = build_graph(&corr, f64::from(p))?;
            let a = normalize_adjacency(&g);
            graphs.insert(p, (g, a));
        }
    }
    let (context, horizon) = window_lengths(rate)?;
    Ok(Prepared { splits, corr, graphs, context, horizon })
}

fn stack_targets(ws: &WindowSet) -> Array3<f64> {
    let mut out = Array3::zeros((ws.len(), ws.n_nodes(), ws.horizon_len));
    for i in 0..ws.len() {
        out.index_axis_mut(Axis(0), i).assign(&ws.target(i));
    }
    out
}

fn run_builtin(kind: ModelKind, cell: &Cell, seed: u64, prep: &Prepared, grid: &GridSpec, rec: &mut EvalRecord) -> Result<(f64, f64), BenchError> {
    let mut spec = ForecasterSpec::new(kind, cell.k, prep.context, prep.horizon, seed);
    spec.hidden = grid.hidden;
    if kind.uses_graph() {
        let p = cell.p.expect("graph cell has a redundancy");
        spec = spec.with_graph(prep.graphs[&p].1.clone());
    }
    let test = make_windows(&prep.splits.test, prep.context, prep.horizon, 1)?;
    rec.test_windows = test.len();
    let (model, report) = Forecaster::fit(spec, &prep.splits.train, &prep.splits.val, &grid.training)?;
    rec.epochs = report.epochs_run;
    let forecast = model.predict_windows(&test, PREDICT_CHUNK)?;
    mae_rmse(forecast.predictions.view(), stack_targets(&test).view())
}

fn run_external(index: usize, cell: &Cell, prep: &Prepared, grid: &GridSpec, rec: &mut EvalRecord) -> Result<(f64, f64), BenchError> {
    let ext = &grid.external[index];
    let test = make_windows(&prep.splits.test, prep.context, prep.horizon, 1)?;
    rec.test_windows = test.len();
    let mut handle = ExternalForecaster::spawn(&ext.command, Duration::from_secs_f64(ext.timeout_secs))?;
    let ids = &prep.splits.test.sensor_ids;
    let mut pred = Array3::zeros((test.len(), cell.k, prep.horizon));
    for i in 0..test.len() {
        let mut f = per_node_forecast(&mut handle, ids, test.context(i), prep.horizon, cell.rate)?;
        if ext.blend {
            f = blend(f.view(), &prep.corr, &grid.blend)?.values;
        }
        pred.index_axis_mut(Axis(0), i).assign(&f);
    }
    mae_rmse(pred.view(), stack_targets(&test).view())
}

fn run_cell(cell: &Cell, prep: &Result<Prepared, String>, grid: &GridSpec) -> EvalRecord {
    let label = grid.label(&cell.model);
    let mut rec = EvalRecord::new(&label, cell);
    let prep = match prep {
        Ok(p) => p,
        Err(e) => {
            rec.error = Some(e.clone());
            return rec;
        }
    };
    let window_count = |panel: &AlignedPanel| make_windows(panel, prep.context, prep.horizon, 1).map(|w| w.len()).unwrap_or(0);
    rec.train_windows = window_count(&prep.splits.train);
    rec.val_windows = window_count(&prep.splits.val);
    let seed = cell_seed(grid.global_seed, cell, &label);
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(|| match cell.model {
        ModelChoice::Builtin(kind) => run_builtin(kind, cell, seed, prep, grid, &mut rec),
        ModelChoice::External(i) => run_external(i, cell, prep, grid, &mut rec),
    }));
    rec.wall_seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok(Ok((mae, rmse))) => {
            rec.status = CellStatus::Ok;
            rec.mae = Some(mae);
            rec.rmse = Some(rmse);
        }
        Ok(Err(e)) => rec.error = Some(e.to_string()),
        Err(panic) => {
            let msg = panic.downcast_ref::<String>().cloned().or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()));
            rec.error = Some(format!("panicked: {}", msg.unwrap_or_default()));
        }
    }
    if let Some(e) = &rec.error {
        log::warn!("cell {label} f_s={} K={} p={:?} seed={} failed: {e}", cell.rate, cell.k, cell.p, cell.seed);
    }
    rec
}

/// Worker count: the grid setting, then `STGRID_WORKERS`, then the number of
/// available cores.
pub fn resolve_workers(grid: &GridSpec) -> usize {
    grid.workers
        .or_else(|| std::env::var("STGRID_WORKERS").ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Journal(Mutex<File>);

impl Journal {
    fn create(path: &Path) -> Result<Self, BenchError> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(io_err(path))?;
        Ok(Self(Mutex::new(file)))
    }

    fn append(&self, rec: &EvalRecord) {
        let line = serde_json::to_string(rec).expect("record serialises");
        let mut file = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(file, "{line}").and_then(|_| file.flush()) {
            log::error!("journal write failed: {e}");
        }
    }
}

/// Runs every cell of `grid` and writes reports into `out`. Cell failures
/// are recorded, never fatal; only an unusable data source or output
/// directory aborts the run.
pub fn run_grid(grid: &GridSpec, source: &DataSource, out: &Path) -> Result<GridOutput, BenchError> {
    grid.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let series = source.resolve()?;
    if series.is_empty() {
        return Err(BenchError::Config("data source has no sensors".into()));
    }
    let coords: Vec<LatLon> = series.iter().map(|s| LatLon::new(s.latitude, s.longitude)).collect();
    let ids: Vec<String> = series.iter().map(|s| s.sensor_id.clone()).collect();
    let clusters = agglomerative_cluster(&coords, grid.clusters.min(series.len()))?;

    let mut subsets = Vec::new();
    let mut plans: BTreeMap<usize, Result<SubsetPlan, String>> = BTreeMap::new();
    for &k in &grid.node_counts {
        let plan = select_subset(&clusters, &coords, &ids, k, !grid.allow_any_k).map_err(|e| e.to_string());
        if let Ok(p) = &plan {
            subsets.push(p.clone());
        }
        plans.insert(k, plan);
    }

    let mut prepared: BTreeMap<(u32, usize), Result<Prepared, String>> = BTreeMap::new();
    let mut graphs = Vec::new();
    for &rate in &grid.rates {
        let panel = resample(&series, rate, None).map_err(|e| e.to_string());
        for &k in &grid.node_counts {
            let prep = match (&panel, &plans[&k]) {
                (Ok(panel), Ok(plan)) => prepare(panel, plan, grid, rate).map_err(|e| e.to_string()),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            };
            if let Ok(prep) = &prep {
                for (&p, (g, _)) in &prep.graphs {
                    graphs.push(GraphArtifact { rate, k, p, sensor_ids: prep.splits.train.sensor_ids.clone(), graph: g.clone() });
                }
            }
            prepared.insert((rate, k), prep);
        }
    }

    let cells = Cell::enumerate(grid);
    let journal = Journal::create(&out.join("results.jsonl"))?;
    let workers = resolve_workers(grid);
    log::info!("running {} cells on {workers} workers", cells.len());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| BenchError::Pool(e.to_string()))?;
    let records: Vec<EvalRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let rec = run_cell(cell, &prepared[&(cell.rate, cell.k)], grid);
                journal.append(&rec);
                rec
            })
            .collect()
    });

    let output = GridOutput { records, graphs, subsets };
    emit_reports(&output, out)?;
    Ok(output)
}
