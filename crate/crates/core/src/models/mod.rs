//! Forecasters behind one fit/predict contract: VAR, a stacked GRU, a
//! Transformer encoder and the two graph models (GRU then GCN, GCN then GRU).

pub mod layers;
pub mod nets;
mod train;
pub mod var;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NormalizedAdjacency;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Tensor, TensorError};
use crate::timeseries::{make_windows, NormStats, TimeSeriesError, TrainSplit, ValSplit, WindowSet};

pub use nets::Network;
pub use train::{FitReport, TrainConfig};
pub use var::{select_lag_aic, var_fit, VarModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
    #[error("{0} needs a graph")]
    MissingGraph(ModelKind),
    #[error("{0} does not take a graph")]
    UnexpectedGraph(ModelKind),
    #[error("graph covers {graph} nodes but the model has {model}")]
    GraphMismatch { graph: usize, model: usize },
    #[error("input shape {got:?} does not match expected {want:?}")]
    Shape { got: Vec<usize>, want: Vec<usize> },
    #[error("no training windows")]
    EmptyWindows,
    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },
    #[error("least-squares design is singular even with ridge damping")]
    Singular,
    #[error("training series of {have} steps is too short for lag {lag} (needs at least {need})")]
    TooShort { have: usize, lag: usize, need: usize },
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model spec: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "VAR")]
    Var,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "TRANSFORMER")]
    Transformer,
    #[serde(rename = "GRUGCN")]
    GruGcn,
    #[serde(rename = "TGCN")]
    Tgcn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::Var, Self::Gru, Self::Transformer, Self::GruGcn, Self::Tgcn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Var => "VAR",
            Self::Gru => "GRU",
            Self::Transformer => "TRANSFORMER",
            Self::GruGcn => "GRUGCN",
            Self::Tgcn => "TGCN",
        }
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, Self::GruGcn | Self::Tgcn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ModelError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterSpec {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Stacked recurrent or encoder layers (GRU and Transformer only).
    pub layers: usize,
    pub context_len: usize,
    pub horizon_len: usize,
    pub n_nodes: usize,
    pub graph: Option<NormalizedAdjacency>,
    pub seed: u64,
}

impl ForecasterSpec {
    pub fn new(kind: ModelKind, n_nodes: usize, context_len: usize, horizon_len: usize, seed: u64) -> Self {
        Self { kind, hidden: 64, layers: 2, context_len, horizon_len, n_nodes, graph: None, seed }
    }

    pub fn with_graph(mut self, graph: NormalizedAdjacency) -> Self {
        self.graph = Some(graph);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.context_len == 0 || self.horizon_len == 0 || self.hidden == 0 {
            return Err(ModelError::Config(format!(
                "N={}, C={}, H={}, hidden={} must all be positive",
                self.n_nodes, self.context_len, self.horizon_len, self.hidden
            )));
        }
        match (&self.graph, self.kind.uses_graph()) {
            (None, true) => Err(ModelError::MissingGraph(self.kind)),
            (Some(_), false) => Err(ModelError::UnexpectedGraph(self.kind)),
            (Some(g), true) if g.n() != self.n_nodes => {
                Err(ModelError::GraphMismatch { graph: g.n(), model: self.n_nodes })
            }
            _ => Ok(()),
        }
    }
}

/// Denormalised forecasts `[B, N, H]` with the time of each first step.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBatch {
    pub predictions: Array3<f64>,
    pub forecast_times: Vec<i64>,
}

#[derive(Clone, Debug)]
enum Body {
    Var(VarModel),
    Net { network: Network, params: ParamStore },
}

/// A model plus the training-split statistics it normalises with.
#[derive(Clone, Debug)]
pub struct Forecaster {
    spec: ForecasterSpec,
    norm: NormStats,
    body: Body,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: ForecasterSpec,
    norm: NormStats,
}

const SPEC_FILE: &str = "forecaster.json";
const PARAMS_FILE: &str = "params.bin";
const VAR_PARAM: &str = "var.coef";

/// Stacks windows `idx` of `ws` into `[B, N, C]` contexts and `[B, N, H]` targets.
pub(crate) fn batch(ws: &WindowSet, idx: &[usize]) -> (Tensor, Tensor) {
    let (n, c, h) = (ws.n_nodes(), ws.context_len, ws.horizon_len);
    let mut ctx = Vec::with_capacity(idx.len() * n * c);
    let mut tgt = Vec::with_capacity(idx.len() * n * h);
    for &i in idx {
        ctx.extend(ws.context(i).iter());
        tgt.extend(ws.target(i).iter());
    }
    (
        Tensor::new([idx.len(), n, c], ctx).expect("context batch"),
        Tensor::new([idx.len(), n, h], tgt).expect("target batch"),
    )
}

impl Forecaster {
    /// Untrained model with freshly seeded weights.
    pub fn init(spec: ForecasterSpec, norm: NormStats) -> Result<Self> {
        spec.validate()?;
        if norm.n_nodes() != spec.n_nodes {
            return Err(ModelError::Shape { got: vec![norm.n_nodes()], want: vec![spec.n_nodes] });
        }
        let body = if spec.kind == ModelKind::Var {
            let n = spec.n_nodes;
            Body::Var(VarModel {
                lag: 1,
                offset: vec![0.0; n],
                intercept: vec![0.0; n],
                lags: vec![Array2::zeros((n, n))],
            })
        } else {
            let mut params = ParamStore::new();
            let network = Network::build(&spec, &mut params)?;
            Body::Net { network, params }
        };
        Ok(Self { spec, norm, body })
    }

    /// Fits on the training split, early-stopping against the validation split.
    pub fn fit(spec: ForecasterSpec, train: &TrainSplit, val: &ValSplit, cfg: &TrainConfig) -> Result<(Self, FitReport)> {
        let norm = NormStats::fit(train);
        let mut model = Self::init(spec, norm)?;
        let train_n = model.norm.apply(train)?;
        let val_n = model.norm.apply(val)?;
        let (c, h) = (model.spec.context_len, model.spec.horizon_len);
        let report = match &mut model.body {
            Body::Var(var) => {
                let max_lag = var::MAX_VAR_LAG.min(c.saturating_sub(1)).max(1);
                let (lag, _) = select_lag_aic(train_n.values.view(), max_lag)?;
                *var = var_fit(train_n.values.view(), lag)?;
                FitReport::closed_form()
            }
            Body::Net { network, params } => {
                let tw = make_windows(&train_n, c, h, 1)?;
                let vw = make_windows(&val_n, c, h, 1)?;
                let adj = model.spec.graph.as_ref().map(NormalizedAdjacency::to_tensor);
                let ctx = train::Context { network, adj: adj.as_ref(), std: &model.norm.std, seed: model.spec.seed };
                train::fit_network(&ctx, params, &tw, &vw, cfg)?
            }
        };
        Ok((model, report))
    }

    pub fn spec(&self) -> &ForecasterSpec {
        &self.spec
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn params(&self) -> Option<&ParamStore> {
        match &self.body {
            Body::Net { params, .. } => Some(params),
            Body::Var(_) => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.body {
            Body::Net { params, .. } => Some(params),
            Body::Var(_) => None,
        }
    }

    pub fn network(&self) -> Option<&Network> {
        match &self.body {
            Body::Net { network, .. } => Some(network),
            Body::Var(_) => None,
        }
    }

    pub fn var_model(&self) -> Option<&VarModel> {
        match &self.body {
            Body::Var(v) => Some(v),
            Body::Net { .. } => None,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [shape.first().copied().unwrap_or(0), self.spec.n_nodes, self.spec.context_len];
        if shape.len() != 3 || shape[1..] != want[1..] {
            return Err(ModelError::Shape { got: shape.to_vec(), want: want.to_vec() });
        }
        Ok(())
    }

    /// Normalised `[B, N, C]` in, normalised `[B, N, H]` out.
    pub fn predict_normalized(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let (b, n, h) = (x.shape()[0], self.spec.n_nodes, self.spec.horizon_len);
        match &self.body {
            Body::Var(var) => {
                let c = self.spec.context_len;
                let mut out = Vec::with_capacity(b * n * h);
                for bi in 0..b {
                    let ctx = ArrayView2::from_shape((n, c), &x.data()[bi * n * c..(bi + 1) * n * c])
                        .expect("context block");
                    out.extend(var.predict(ctx, h)?.iter());
                }
                Ok(Tensor::new([b, n, h], out)?)
            }
            Body::Net { network, params } => {
                let adj = self.spec.graph.as_ref().map(NormalizedAdjacency::to_tensor);
                let mut g = Graph::new();
                let y = network.forward(&mut g, params, adj.as_ref(), x, h)?;
                Ok(g.value(y).clone())
            }
        }
    }

    /// Contexts in °C, `[B, N, C]`, to forecasts in °C, `[B, N, H]`.
    pub fn predict(&self, contexts: &Array3<f64>) -> Result<Array3<f64>> {
        let (b, n, c) = contexts.dim();
        self.check_input(&[b, n, c])?;
        let mut z = contexts.clone();
        for mut block in z.axis_iter_mut(Axis(0)) {
            let z = self.norm.normalize(block.view())?;
            block.assign(&z);
        }
        let x = Tensor::new([b, n, c], z.iter().copied().collect())?;
        let y = self.predict_normalized(&x)?;
        let h = self.spec.horizon_len;
        let mut out = Array3::from_shape_vec((b, n, h), y.into_data()).expect("forecast block");
        for mut block in out.axis_iter_mut(Axis(0)) {
            let y = self.norm.denormalize(block.view())?;
            block.assign(&y);
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Config("non-finite forecast".into()));
        }
        Ok(out)
    }

    /// Forecasts every window of a raw (°C) window set, in batches of `chunk`.
    pub fn predict_windows(&self, ws: &WindowSet, chunk: usize) -> Result<ForecastBatch> {
        let (n, h) = (self.spec.n_nodes, self.spec.horizon_len);
        if ws.n_nodes() != n || ws.context_len != self.spec.context_len || ws.horizon_len != h {
            return Err(ModelError::Shape {
                got: vec![ws.n_nodes(), ws.context_len, ws.horizon_len],
                want: vec![n, self.spec.context_len, h],
            });
        }
        let mut predictions = Array3::zeros((ws.len(), n, h));
        let idx: Vec<usize> = (0..ws.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let (ctx, _) = batch(ws, part);
            let ctx = Array3::from_shape_vec((part.len(), n, ws.context_len), ctx.into_data()).expect("batch");
            let y = self.predict(&ctx)?;
            for (k, &i) in part.iter().enumerate() {
                predictions.index_axis_mut(Axis(0), i).assign(&y.index_axis(Axis(0), k));
            }
        }
        let forecast_times = (0..ws.len()).map(|i| ws.forecast_time(i)).collect();
        Ok(ForecastBatch { predictions, forecast_times })
    }

    /// Writes `forecaster.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let spec_path = dir.join(SPEC_FILE);
        let sidecar = Sidecar { spec: self.spec.clone(), norm: self.norm.clone() };
        let f = File::create(&spec_path).map_err(io_err(&spec_path))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &sidecar)?;

        let store = match &self.body {
            Body::Net { params, .. } => params.clone(),
            Body::Var(var) => {
                let m = var.to_matrix();
                let mut s = ParamStore::new();
                s.add(VAR_PARAM, Tensor::new([m.nrows(), m.ncols()], m.iter().copied().collect())?);
                s
            }
        };
        let params_path = dir.join(PARAMS_FILE);
        let f = File::create(&params_path).map_err(io_err(&params_path))?;
        write_checkpoint(&store, BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_path = dir.join(SPEC_FILE);
        let f = File::open(&spec_path).map_err(io_err(&spec_path))?;
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(f))?;
        let params_path = dir.join(PARAMS_FILE);
        let f = File::open(&params_path).map_err(io_err(&params_path))?;
        let stored = read_checkpoint(BufReader::new(f))?;

        let mut model = Self::init(sidecar.spec, sidecar.norm)?;
        match &mut model.body {
            Body::Var(var) => {
                let id = stored.find(VAR_PARAM).ok_or_else(|| ModelError::Config("missing VAR coefficients".into()))?;
                let t = stored.get(id);
                let m = Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec())
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                *var = VarModel::from_matrix(&m)?;
            }
            Body::Net { params, .. } => {
                let same = params.len() == stored.len()
                    && params.iter().zip(stored.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
                if !same {
                    return Err(ModelError::Config("checkpoint layout does not match the spec".into()));
                }
                params.copy_from(&stored);
            }
        }
        Ok(model)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

#[cfg(test)]
mod tests;
