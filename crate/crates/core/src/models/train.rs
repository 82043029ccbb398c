use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch, ModelError, Network, Result};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::timeseries::WindowSet;

const SHUFFLE_SALT: u64 = 0x5EED_5A17_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 100, patience: 10, batch_size: 64, learning_rate: 1e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    /// Epoch (0-based) whose weights were kept.
    pub best_epoch: Option<usize>,
    /// Validation MAE in °C per epoch.
    pub val_mae: Vec<f64>,
    /// Mean training loss (normalised L1) per epoch.
    pub train_loss: Vec<f64>,
}

impl FitReport {
    pub(crate) fn closed_form() -> Self {
        Self::default()
    }

    pub fn best_val_mae(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.val_mae[e])
    }
}

pub(crate) struct Context<'a> {
    pub network: &'a Network,
    pub adj: Option<&'a Tensor>,
    /// Per-node scale for reporting validation error in °C.
    pub std: &'a [f64],
    pub seed: u64,
}

/// L1 loss of one batch; its value and gradients.
fn step(ctx: &Context<'_>, params: &ParamStore, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let horizon = y.shape()[2];
    let pred = ctx.network.forward(&mut g, params, ctx.adj, x, horizon)?;
    let target = g.constant(y.clone());
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let loss = g.mean_all(abs);
    let value = g.value(loss).item().expect("scalar loss");
    let grads = g.backward(loss)?;
    Ok((value, grads.for_params(params)))
}

/// Validation MAE in °C for a normalised window set.
pub(crate) fn eval_mae(ctx: &Context<'_>, params: &ParamStore, ws: &WindowSet, chunk: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..ws.len()).collect();
    let (n, h) = (ws.n_nodes(), ws.horizon_len);
    let mut total = 0.0;
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = batch(ws, part);
        let mut g = Graph::new();
        let pred = ctx.network.forward(&mut g, params, ctx.adj, &x, h)?;
        for (k, (p, t)) in g.value(pred).data().iter().zip(y.data()).enumerate() {
            total += (p - t).abs() * ctx.std[(k / h) % n];
        }
    }
    Ok(total / (ws.len() * n * h) as f64)
}

/// Mini-batch Adam on L1 loss with early stopping on validation MAE. The
/// returned parameters are those of the best validation epoch.
pub(crate) fn fit_network(
    ctx: &Context<'_>,
    params: &mut ParamStore,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(ModelError::EmptyWindows);
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = FitReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, part) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let (x, y) = batch(train, part);
            let (loss, grads) = step(ctx, params, &x, &y)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { loss, epoch, batch: bi });
            }
            adam.step(params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        report.epochs_run = epoch + 1;
        report.train_loss.push(loss_sum / batches as f64);
        if val.is_empty() {
            continue;
        }
        let mae = eval_mae(ctx, params, val, cfg.batch_size)?;
        report.val_mae.push(mae);
        if best.as_ref().is_none_or(|(b, _)| mae < *b) {
            best = Some((mae, params.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, weights)) = best {
        params.copy_from(&weights);
    }
    log::debug!("trained {} epochs, best {:?}", report.epochs_run, report.best_val_mae());
    Ok(report)
}
