//! Similarity-weighted blending of per-node forecasts, and the bridge to
//! external univariate forecasters.

mod adapter;

pub use adapter::{per_node_forecast, AdapterError, ExternalForecaster, ForecastRequest, ForecastResponse, PROTOCOL_VERSION};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CorrelationMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum BlendError {
    #[error("neighbour count {k} outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("target weight {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("forecasts cover {forecasts} nodes, similarity matrix {corr}")]
    NodeMismatch { forecasts: usize, corr: usize },
    #[error("non-finite forecast at node {node}, step {step}")]
    NonFinite { node: usize, step: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendConfig {
    pub k: usize,
    pub alpha: f64,
    /// Reject `k` outside `1..=N-1` instead of clamping it.
    pub strict: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { k: 3, alpha: 0.6, strict: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blended {
    pub values: Array2<f64>,
    /// Nodes whose neighbours all had zero similarity; left unblended.
    pub passthrough: Vec<usize>,
}

/// Up to `k` other nodes with the highest similarity to `i`; ties go to the
/// lower index.
pub fn top_neighbours(corr: &CorrelationMatrix, i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..corr.n()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| corr.get(i, b).total_cmp(&corr.get(i, a)).then(a.cmp(&b)));
    others.truncate(k);
    others
}

/// `out_i = α f_i + (1 - α) Σ_j w_ij f_j` over the top-`k` neighbours of
/// each node, with `w_ij` proportional to similarity.
pub fn blend(forecasts: ArrayView2<'_, f64>, corr: &CorrelationMatrix, cfg: &BlendConfig) -> Result<Blended, BlendError> {
    let (n, h) = forecasts.dim();
    if corr.n() != n {
        return Err(BlendError::NodeMismatch { forecasts: n, corr: corr.n() });
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(BlendError::InvalidAlpha(cfg.alpha));
    }
    let max_k = n.saturating_sub(1);
    if cfg.strict && (cfg.k == 0 || cfg.k > max_k) {
        return Err(BlendError::InvalidK { k: cfg.k, max: max_k });
    }
    if let Some(((node, step), _)) = forecasts.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(BlendError::NonFinite { node, step });
    }
    let k = cfg.k.min(max_k);
    let mut values = forecasts.to_owned();
    let mut passthrough = Vec::new();
    if k == 0 || cfg.alpha == 1.0 {
        return Ok(Blended { values, passthrough });
    }
    for i in 0..n {
        let nbrs = top_neighbours(corr, i, k);
        let total: f64 = nbrs.iter().map(|&j| corr.get(i, j)).sum();
        if total <= 0.0 {
            passthrough.push(i);
            continue;
        }
        for t in 0..h {
            let mix: f64 = nbrs.iter().map(|&j| corr.get(i, j) / total * forecasts[[j, t]]).sum();
            values[[i, t]] = cfg.alpha * forecasts[[i, t]] + (1.0 - cfg.alpha) * mix;
        }
    }
    Ok(Blended { values, passthrough })
}
