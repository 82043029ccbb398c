use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{AlignedPanel, Result, TimeSeriesError, TrainSplit};

/// Per-node z-score statistics. Fitting only accepts the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1.0 for constant nodes.
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &TrainSplit) -> Self {
        let values = &train.values;
        let t = values.ncols().max(1) as f64;
        let mut mean = Vec::with_capacity(values.nrows());
        let mut std = Vec::with_capacity(values.nrows());
        for row in values.axis_iter(Axis(0)) {
            let mu = row.sum() / t;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t;
            let sd = var.sqrt();
            mean.push(mu);
            std.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn n_nodes(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, rows: usize) -> Result<()> {
        if rows != self.n_nodes() {
            return Err(TimeSeriesError::NodeMismatch { stats: self.n_nodes(), panel: rows });
        }
        Ok(())
    }

    /// Z-scores an `N x T` matrix (nodes on rows).
    pub fn normalize(&self, values: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(values.nrows())?;
        let mut out = values.to_owned();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| (v - self.mean[i]) / self.std[i]);
        }
        Ok(out)
    }

    pub fn denormalize(&self, values: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(values.nrows())?;
        let mut out = values.to_owned();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * self.std[i] + self.mean[i]);
        }
        Ok(out)
    }

    pub fn apply(&self, panel: &AlignedPanel) -> Result<AlignedPanel> {
        let values = self.normalize(panel.values.view())?;
        Ok(AlignedPanel { values, ..panel.clone() })
    }
}
