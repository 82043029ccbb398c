use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use super::{ModelError, Result};

/// Ridge damping on the lag coefficients (the intercept is not damped).
pub const VAR_RIDGE: f64 = 1e-6;
pub const MAX_VAR_LAG: usize = 8;

/// `x_t = c + A_1 x_{t-1} + ... + A_L x_{t-L}`, fitted on mean-centred data.
#[derive(Clone, Debug, PartialEq)]
pub struct VarModel {
    pub lag: usize,
    /// Per-node centring offsets.
    pub offset: Vec<f64>,
    pub intercept: Vec<f64>,
    /// `lags[l][(i, j)]`: effect of node `j` at lag `l + 1` on node `i`.
    pub lags: Vec<Array2<f64>>,
}

struct Design {
    z: DMatrix<f64>,
    y: DMatrix<f64>,
}

/// Regression rows for targets `t` in `first..T`, lags `1..=lag`.
fn design(x: &Array2<f64>, lag: usize, first: usize) -> Design {
    let (n, t) = x.dim();
    let rows = t - first;
    let z = DMatrix::from_fn(rows, 1 + n * lag, |r, c| {
        if c == 0 {
            1.0
        } else {
            let (l, j) = ((c - 1) / n, (c - 1) % n);
            x[[j, first + r - l - 1]]
        }
    });
    let y = DMatrix::from_fn(rows, n, |r, i| x[[i, first + r]]);
    Design { z, y }
}

fn solve(d: &Design) -> Result<DMatrix<f64>> {
    let mut gram = d.z.transpose() * &d.z;
    for c in 1..gram.ncols() {
        gram[(c, c)] += VAR_RIDGE;
    }
    let rhs = d.z.transpose() * &d.y;
    let beta = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).ok_or(ModelError::Singular)?,
    };
    if beta.iter().all(|v| v.is_finite()) {
        Ok(beta)
    } else {
        Err(ModelError::Singular)
    }
}

fn centre(values: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let t = values.ncols() as f64;
    let offset: Vec<f64> = values.rows().into_iter().map(|r| r.sum() / t).collect();
    let mut x = values.to_owned();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row -= offset[i];
    }
    (x, offset)
}

fn from_beta(beta: &DMatrix<f64>, n: usize, lag: usize, offset: Vec<f64>) -> VarModel {
    let intercept = (0..n).map(|i| beta[(0, i)]).collect();
    let lags = (0..lag)
        .map(|l| Array2::from_shape_fn((n, n), |(i, j)| beta[(1 + l * n + j, i)]))
        .collect();
    VarModel { lag, offset, intercept, lags }
}

fn check_len(n: usize, t: usize, lag: usize) -> Result<()> {
    if lag == 0 || t <= lag || t - lag <= n * lag + 1 {
        return Err(ModelError::TooShort { have: t, lag, need: n * lag + 1 + lag });
    }
    Ok(())
}

/// Least-squares VAR(`lag`) fit on an `N x T` training panel.
pub fn var_fit(values: ArrayView2<'_, f64>, lag: usize) -> Result<VarModel> {
    let (n, t) = values.dim();
    check_len(n, t, lag)?;
    let (x, offset) = centre(values);
    let beta = solve(&design(&x, lag, lag))?;
    Ok(from_beta(&beta, n, lag, offset))
}

/// Lag order in `1..=max_lag` with the lowest AIC, every candidate scored
/// on the same target rows. Returns the chosen lag and the AIC curve.
pub fn select_lag_aic(values: ArrayView2<'_, f64>, max_lag: usize) -> Result<(usize, Vec<(usize, f64)>)> {
    let (n, t) = values.dim();
    let (x, _) = centre(values);
    let feasible: Vec<usize> = (1..=max_lag.max(1)).filter(|&l| check_len(n, t, l).is_ok()).collect();
    let top = *feasible.last().ok_or(ModelError::TooShort { have: t, lag: 1, need: n + 2 })?;
    let mut curve = Vec::new();
    for lag in feasible {
        let mut d = design(&x, top, top);
        d.z = d.z.columns(0, 1 + n * lag).into_owned();
        let beta = solve(&d)?;
        let resid = &d.y - &d.z * beta;
        let t_eff = resid.nrows() as f64;
        let sigma = resid.transpose() * &resid / t_eff;
        let det = sigma.determinant();
        let log_det = if det > 0.0 { det.ln() } else { f64::NEG_INFINITY };
        curve.push((lag, log_det + 2.0 * (n * n * lag) as f64 / t_eff));
    }
    let best = curve
        .iter()
        .fold(None::<(usize, f64)>, |acc, &(l, a)| match acc {
            Some((_, b)) if b <= a => acc,
            _ => Some((l, a)),
        })
        .map(|(l, _)| l)
        .unwrap_or(1);
    Ok((best, curve))
}

impl VarModel {
    pub fn n_nodes(&self) -> usize {
        self.intercept.len()
    }

    /// Iterated one-step forecasts from the last `lag` columns of `context`.
    pub fn predict(&self, context: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
        let (n, c) = context.dim();
        if n != self.n_nodes() || c < self.lag {
            return Err(ModelError::Shape { got: vec![n, c], want: vec![self.n_nodes(), self.lag] });
        }
        // history[k] is the centred state k steps back.
        let mut history: Vec<Vec<f64>> = (0..self.lag)
            .map(|k| (0..n).map(|i| context[[i, c - 1 - k]] - self.offset[i]).collect())
            .collect();
        let mut out = Array2::zeros((n, horizon));
        for h in 0..horizon {
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    let mut v = self.intercept[i];
                    for (l, a) in self.lags.iter().enumerate() {
                        for j in 0..n {
                            v += a[[i, j]] * history[l][j];
                        }
                    }
                    v
                })
                .collect();
            for i in 0..n {
                out[[i, h]] = next[i] + self.offset[i];
            }
            history.insert(0, next);
            history.truncate(self.lag);
        }
        Ok(out)
    }

    /// Coefficients packed as `[1 + N*L, N]` (intercept row first) plus the
    /// centring offsets as a final row.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.n_nodes();
        let mut m = Array2::zeros((2 + n * self.lag, n));
        for i in 0..n {
            m[[0, i]] = self.intercept[i];
            m[[1 + n * self.lag, i]] = self.offset[i];
            for (l, a) in self.lags.iter().enumerate() {
                for j in 0..n {
                    m[[1 + l * n + j, i]] = a[[i, j]];
                }
            }
        }
        m
    }

    pub fn from_matrix(m: &Array2<f64>) -> Result<Self> {
        let (rows, n) = m.dim();
        if n == 0 || rows < 2 + n || (rows - 2) % n != 0 {
            return Err(ModelError::Shape { got: vec![rows, n], want: vec![2 + n, n] });
        }
        let lag = (rows - 2) / n;
        let beta = DMatrix::from_fn(rows - 1, n, |r, c| m[[r, c]]);
        let offset = (0..n).map(|i| m[[rows - 1, i]]).collect();
        Ok(from_beta(&beta, n, lag, offset))
    }
}
