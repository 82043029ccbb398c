use ndarray::{s, Array2, ArrayView2};

use super::{check_rate, AlignedPanel, Result, TimeSeriesError};

const CONTEXT_MINUTES: u32 = 480;
const HORIZON_MINUTES: u32 = 240;

/// Context and horizon lengths in samples for an 8-hour context and a
/// 4-hour horizon. Rates that do not divide those durations (45 min) are
/// floored so a window never covers more than the nominal duration.
pub fn window_lengths(f_s: u32) -> Result<(usize, usize)> {
    check_rate(f_s)?;
    Ok(((CONTEXT_MINUTES / f_s) as usize, (HORIZON_MINUTES / f_s) as usize))
}

/// Sliding `(context, target)` pairs over one panel split.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub context_len: usize,
    pub horizon_len: usize,
    pub stride: usize,
    values: Array2<f64>,
    starts: Vec<usize>,
    start_time: i64,
    interval_seconds: i64,
    /// Set when the split is shorter than one window.
    pub too_short: bool,
}

/// Windows start at `0, stride, 2*stride, ...` while `start + C + H <= T`.
pub fn make_windows(panel: &AlignedPanel, context: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
    if context == 0 || horizon == 0 || stride == 0 {
        return Err(TimeSeriesError::InvalidWindow { context, horizon, stride });
    }
    let t = panel.n_steps();
    let span = context + horizon;
    let starts: Vec<usize> = if t >= span { (0..=t - span).step_by(stride).collect() } else { Vec::new() };
    Ok(WindowSet {
        context_len: context,
        horizon_len: horizon,
        stride,
        values: panel.values.clone(),
        too_short: t < span,
        starts,
        start_time: panel.start,
        interval_seconds: panel.interval_seconds(),
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.nrows()
    }

    /// `N x C` context of window `i`.
    pub fn context(&self, i: usize) -> ArrayView2<'_, f64> {
        let s0 = self.starts[i];
        self.values.slice(s![.., s0..s0 + self.context_len])
    }

    /// `N x H` target of window `i`.
    pub fn target(&self, i: usize) -> ArrayView2<'_, f64> {
        let s0 = self.starts[i] + self.context_len;
        self.values.slice(s![.., s0..s0 + self.horizon_len])
    }

    /// Timestamp of the first forecast step of window `i`.
    pub fn forecast_time(&self, i: usize) -> i64 {
        self.start_time + (self.starts[i] + self.context_len) as i64 * self.interval_seconds
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }
}
