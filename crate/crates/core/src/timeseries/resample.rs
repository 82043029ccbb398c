use ndarray::Array2;

use super::{check_rate, AlignedPanel, Result, SensorSeries, TimeSeriesError};

/// Lower median of the positive gaps between consecutive samples.
fn native_step(samples: &[(i64, f64)]) -> Option<i64> {
    let mut gaps: Vec<i64> = samples.windows(2).map(|w| w[1].0 - w[0].0).filter(|g| *g > 0).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[(gaps.len() - 1) / 2])
}

/// Bucket-mean resampling onto a regular `f_s`-minute grid.
///
/// Column `b` covers `[origin + b*f_s, origin + (b+1)*f_s)` and holds the
/// mean of the raw samples inside it. The grid ends where the shortest
/// sensor ends (its last sample plus its native step), so a 9-day 5-minute
/// record yields exactly 2,592 columns at `f_s = 5`. Empty buckets are
/// linearly interpolated between the nearest observed buckets (held
/// constant past either end) and flagged `false` in the mask.
///
/// `origin` defaults to the latest first-sample time across sensors.
pub fn resample(series: &[SensorSeries], f_s: u32, origin: Option<i64>) -> Result<AlignedPanel> {
    check_rate(f_s)?;
    if series.is_empty() || series.iter().any(SensorSeries::is_empty) {
        return Err(TimeSeriesError::NoOverlap);
    }
    let width = i64::from(f_s) * 60;
    let origin = origin.unwrap_or_else(|| series.iter().map(|s| s.samples[0].0).max().unwrap());
    let end = series
        .iter()
        .map(|s| s.samples.last().unwrap().0 + native_step(&s.samples).unwrap_or(width))
        .min()
        .unwrap();
    if end <= origin {
        return Err(TimeSeriesError::NoOverlap);
    }
    let steps = ((end - origin) / width) as usize;
    if steps == 0 {
        return Err(TimeSeriesError::NoOverlap);
    }

    let n = series.len();
    let mut values = Array2::<f64>::zeros((n, steps));
    let mut mask = Array2::<bool>::from_elem((n, steps), false);
    let mut sums = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    for (i, s) in series.iter().enumerate() {
        sums.fill(0.0);
        counts.fill(0);
        for &(ts, v) in &s.samples {
            if ts < origin {
                continue;
            }
            let b = ((ts - origin) / width) as usize;
            if b >= steps {
                break;
            }
            sums[b] += v;
            counts[b] += 1;
        }
        let observed: Vec<usize> = (0..steps).filter(|&b| counts[b] > 0).collect();
        if observed.is_empty() {
            return Err(TimeSeriesError::EmptySensor(s.sensor_id.clone()));
        }
        for &b in &observed {
            values[[i, b]] = sums[b] / counts[b] as f64;
            mask[[i, b]] = true;
        }
        fill_gaps(&mut values.row_mut(i), &observed);
    }

    Ok(AlignedPanel {
        sensor_ids: series.iter().map(|s| s.sensor_id.clone()).collect(),
        interval_minutes: f_s,
        start: origin,
        values,
        mask,
    })
}

fn fill_gaps(row: &mut ndarray::ArrayViewMut1<f64>, observed: &[usize]) {
    let (first, last) = (observed[0], *observed.last().unwrap());
    let (vf, vl) = (row[first], row[last]);
    for b in 0..first {
        row[b] = vf;
    }
    for b in last + 1..row.len() {
        row[b] = vl;
    }
    for pair in observed.windows(2) {
        let (l, r) = (pair[0], pair[1]);
        let (vl, vr) = (row[l], row[r]);
        for b in l + 1..r {
            let frac = (b - l) as f64 / (r - l) as f64;
            row[b] = vl + (vr - vl) * frac;
        }
    }
}
