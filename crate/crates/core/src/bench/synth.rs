use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{io_err, BenchError};
use crate::spatial::{great_circle_km, LatLon};
use crate::timeseries::{SensorSeries, SECONDS_PER_DAY};

const KM_PER_DEG_LAT: f64 = 111.32;
const PHASE_SALT: u64 = 0x0ff5_e7d1_a1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    /// Square lattice filling the extent.
    Grid,
    /// Sensors drawn around `clusters` random centres.
    Clustered,
    /// Independent uniform positions.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSpec {
    pub kind: LayoutKind,
    pub n: usize,
    pub extent_km: f64,
    pub clusters: usize,
    pub cluster_radius_km: f64,
    pub center_lat: f64,
    pub center_lon: f64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            kind: LayoutKind::Grid,
            n: 25,
            extent_km: 10.0,
            clusters: 5,
            cluster_radius_km: 0.8,
            center_lat: 32.35,
            center_lon: -106.45,
        }
    }
}

/// Parameters of the synthetic temperature network.
///
/// Each sensor reads `mean_i + A sin(2 pi t / 1 day + phi + phi_i) + field_sigma * s_i(t)
/// + noise`, where `s` is a unit-variance AR(1) field whose cross-sensor
/// covariance is `exp(-d_ij / length_scale_km)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Explicit sites; when empty, `layout` generates them.
    pub sensors: Vec<SiteSpec>,
    pub layout: LayoutSpec,
    pub days: u32,
    pub interval_minutes: u32,
    /// UTC epoch seconds of the first sample.
    pub start: i64,
    pub base_temp: f64,
    /// Standard deviation of the per-site mean offsets.
    pub site_spread: f64,
    pub amplitude: f64,
    /// Standard deviation of per-site diurnal phase offsets, in hours.
    /// Offsets are spatially correlated like the field.
    pub phase_spread_hours: f64,
    pub field_sigma: f64,
    pub ar_coeff: f64,
    pub length_scale_km: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sensors: Vec::new(),
            layout: LayoutSpec::default(),
            days: 9,
            interval_minutes: 5,
            start: 1_700_006_400,
            base_temp: 22.0,
            site_spread: 1.0,
            amplitude: 6.0,
            phase_spread_hours: 0.0,
            field_sigma: 1.5,
            ar_coeff: 0.95,
            length_scale_km: 5.0,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::InvalidSynthetic(msg));
        if self.length_scale_km.is_nan() || self.length_scale_km <= 0.0 {
            return bad(format!("length scale must be positive, got {}", self.length_scale_km));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.field_sigma >= 0.0 && self.amplitude >= 0.0 && self.site_spread >= 0.0 && self.phase_spread_hours >= 0.0) {
            return bad("amplitude, field, site and phase spreads must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return bad(format!("AR coefficient must lie in [0, 1), got {}", self.ar_coeff));
        }
        if self.days == 0 || self.interval_minutes == 0 || SECONDS_PER_DAY % (i64::from(self.interval_minutes) * 60) != 0 {
            return bad(format!("{} days at {} min is not a whole-day record", self.days, self.interval_minutes));
        }
        if self.sensors.is_empty() && self.layout.n == 0 {
            return bad("no sensors".into());
        }
        Ok(())
    }

    /// Site list, generating the layout if no explicit sites were given.
    pub fn sites(&self) -> Vec<SiteSpec> {
        if !self.sensors.is_empty() {
            return self.sensors.clone();
        }
        let l = &self.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1A70_0751);
        let offsets: Vec<(f64, f64)> = match l.kind {
            LayoutKind::Grid => {
                let side = (l.n as f64).sqrt().ceil() as usize;
                let step = if side > 1 { l.extent_km / (side - 1) as f64 } else { 0.0 };
                (0..l.n).map(|i| ((i % side) as f64 * step, (i / side) as f64 * step)).collect()
            }
            LayoutKind::Uniform => {
                (0..l.n).map(|_| (rng.random_range(0.0..=l.extent_km), rng.random_range(0.0..=l.extent_km))).collect()
            }
            LayoutKind::Clustered => {
                let k = l.clusters.max(1);
                let centres: Vec<(f64, f64)> = (0..k)
                    .map(|_| (rng.random_range(0.0..=l.extent_km), rng.random_range(0.0..=l.extent_km)))
                    .collect();
                (0..l.n)
                    .map(|i| {
                        let (cx, cy) = centres[i % k];
                        let r = l.cluster_radius_km * rng.random::<f64>().sqrt();
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect()
            }
        };
        let half = l.extent_km / 2.0;
        let km_per_deg_lon = KM_PER_DEG_LAT * l.center_lat.to_radians().cos();
        offsets
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| SiteSpec {
                id: format!("S{:02}", i + 1),
                lat: l.center_lat + (y - half) / KM_PER_DEG_LAT,
                lon: l.center_lon + (x - half) / km_per_deg_lon,
            })
            .collect()
    }
}

/// Lower-triangular-ish factor `F` with `F F^T = exp(-D / l)`.
fn covariance_factor(sites: &[SiteSpec], length_scale: f64) -> DMatrix<f64> {
    let n = sites.len();
    let pos: Vec<LatLon> = sites.iter().map(|s| LatLon::new(s.lat, s.lon)).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| (-great_circle_km(pos[i], pos[j]) / length_scale).exp());
    let eig = SymmetricEigen::new(cov);
    let scale = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    eig.eigenvectors * DMatrix::from_diagonal(&scale)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SensorSeries>, BenchError> {
    spec.validate()?;
    let sites = spec.sites();
    let n = sites.len();
    let step = i64::from(spec.interval_minutes) * 60;
    let steps = (i64::from(spec.days) * SECONDS_PER_DAY / step) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let means: Vec<f64> = (0..n).map(|_| spec.base_temp + spec.site_spread * rng.sample::<f64, _>(StandardNormal)).collect();
    let factor = covariance_factor(&sites, spec.length_scale_km);
    let innov = (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt();
    // Phase offsets share the field's spatial covariance, so nearby sites
    // peak at similar times.
    let mut phase_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ PHASE_SALT);
    let offsets = &factor * DVector::from_iterator(n, (0..n).map(|_| phase_rng.sample::<f64, _>(StandardNormal)));
    let phases: Vec<f64> = offsets.iter().map(|z| phase + std::f64::consts::TAU * spec.phase_spread_hours * z / 24.0).collect();

    let draw = |rng: &mut ChaCha8Rng| {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &factor * z
    };
    let mut field = draw(&mut rng);
    let mut samples: Vec<Vec<(i64, f64)>> = vec![Vec::with_capacity(steps); n];
    for t in 0..steps {
        if t > 0 {
            let shock = draw(&mut rng);
            field = field * spec.ar_coeff + shock * innov;
        }
        let ts = spec.start + t as i64 * step;
        let day_angle = std::f64::consts::TAU * (ts - spec.start) as f64 / SECONDS_PER_DAY as f64;
        for i in 0..n {
            let diurnal = spec.amplitude * (day_angle + phases[i]).sin();
            let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            samples[i].push((ts, means[i] + diurnal + spec.field_sigma * field[i] + noise));
        }
    }
    Ok(sites
        .into_iter()
        .zip(samples)
        .map(|(site, s)| SensorSeries { sensor_id: site.id, latitude: site.lat, longitude: site.lon, samples: s })
        .collect())
}

/// Long-format readings: `timestamp,sensor_id,value`, epoch seconds.
pub fn write_readings_csv(series: &[SensorSeries], path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "sensor_id", "value"])?;
    for s in series {
        for (t, v) in &s.samples {
            w.write_record([t.to_string(), s.sensor_id.clone(), v.to_string()])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Sensor coordinates: `sensor_id,lat,lon`.
pub fn write_metadata_csv(series: &[SensorSeries], path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sensor_id", "lat", "lon"])?;
    for s in series {
        w.write_record([s.sensor_id.clone(), s.latitude.to_string(), s.longitude.to_string()])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::graph::pearson_abs;

    fn field_only(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            layout: LayoutSpec { kind: LayoutKind::Uniform, n: 8, ..LayoutSpec::default() },
            days: 2,
            amplitude: 0.0,
            noise_sigma: 0.0,
            site_spread: 0.0,
            field_sigma: 1.0,
            ar_coeff: 0.5,
            length_scale_km: 3.0,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn matrix(series: &[SensorSeries]) -> Array2<f64> {
        Array2::from_shape_fn((series.len(), series[0].len()), |(i, t)| series[i].samples[t].1)
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn nine_days_of_five_minute_samples() {
        let s = gen_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(s.len(), 25);
        assert!(s.iter().all(|x| x.len() == 2592));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec { days: 1, ..SyntheticSpec::default() };
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(gen_synthetic(&spec).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn infinite_length_scale_without_noise_is_rank_one() {
        let spec = SyntheticSpec { length_scale_km: f64::INFINITY, noise_sigma: 0.0, days: 1, ..SyntheticSpec::default() };
        let s = gen_synthetic(&spec).unwrap();
        let rho = pearson_abs(matrix(&s).view()).unwrap();
        for v in rho.matrix().iter() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn correlation_decays_with_distance() {
        let sites = field_only(0).sites();
        let n = sites.len();
        let pos: Vec<LatLon> = sites.iter().map(|s| LatLon::new(s.lat, s.lon)).collect();
        let mut mean_rho = vec![0.0; n * (n - 1) / 2];
        for seed in 0..10 {
            let spec = SyntheticSpec { sensors: sites.clone(), ..field_only(seed) };
            let rho = pearson_abs(matrix(&gen_synthetic(&spec).unwrap()).view()).unwrap();
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    mean_rho[k] += rho.get(i, j) / 10.0;
                    k += 1;
                }
            }
        }
        let dist: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| great_circle_km(pos[i], pos[j])).collect();
        let r = spearman(&dist, &mean_rho);
        assert!(r < 0.0, "rank correlation {r}");
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { length_scale_km: 0.0, ..SyntheticSpec::default() },
            SyntheticSpec { noise_sigma: -1.0, ..SyntheticSpec::default() },
            SyntheticSpec { interval_minutes: 7, ..SyntheticSpec::default() },
            SyntheticSpec { ar_coeff: 1.0, ..SyntheticSpec::default() },
        ] {
            assert!(matches!(gen_synthetic(&spec), Err(BenchError::InvalidSynthetic(_))));
        }
    }

    #[test]
    fn layouts_stay_inside_extent() {
        for kind in [LayoutKind::Grid, LayoutKind::Clustered, LayoutKind::Uniform] {
            let spec = SyntheticSpec { layout: LayoutSpec { kind, ..LayoutSpec::default() }, ..SyntheticSpec::default() };
            let sites = spec.sites();
            assert_eq!(sites.len(), 25);
            let c = LatLon::new(spec.layout.center_lat, spec.layout.center_lon);
            for s in &sites {
                assert!(great_circle_km(c, LatLon::new(s.lat, s.lon)) < 10.0);
            }
        }
    }
}
