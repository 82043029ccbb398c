//! Representative sensor subsets chosen from geography.
//!
//! Sensors are grouped by average-linkage agglomerative clustering on
//! great-circle distance. The selection order is: one sensor nearest each
//! cluster centroid, then farthest-point picks until `k + 3` sensors, then
//! (merging the two clusters with the closest centroids each round) the two
//! unselected members nearest each merged centroid, then farthest-point
//! picks for the rest. Every plan is a prefix of that order, so plans for
//! growing `K` are nested.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node counts of the experiment grid.
pub const STANDARD_NODE_COUNTS: [usize; 3] = [8, 16, 25];

const EARTH_RADIUS_KM: f64 = 6371.0088;
const DISPERSION_PICKS: usize = 3;
const PICKS_PER_MERGE: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("cannot form {k} clusters from {n} points")]
    TooFewPoints { n: usize, k: usize },
    #[error("requested {k} sensors from a network of {n}")]
    TooManySensors { n: usize, k: usize },
    #[error("node count {0} is not one of 8, 16, 25")]
    NonStandardCount(usize),
    #[error("{0} coordinates for a model over {1} sensors")]
    CoordMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

/// Haversine distance in kilometres.
pub fn great_circle_km(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn centroid(coords: &[LatLon], members: &[usize]) -> LatLon {
    let n = members.len() as f64;
    let lat = members.iter().map(|&i| coords[i].lat).sum::<f64>() / n;
    let lon = members.iter().map(|&i| coords[i].lon).sum::<f64>() / n;
    LatLon { lat, lon }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<LatLon>,
}

impl ClusterModel {
    /// Point indices of cluster `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == c).collect()
    }
}

/// Average-linkage clustering down to `k` clusters.
///
/// Ties between equally distant pairs go to the pair whose smallest member
/// indices are lexicographically smallest. Clusters are numbered by their
/// smallest member.
pub fn agglomerative_cluster(coords: &[LatLon], k: usize) -> Result<ClusterModel, SpatialError> {
    let n = coords.len();
    if k == 0 || n < k {
        return Err(SpatialError::TooFewPoints { n, k });
    }
    let dist: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| great_circle_km(coords[i], coords[j])).collect()).collect();

    // Active clusters as sorted member lists plus pairwise average linkage.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut link = dist.clone();
    let mut alive = vec![true; n];
    for _ in 0..n - k {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in (0..n).filter(|&a| alive[a]) {
            for b in (a + 1..n).filter(|&b| alive[b]) {
                let key = (clusters[a][0].min(clusters[b][0]), clusters[a][0].max(clusters[b][0]));
                let d = link[a][b];
                let better = match best {
                    None => true,
                    Some((bd, bk, _, _)) => d < bd || (d == bd && key < bk),
                };
                if better {
                    best = Some((d, key, a, b));
                }
            }
        }
        let (_, _, a, b) = best.expect("at least two live clusters");
        // Lance-Williams update for average linkage.
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for c in (0..n).filter(|&c| alive[c] && c != a && c != b) {
            let d = (na * link[a][c] + nb * link[b][c]) / (na + nb);
            link[a][c] = d;
            link[c][a] = d;
        }
        let mut merged = std::mem::take(&mut clusters[b]);
        clusters[a].append(&mut merged);
        clusters[a].sort_unstable();
        alive[b] = false;
    }

    let mut groups: Vec<Vec<usize>> = (0..n).filter(|&c| alive[c]).map(|c| clusters[c].clone()).collect();
    groups.sort_by_key(|g| g[0]);
    let mut assignments = vec![0; n];
    for (c, g) in groups.iter().enumerate() {
        for &i in g {
            assignments[i] = c;
        }
    }
    let centroids = groups.iter().map(|g| centroid(coords, g)).collect();
    Ok(ClusterModel { k, assignments, centroids })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionReason {
    CentroidNearest,
    Dispersion,
    MergeExpansion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    #[serde(rename = "K")]
    pub k: usize,
    /// Selected sensor indices in network order.
    #[serde(skip)]
    pub indices: Vec<usize>,
    pub sensors: Vec<String>,
    pub provenance: BTreeMap<String, SelectionReason>,
}

impl SubsetPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }
}

fn nearest(coords: &[LatLon], to: LatLon, candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for i in candidates {
        let d = great_circle_km(coords[i], to);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Unselected point maximising the distance to its nearest selected point.
fn farthest_point(coords: &[LatLon], selected: &[bool]) -> Option<usize> {
    let chosen: Vec<usize> = (0..coords.len()).filter(|&i| selected[i]).collect();
    let mut best: Option<(f64, usize)> = None;
    for i in (0..coords.len()).filter(|&i| !selected[i]) {
        let d = chosen.iter().map(|&j| great_circle_km(coords[i], coords[j])).fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(bd, _)| d > bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Full deterministic selection order over every sensor.
pub fn selection_order(model: &ClusterModel, coords: &[LatLon]) -> Vec<(usize, SelectionReason)> {
    let n = coords.len();
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut take = |i: usize, why, selected: &mut Vec<bool>| {
        selected[i] = true;
        order.push((i, why));
    };

    for (c, &cent) in model.centroids.iter().enumerate() {
        if let Some(i) = nearest(coords, cent, model.members(c).into_iter()) {
            take(i, SelectionReason::CentroidNearest, &mut selected);
        }
    }
    for _ in 0..DISPERSION_PICKS {
        if let Some(i) = farthest_point(coords, &selected) {
            take(i, SelectionReason::Dispersion, &mut selected);
        }
    }

    let mut groups: Vec<Vec<usize>> = (0..model.k).map(|c| model.members(c)).collect();
    while groups.len() > 1 {
        let cents: Vec<LatLon> = groups.iter().map(|g| centroid(coords, g)).collect();
        let mut best = (f64::INFINITY, 0, 1);
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let d = great_circle_km(cents[a], cents[b]);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let mut merged = groups.remove(b);
        groups[a].append(&mut merged);
        groups[a].sort_unstable();
        let cent = centroid(coords, &groups[a]);
        for _ in 0..PICKS_PER_MERGE {
            let free = groups[a].iter().copied().filter(|&i| !selected[i]);
            if let Some(i) = nearest(coords, cent, free) {
                take(i, SelectionReason::MergeExpansion, &mut selected);
            }
        }
    }
    while let Some(i) = farthest_point(coords, &selected) {
        take(i, SelectionReason::Dispersion, &mut selected);
    }
    order
}

/// First `k` sensors of [`selection_order`]. With `strict`, `k` must be a
/// standard node count.
pub fn select_subset(
    model: &ClusterModel,
    coords: &[LatLon],
    ids: &[String],
    k: usize,
    strict: bool,
) -> Result<SubsetPlan, SpatialError> {
    let n = coords.len();
    if model.assignments.len() != n || ids.len() != n {
        return Err(SpatialError::CoordMismatch(coords.len(), model.assignments.len()));
    }
    if strict && !STANDARD_NODE_COUNTS.contains(&k) {
        return Err(SpatialError::NonStandardCount(k));
    }
    if k > n {
        return Err(SpatialError::TooManySensors { n, k });
    }
    let mut picked: Vec<(usize, SelectionReason)> = selection_order(model, coords).into_iter().take(k).collect();
    picked.sort_by_key(|p| p.0);
    Ok(SubsetPlan {
        k,
        indices: picked.iter().map(|p| p.0).collect(),
        sensors: picked.iter().map(|p| ids[p.0].clone()).collect(),
        provenance: picked.iter().map(|&(i, why)| (ids[i].clone(), why)).collect(),
    })
}
