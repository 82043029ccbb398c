//! Correlation graphs under a redundancy level.
//!
//! Given the unique off-diagonal correlations `U` sorted ascending, the
//! threshold for redundancy `p` percent is `max U` at `p = 0` (no edges),
//! `min U` at `p = 100` (everything), and otherwise the nearest-rank lower
//! percentile: the element at 1-indexed rank `max(1, round((100 - p) / 100 * |U|))`.
//! Pairs with `rho >= theta` keep weight `rho`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("need at least 2 nodes with defined correlations, got {0}")]
    TooFewNodes(usize),
    #[error("redundancy must lie in [0, 100], got {0}")]
    InvalidRedundancy(f64),
    #[error("each node needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("correlation matrix invalid: {0}")]
    InvalidMatrix(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("graph json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Symmetric matrix of absolute Pearson correlations, unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    rho: Array2<f64>,
    /// Nodes with zero variance; their off-diagonal entries are 0 and they
    /// are left out of the threshold set.
    pub zero_variance: Vec<usize>,
}

impl CorrelationMatrix {
    /// Wraps a precomputed matrix after checking symmetry, range and diagonal.
    pub fn from_matrix(rho: Array2<f64>) -> Result<Self> {
        let n = rho.nrows();
        if rho.ncols() != n {
            return Err(GraphError::InvalidMatrix(format!("not square: {:?}", rho.shape())));
        }
        for i in 0..n {
            if rho[[i, i]] != 1.0 {
                return Err(GraphError::InvalidMatrix(format!("diagonal ({i},{i}) = {}", rho[[i, i]])));
            }
            for j in 0..n {
                let v = rho[[i, j]];
                if !(0.0..=1.0).contains(&v) || v != rho[[j, i]] {
                    return Err(GraphError::InvalidMatrix(format!("entry ({i},{j}) = {v}")));
                }
            }
        }
        Ok(Self { rho, zero_variance: Vec::new() })
    }

    pub fn n(&self) -> usize {
        self.rho.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[[i, j]]
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.rho.view()
    }

    fn defined(&self, i: usize) -> bool {
        !self.zero_variance.contains(&i)
    }

    /// `U`: upper-triangle correlations between defined nodes, ascending.
    pub fn unique_sorted(&self) -> Vec<f64> {
        let n = self.n();
        let mut u: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.defined(i) && self.defined(j))
            .map(|(i, j)| self.rho[[i, j]])
            .collect();
        u.sort_by(f64::total_cmp);
        u
    }

    /// Rows and columns restricted to `nodes`, in that order.
    pub fn select(&self, nodes: &[usize]) -> CorrelationMatrix {
        let rho = self.rho.select(Axis(0), nodes).select(Axis(1), nodes);
        let zero_variance = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| self.zero_variance.contains(n))
            .map(|(i, _)| i)
            .collect();
        CorrelationMatrix { rho, zero_variance }
    }
}

/// `|corr(X_i, X_j)|` for every pair of rows of a nodes-by-time matrix.
/// Sums run in time order for each pair, so the result is reproducible.
pub fn pearson_abs(values: ArrayView2<'_, f64>) -> Result<CorrelationMatrix> {
    let (n, t) = values.dim();
    if t < 2 {
        return Err(GraphError::TooFewSamples(t));
    }
    let centred: Vec<Vec<f64>> = values
        .axis_iter(Axis(0))
        .map(|row| {
            let mu = row.iter().sum::<f64>() / t as f64;
            row.iter().map(|v| v - mu).collect()
        })
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let zero_variance: Vec<usize> = (0..n).filter(|&i| !(norms[i] > 0.0)).collect();
    let mut rho = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let r = if zero_variance.contains(&i) || zero_variance.contains(&j) {
                0.0
            } else {
                let cov: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                (cov / (norms[i] * norms[j])).abs().min(1.0)
            };
            rho[[i, j]] = r;
            rho[[j, i]] = r;
        }
    }
    Ok(CorrelationMatrix { rho, zero_variance })
}

fn check_redundancy(p: f64) -> Result<()> {
    if (0.0..=100.0).contains(&p) {
        Ok(())
    } else {
        Err(GraphError::InvalidRedundancy(p))
    }
}

/// Threshold `theta` for redundancy `p` percent (see module docs).
pub fn threshold_from_redundancy(corr: &CorrelationMatrix, p: f64) -> Result<f64> {
    check_redundancy(p)?;
    let u = corr.unique_sorted();
    if u.is_empty() {
        return Err(GraphError::TooFewNodes(corr.n() - corr.zero_variance.len().min(corr.n())));
    }
    Ok(if p == 0.0 {
        u[u.len() - 1]
    } else if p == 100.0 {
        u[0]
    } else {
        let rank = (((100.0 - p) * u.len() as f64) / 100.0).round().max(1.0) as usize;
        u[rank.min(u.len()) - 1]
    })
}

/// Weighted undirected graph with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    pub adjacency: Array2<f64>,
    pub redundancy: f64,
    pub threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    p: f64,
    theta: f64,
    edges: Vec<(usize, usize, f64)>,
}

impl WeightedGraph {
    /// Graph with no edges.
    pub fn empty(n: usize) -> Self {
        Self { adjacency: Array2::zeros((n, n)), redundancy: 0.0, threshold: f64::NAN }
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    /// `(i, j, weight)` with `i < j` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter_map(|(i, j)| {
                let w = self.adjacency[[i, j]];
                (w != 0.0).then_some((i, j, w))
            })
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GraphJson {
            n: self.n(),
            p: self.redundancy,
            theta: self.threshold,
            edges: self.edges(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: GraphJson = serde_json::from_str(s)?;
        let mut adjacency = Array2::zeros((g.n, g.n));
        for (i, j, w) in g.edges {
            if i >= j || j >= g.n {
                return Err(GraphError::InvalidMatrix(format!("edge ({i},{j}) out of order or range")));
            }
            adjacency[[i, j]] = w;
            adjacency[[j, i]] = w;
        }
        Ok(Self { adjacency, redundancy: g.p, threshold: g.theta })
    }

    /// Subgraph over `nodes`, in that order.
    pub fn select(&self, nodes: &[usize]) -> WeightedGraph {
        WeightedGraph {
            adjacency: self.adjacency.select(Axis(0), nodes).select(Axis(1), nodes),
            ..self.clone()
        }
    }
}

/// Keeps every pair with `rho >= theta` at weight `rho`; `p = 0` keeps none.
pub fn build_graph(corr: &CorrelationMatrix, p: f64) -> Result<WeightedGraph> {
    let theta = threshold_from_redundancy(corr, p)?;
    let n = corr.n();
    let mut adjacency = Array2::zeros((n, n));
    if p > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                let r = corr.get(i, j);
                if corr.defined(i) && corr.defined(j) && r >= theta && r > 0.0 {
                    adjacency[[i, j]] = r;
                    adjacency[[j, i]] = r;
                }
            }
        }
    }
    Ok(WeightedGraph { adjacency, redundancy: p, threshold: theta })
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAdjacency {
    pub matrix: Array2<f64>,
}

impl NormalizedAdjacency {
    pub fn identity(n: usize) -> Self {
        Self { matrix: Array2::eye(n) }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.n();
        Tensor::new([n, n], self.matrix.iter().copied().collect()).expect("square matrix")
    }

    pub fn select(&self, nodes: &[usize]) -> NormalizedAdjacency {
        Self { matrix: self.matrix.select(Axis(0), nodes).select(Axis(1), nodes) }
    }
}

pub fn normalize_adjacency(graph: &WeightedGraph) -> NormalizedAdjacency {
    let n = graph.n();
    let mut a = graph.adjacency.clone();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    // Row sums in sorted order so node relabelling cannot change them.
    let degree: Vec<f64> = a
        .axis_iter(Axis(0))
        .map(|row| {
            let mut r = row.to_vec();
            r.sort_by(f64::total_cmp);
            r.iter().sum()
        })
        .collect();
    let mut matrix = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                matrix[[i, j]] = a[[i, j]] / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    NormalizedAdjacency { matrix }
}

/// Dense CSV with a `node` header row and an id column.
pub fn export_heatmap_csv(matrix: ArrayView2<'_, f64>, ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let werr = |source| GraphError::Write { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(werr)?;
    }
    let mut out = String::from("node");
    for id in ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(matrix.axis_iter(Axis(0))) {
        out.push_str(id);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(werr)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    fn worked_example() -> CorrelationMatrix {
        CorrelationMatrix::from_matrix(array![
            [1.00, 0.85, 0.78, 0.62, 0.55],
            [0.85, 1.00, 0.73, 0.51, 0.48],
            [0.78, 0.73, 1.00, 0.66, 0.59],
            [0.62, 0.51, 0.66, 1.00, 0.47],
            [0.55, 0.48, 0.59, 0.47, 1.00],
        ])
        .unwrap()
    }

    #[test]
    fn pearson_identity_and_sign() {
        let x = array![[1.0, 2.0, 3.0, 5.0], [1.0, 2.0, 3.0, 5.0], [-1.0, -2.0, -3.0, -5.0]];
        let c = pearson_abs(x.view()).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((c.get(0, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_direct_formula() {
        // cov = 3, |dx| = sqrt 2, |dy| = sqrt(42)/3  =>  rho = 9 / sqrt 84
        let c = pearson_abs(array![[1.0, 2.0, 3.0], [1.0, 2.0, 4.0]].view()).unwrap();
        assert!((c.get(0, 1) - 9.0 / 84f64.sqrt()).abs() < 1e-15);
        assert!((c.get(0, 1) - 0.9820).abs() < 5e-5);
    }

    #[test]
    fn zero_variance_flagged() {
        let c = pearson_abs(array![[2.0, 2.0, 2.0], [1.0, 2.0, 4.0], [0.0, 1.0, 0.0]].view()).unwrap();
        assert_eq!(c.zero_variance, vec![0]);
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.unique_sorted().len(), 1);
        assert!(pearson_abs(array![[1.0], [2.0]].view()).is_err());
    }

    #[test]
    fn worked_example_thresholds() {
        let c = worked_example();
        assert_eq!(threshold_from_redundancy(&c, 80.0).unwrap(), 0.48);
        assert_eq!(threshold_from_redundancy(&c, 0.0).unwrap(), 0.85);
        assert_eq!(threshold_from_redundancy(&c, 100.0).unwrap(), 0.47);
        assert!(threshold_from_redundancy(&c, 101.0).is_err());
        let one = CorrelationMatrix::from_matrix(array![[1.0]]).unwrap();
        assert!(matches!(threshold_from_redundancy(&one, 50.0), Err(GraphError::TooFewNodes(_))));
    }

    #[test]
    fn worked_example_graphs() {
        let c = worked_example();
        let full = build_graph(&c, 100.0).unwrap();
        assert_eq!(full.edge_count(), 10);
        for (i, j, w) in full.edges() {
            assert_eq!(w, c.get(i, j));
        }
        assert_eq!(build_graph(&c, 0.0).unwrap().edge_count(), 0);
        let g80 = build_graph(&c, 80.0).unwrap();
        assert_eq!(g80.edge_count(), 9);
        assert_eq!(g80.adjacency[[3, 4]], 0.0);
    }

    #[test]
    fn json_roundtrip() {
        let g = build_graph(&worked_example(), 60.0).unwrap();
        let back = WeightedGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn normalized_adjacency_examples() {
        assert_eq!(normalize_adjacency(&WeightedGraph::empty(3)).matrix, Array2::<f64>::eye(3));
        let mut g = WeightedGraph::empty(2);
        g.adjacency = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(normalize_adjacency(&g).matrix, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn complete_uniform_graph_is_doubly_stochastic() {
        let n = 6;
        let mut g = WeightedGraph::empty(n);
        g.adjacency = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 0.7 });
        let a = normalize_adjacency(&g).matrix;
        for row in a.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        export_heatmap_csv(Array2::<f64>::eye(2).view(), &["a".into(), "b".into()], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "node,a,b\na,1,0\nb,0,1\n");
    }

    fn random_corr(n: usize, vals: &[f64]) -> CorrelationMatrix {
        let mut rho = Array2::eye(n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                rho[[i, j]] = vals[k % vals.len()];
                rho[[j, i]] = rho[[i, j]];
                k += 1;
            }
        }
        CorrelationMatrix::from_matrix(rho).unwrap()
    }

    proptest! {
        #[test]
        fn edges_monotone_in_p(n in 2usize..10, vals in prop::collection::vec(0.0f64..1.0, 45), p1 in 0.0f64..100.0, dp in 0.0f64..100.0) {
            let c = random_corr(n, &vals);
            let p2 = (p1 + dp).min(100.0);
            let (g1, g2) = (build_graph(&c, p1).unwrap(), build_graph(&c, p2).unwrap());
            for (i, j, _) in g1.edges() {
                prop_assert!(g2.adjacency[[i, j]] != 0.0);
            }
        }

        #[test]
        fn threshold_in_u_and_brute_force_agrees(n in 5usize..=10, vals in prop::collection::vec(0.01f64..1.0, 45), p in 0.5f64..99.5) {
            let c = random_corr(n, &vals);
            let theta = threshold_from_redundancy(&c, p).unwrap();
            let u = c.unique_sorted();
            prop_assert!(u.contains(&theta));
            // Brute force: keep the suffix of sorted U starting at the rank.
            let rank = ((100.0 - p) / 100.0 * u.len() as f64).round().max(1.0) as usize;
            let kept: Vec<f64> = u.iter().copied().filter(|v| *v >= u[rank - 1]).collect();
            let mut got: Vec<f64> = build_graph(&c, p).unwrap().edges().iter().map(|e| e.2).collect();
            got.sort_by(f64::total_cmp);
            prop_assert_eq!(got, kept);
        }

        #[test]
        fn normalized_spectrum_bounded(n in 2usize..=10, vals in prop::collection::vec(0.0f64..1.0, 45), p in 0.0f64..=100.0) {
            let g = build_graph(&random_corr(n, &vals), p).unwrap();
            let a = normalize_adjacency(&g).matrix;
            let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
            prop_assert_eq!(&m, &m.transpose());
            let eig = nalgebra::SymmetricEigen::new(m);
            for l in eig.eigenvalues.iter() {
                prop_assert!(l.abs() <= 1.0 + 1e-9, "eigenvalue {}", l);
            }
        }
    }
}
