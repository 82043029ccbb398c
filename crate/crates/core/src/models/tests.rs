use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::*;
use crate::graph::{build_graph, normalize_adjacency, pearson_abs};
use crate::timeseries::{window_lengths, AlignedPanel, SUPPORTED_RATES};

fn unit_norm(n: usize) -> NormStats {
    NormStats { mean: vec![0.0; n], std: vec![1.0; n] }
}

fn random_input(b: usize, n: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([b, n, c], |_| rng.random_range(-1.5..1.5))
}

fn random_graph(n: usize, seed: u64) -> NormalizedAdjacency {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, 50), |_| rng.random_range(-1.0..1.0));
    let base = x.row(0).to_owned();
    let mixed = Array2::from_shape_fn((n, 50), |(i, t)| x[[i, t]] + base[t] * (i % 3) as f64);
    normalize_adjacency(&build_graph(&pearson_abs(mixed.view()).unwrap(), 60.0).unwrap())
}

fn spec(kind: ModelKind, n: usize, c: usize, h: usize) -> ForecasterSpec {
    let s = ForecasterSpec::new(kind, n, c, h, 11);
    if kind.uses_graph() {
        s.with_graph(random_graph(n, 4))
    } else {
        s
    }
}

fn panel(n: usize, steps: usize, minutes: u32, seed: u64) -> AlignedPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_day = (1440 / minutes) as f64;
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
    let values = Array2::from_shape_fn((n, steps), |(i, t)| {
        20.0 + i as f64 * 0.3 + 3.0 * (std::f64::consts::TAU * t as f64 / per_day + phase[i]).sin()
            + rng.random_range(-0.2..0.2)
    });
    AlignedPanel {
        sensor_ids: (0..n).map(|i| format!("n{i}")).collect(),
        interval_minutes: minutes,
        start: 0,
        mask: Array2::from_elem((n, steps), true),
        values,
    }
}

#[test]
fn kind_names_round_trip() {
    for k in ModelKind::ALL {
        assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
    }
    assert_eq!("grugcn".parse::<ModelKind>().unwrap(), ModelKind::GruGcn);
    assert!("lstm".parse::<ModelKind>().is_err());
}

#[test]
fn graph_presence_is_validated() {
    let n = 4;
    assert!(matches!(
        ForecasterSpec::new(ModelKind::GruGcn, n, 8, 4, 0).validate(),
        Err(ModelError::MissingGraph(ModelKind::GruGcn))
    ));
    let g = NormalizedAdjacency::identity(n);
    assert!(matches!(
        ForecasterSpec::new(ModelKind::Gru, n, 8, 4, 0).with_graph(g.clone()).validate(),
        Err(ModelError::UnexpectedGraph(ModelKind::Gru))
    ));
    assert!(matches!(
        ForecasterSpec::new(ModelKind::Tgcn, 5, 8, 4, 0).with_graph(g).validate(),
        Err(ModelError::GraphMismatch { graph: 4, model: 5 })
    ));
}

#[test]
fn predict_shape_contract_across_grid() {
    for kind in ModelKind::ALL {
        for rate in SUPPORTED_RATES {
            let (c, h) = window_lengths(rate).unwrap();
            for k in [8, 16, 25] {
                let m = Forecaster::init(spec(kind, k, c, h), unit_norm(k)).unwrap();
                let y = m.predict_normalized(&random_input(2, k, c, 1)).unwrap();
                assert_eq!(y.shape(), &[2, k, h], "{kind} f_s={rate} K={k}");
                assert!(y.all_finite());
            }
        }
    }
}

#[test]
fn wrong_input_shape_is_error() {
    let m = Forecaster::init(spec(ModelKind::Gru, 4, 8, 4), unit_norm(4)).unwrap();
    assert!(matches!(m.predict_normalized(&random_input(1, 3, 8, 0)), Err(ModelError::Shape { .. })));
    assert!(matches!(m.predict_normalized(&random_input(1, 4, 9, 0)), Err(ModelError::Shape { .. })));
}

/// Per-node GRU followed by the same dense layer and head, with no mixing.
fn grugcn_reference(m: &Forecaster, x: &Tensor) -> Vec<f64> {
    let Some(Network::GruGcn { gru, gcn, head }) = m.network() else { panic!("not GRUGCN") };
    let p = m.params().unwrap();
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = m.spec().horizon_len;
    let mut out = vec![0.0; b * n * h];
    for node in 0..n {
        let seq = Tensor::from_fn([c, b, 1], |k| {
            let (t, bi) = (k / b, k % b);
            x.data()[(bi * n + node) * c + t]
        });
        let mut g = Graph::new();
        let s = g.constant(seq);
        let last = *gru.run(&mut g, p, s).unwrap().last().unwrap();
        let dense = Linear { w: gcn.lin.w, b: gcn.lin.b }.apply(&mut g, p, last).unwrap();
        let act = g.relu(dense);
        let y = head.apply(&mut g, p, act).unwrap();
        for bi in 0..b {
            for k in 0..h {
                out[(bi * n + node) * h + k] = g.value(y).data()[bi * h + k];
            }
        }
    }
    out
}

/// Per-node two-layer MLP on the raw value, then the GRU and head.
fn tgcn_reference(m: &Forecaster, x: &Tensor) -> Vec<f64> {
    let Some(Network::Tgcn { gcn1, gcn2, gru, head }) = m.network() else { panic!("not TGCN") };
    let p = m.params().unwrap();
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = m.spec().horizon_len;
    let mut out = vec![0.0; b * n * h];
    for node in 0..n {
        let seq = Tensor::from_fn([c, b, 1], |k| {
            let (t, bi) = (k / b, k % b);
            x.data()[(bi * n + node) * c + t]
        });
        let mut g = Graph::new();
        let s = g.constant(seq);
        let l1 = gcn1.lin.apply(&mut g, p, s).unwrap();
        let a1 = g.relu(l1);
        let l2 = gcn2.lin.apply(&mut g, p, a1).unwrap();
        let a2 = g.relu(l2);
        let last = *gru.run(&mut g, p, a2).unwrap().last().unwrap();
        let y = head.apply(&mut g, p, last).unwrap();
        for bi in 0..b {
            for k in 0..h {
                out[(bi * n + node) * h + k] = g.value(y).data()[bi * h + k];
            }
        }
    }
    out
}

#[test]
fn edgeless_graph_models_equal_per_node_references() {
    let (n, c, h) = (5, 16, 8);
    let x = random_input(3, n, c, 9);
    for (kind, reference) in [
        (ModelKind::GruGcn, grugcn_reference as fn(&Forecaster, &Tensor) -> Vec<f64>),
        (ModelKind::Tgcn, tgcn_reference),
    ] {
        let s = ForecasterSpec::new(kind, n, c, h, 5).with_graph(NormalizedAdjacency::identity(n));
        let m = Forecaster::init(s, unit_norm(n)).unwrap();
        let y = m.predict_normalized(&x).unwrap();
        assert_eq!(y.data(), reference(&m, &x).as_slice(), "{kind}");
    }
}

fn permute_input(x: &Tensor, perm: &[usize]) -> Tensor {
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn([b, n, c], |k| {
        let (bi, i, t) = (k / (n * c), (k / c) % n, k % c);
        x.data()[(bi * n + perm[i]) * c + t]
    })
}

#[test]
fn graph_models_are_permutation_equivariant() {
    let (n, c, h) = (6, 8, 4);
    let x = random_input(2, n, c, 21);
    let perm = [3, 0, 5, 1, 4, 2];
    for kind in [ModelKind::GruGcn, ModelKind::Tgcn] {
        let adj = random_graph(n, 8);
        assert!(adj.matrix.iter().filter(|v| **v != 0.0).count() > n, "graph has edges");
        let base = Forecaster::init(ForecasterSpec::new(kind, n, c, h, 2).with_graph(adj.clone()), unit_norm(n)).unwrap();
        let permuted =
            Forecaster::init(ForecasterSpec::new(kind, n, c, h, 2).with_graph(adj.select(&perm)), unit_norm(n)).unwrap();
        let y = base.predict_normalized(&x).unwrap();
        let yp = permuted.predict_normalized(&permute_input(&x, &perm)).unwrap();
        assert_eq!(yp, permute_input(&y, &perm), "{kind}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (n, c, h, b) = (4, 8, 2, 3);
    let x = random_input(b, n, c, 3);
    let y = random_input(b, n, h, 4);
    for kind in [ModelKind::Gru, ModelKind::Transformer, ModelKind::GruGcn, ModelKind::Tgcn] {
        let m = Forecaster::init(spec(kind, n, c, h), unit_norm(n)).unwrap();
        let p = m.params().unwrap();
        let adj = m.spec().graph.as_ref().map(NormalizedAdjacency::to_tensor);
        let mut g = Graph::new();
        let pred = m.network().unwrap().forward(&mut g, p, adj.as_ref(), &x, h).unwrap();
        let t = g.constant(y.clone());
        let d = g.sub(pred, t).unwrap();
        let a = g.abs(d);
        let loss = g.mean_all(a);
        let grads = g.backward(loss).unwrap().for_params(p);
        for (id, grad) in p.ids().zip(&grads) {
            let gmax = grad.as_ref().map_or(0.0, Tensor::max_abs);
            assert!(gmax > 0.0, "{kind}: {} has zero gradient", p.name(id));
        }
    }
}

fn one_window_splits(n: usize) -> (TrainSplit, ValSplit) {
    let p = panel(n, 12, 60, 2);
    (TrainSplit::assume(p.clone()), ValSplit::assume(p))
}

#[test]
fn neural_baselines_memorise_one_window() {
    let cfg = TrainConfig { max_epochs: 200, patience: 200, ..TrainConfig::default() };
    let (train, val) = one_window_splits(4);
    for kind in [ModelKind::Gru, ModelKind::Transformer] {
        let (_, report) = Forecaster::fit(spec(kind, 4, 8, 4), &train, &val, &cfg).unwrap();
        let best = report.best_val_mae().unwrap();
        assert!(best < 0.05, "{kind}: train MAE {best}");
    }
}

#[test]
fn fitting_is_deterministic_and_restores_best() {
    let p = panel(3, 200, 60, 7);
    let train = TrainSplit::assume(p.slice_steps(0, 120));
    let val = ValSplit::assume(p.slice_steps(120, 80));
    let cfg = TrainConfig { max_epochs: 6, patience: 2, ..TrainConfig::default() };
    for kind in [ModelKind::Gru, ModelKind::GruGcn] {
        let s = spec(kind, 3, 8, 4);
        let (m1, r1) = Forecaster::fit(s.clone(), &train, &val, &cfg).unwrap();
        let (m2, r2) = Forecaster::fit(s, &train, &val, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.params().unwrap().tensors(), m2.params().unwrap().tensors());
        let best = r1.best_val_mae().unwrap();
        assert!(r1.val_mae.iter().all(|v| *v >= best));
        let vw = make_windows(&m1.norm().apply(&val).unwrap(), 8, 4, 1).unwrap();
        let adj = m1.spec().graph.as_ref().map(NormalizedAdjacency::to_tensor);
        let ctx = train::Context { network: m1.network().unwrap(), adj: adj.as_ref(), std: &m1.norm().std, seed: 0 };
        let restored = train::eval_mae(&ctx, m1.params().unwrap(), &vw, 64).unwrap();
        assert_eq!(restored, best);
    }
}

#[test]
fn empty_training_windows_are_rejected() {
    let p = panel(3, 10, 60, 1);
    let train = TrainSplit::assume(p.clone());
    let val = ValSplit::assume(p);
    let err = Forecaster::fit(spec(ModelKind::Gru, 3, 8, 4), &train, &val, &TrainConfig::default());
    assert!(matches!(err, Err(ModelError::EmptyWindows)));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = panel(3, 150, 60, 5);
    let train = TrainSplit::assume(p.slice_steps(0, 100));
    let val = ValSplit::assume(p.slice_steps(100, 50));
    let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let ws = make_windows(&p, 8, 4, 1).unwrap();
    for kind in ModelKind::ALL {
        let (m, _) = Forecaster::fit(spec(kind, 3, 8, 4), &train, &val, &cfg).unwrap();
        let path = dir.path().join(kind.name());
        m.save(&path).unwrap();
        let back = Forecaster::load(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(m.predict_windows(&ws, 16).unwrap(), back.predict_windows(&ws, 64).unwrap(), "{kind}");
    }
    assert!(matches!(Forecaster::load(dir.path().join("missing")), Err(ModelError::Io { .. })));
}

#[test]
fn var_recovers_generating_coefficients() {
    let a = array![[0.5, 0.1], [0.0, 0.8]];
    let mut x = Array2::zeros((2, 80));
    x[[0, 0]] = 50.0;
    x[[1, 0]] = -30.0;
    for t in 1..80 {
        for i in 0..2 {
            x[[i, t]] = a[[i, 0]] * x[[0, t - 1]] + a[[i, 1]] * x[[1, t - 1]];
        }
    }
    let m = var_fit(x.view(), 1).unwrap();
    let err = (&m.lags[0] - &a).mapv(f64::abs).fold(0.0f64, |acc, v| acc.max(*v));
    assert!(err < 1e-6, "max abs error {err}");
}

#[test]
fn var_ar1_two_step_rollout() {
    let x = Array2::from_shape_fn((1, 60), |(_, t)| 100.0 * 0.9f64.powi(t as i32));
    let m = var_fit(x.view(), 1).unwrap();
    let f = m.predict(array![[1.0]].view(), 2).unwrap();
    assert!((f[[0, 1]] - 0.81).abs() < 1e-9, "{}", f[[0, 1]]);
}

#[test]
fn var_forecaster_on_constant_panel() {
    let mut p = panel(3, 100, 60, 0);
    p.values.fill(17.25);
    let (m, report) = Forecaster::fit(
        ForecasterSpec::new(ModelKind::Var, 3, 8, 4, 0),
        &TrainSplit::assume(p.slice_steps(0, 60)),
        &ValSplit::assume(p.slice_steps(60, 40)),
        &TrainConfig::default(),
    )
    .unwrap();
    assert_eq!(report.epochs_run, 0);
    let out = m.predict_windows(&make_windows(&p, 8, 4, 1).unwrap(), 64).unwrap();
    assert!(out.predictions.iter().all(|v| *v == 17.25));
}
