#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgrid::graph::{build_graph, normalize_adjacency, pearson_abs};
use stgrid::models::{ForecasterSpec, ModelKind, Network};
use stgrid::tensor::{Graph, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;
pub const PROBES: usize = 10;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn weighted_sum(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error over random probes of `f`'s inputs, comparing
/// reverse-mode gradients of `sum(f(x) * R)` with central differences.
pub fn check_op(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let y = f(&mut g, &vars);
        (g, vars, y)
    };
    let (mut g, vars, y) = eval(inputs);
    let r = random_tensor(g.value(y).shape(), &mut rng);
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();

    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let analytic = grads.wrt(vars[which]).map_or(0.0, |t| t.data()[flat]);
        let mut shifted = inputs.to_vec();
        shifted[which].data_mut()[flat] += FD_STEP;
        let (g1, _, y1) = eval(&shifted);
        shifted[which].data_mut()[flat] -= 2.0 * FD_STEP;
        let (g2, _, y2) = eval(&shifted);
        let numeric = (weighted_sum(g1.value(y1), &r) - weighted_sum(g2.value(y2), &r)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Spec and inputs for a small model: `N = 4`, `C = 8`, `H = 2`.
pub fn small_model(kind: ModelKind, seed: u64) -> (ForecasterSpec, Tensor) {
    let (n, c, h) = (4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[2, n, c], &mut rng);
    let mut spec = ForecasterSpec::new(kind, n, c, h, seed);
    spec.hidden = 8;
    if kind.uses_graph() {
        let series = ndarray::Array2::from_shape_fn((n, 40), |_| rng.random_range(-1.0..1.0));
        let corr = pearson_abs(series.view()).unwrap();
        spec = spec.with_graph(normalize_adjacency(&build_graph(&corr, 60.0).unwrap()));
    }
    (spec, x)
}

/// Worst relative error over random parameter probes of a full network.
pub fn check_model(kind: ModelKind, seed: u64) -> f64 {
    let (spec, x) = small_model(kind, seed);
    let mut store = ParamStore::new();
    let net = Network::build(&spec, &mut store).unwrap();
    let adj = spec.graph.as_ref().map(|a| a.to_tensor());
    let h = spec.horizon_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);

    let forward = |store: &ParamStore, g: &mut Graph| net.forward(g, store, adj.as_ref(), &x, h).unwrap();
    let mut g = Graph::new();
    let y = forward(&store, &mut g);
    let r = random_tensor(g.value(y).shape(), &mut rng);
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap().for_params(&store);

    let ids: Vec<_> = store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let value = |store: &ParamStore| {
        let mut g = Graph::new();
        let y = forward(store, &mut g);
        weighted_sum(g.value(y), &r)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let analytic = grads[which].as_ref().map_or(0.0, |t| t.data()[flat]);
        let orig = store.get(ids[which]).data()[flat];
        store.get_mut(ids[which]).data_mut()[flat] = orig + FD_STEP;
        let up = value(&store);
        store.get_mut(ids[which]).data_mut()[flat] = orig - FD_STEP;
        let down = value(&store);
        store.get_mut(ids[which]).data_mut()[flat] = orig;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Every differentiable op with representative shapes; `(name, worst error)`.
pub fn check_all_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |s: &[usize]| random_tensor(s, &mut rng);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        let e = check_op(&inputs, seed ^ name.len() as u64, f);
        out.push((name, e));
    };
    run("matmul", vec![t(&[3, 4]), t(&[4, 2])], &|g, v| g.matmul(v[0], v[1]).unwrap());
    run("matmul_batched", vec![t(&[2, 3, 4]), t(&[4, 5])], &|g, v| g.matmul(v[0], v[1]).unwrap());
    run("add_broadcast", vec![t(&[2, 3, 4]), t(&[4])], &|g, v| g.add(v[0], v[1]).unwrap());
    run("sub", vec![t(&[3, 4]), t(&[3, 4])], &|g, v| g.sub(v[0], v[1]).unwrap());
    run("mul", vec![t(&[3, 4]), t(&[3, 4])], &|g, v| g.mul(v[0], v[1]).unwrap());
    run("scale", vec![t(&[5])], &|g, v| g.scale(v[0], -1.7));
    run("add_scalar", vec![t(&[5])], &|g, v| g.add_scalar(v[0], 0.3));
    run("sigmoid", vec![t(&[6])], &|g, v| g.sigmoid(v[0]));
    run("tanh", vec![t(&[6])], &|g, v| g.tanh(v[0]));
    run("relu", vec![t(&[6])], &|g, v| g.relu(v[0]));
    run("abs", vec![t(&[6])], &|g, v| g.abs(v[0]));
    run("square", vec![t(&[6])], &|g, v| g.square(v[0]));
    run("softmax", vec![t(&[2, 3, 4])], &|g, v| g.softmax(v[0], 1).unwrap());
    run("concat", vec![t(&[2, 3]), t(&[2, 2])], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    run("stack", vec![t(&[2, 3]), t(&[2, 3])], &|g, v| g.stack(&[v[0], v[1]]).unwrap());
    run("slice", vec![t(&[3, 5])], &|g, v| g.slice(v[0], 1, 1, 3).unwrap());
    run("transpose", vec![t(&[2, 3, 4])], &|g, v| g.transpose(v[0]).unwrap());
    run("reshape", vec![t(&[2, 6])], &|g, v| g.reshape(v[0], &[3, 4]).unwrap());
    run("mean", vec![t(&[2, 3, 4])], &|g, v| g.mean(v[0], 1).unwrap());
    run("sum_all", vec![t(&[3, 3])], &|g, v| g.sum_all(v[0]));
    run("mean_all", vec![t(&[3, 3])], &|g, v| g.mean_all(v[0]));
    run("layer_norm", vec![t(&[3, 5])], &|g, v| g.layer_norm(v[0], 1e-5).unwrap());
    run("node_mix", vec![t(&[4, 4]), t(&[2, 4, 3])], &|g, v| g.node_mix(v[0], v[1]).unwrap());
    run("gru_cell", vec![t(&[3, 2, 9]), t(&[2, 3]), t(&[3, 9]), t(&[9])], &|g, v| {
        g.gru_cell(v[0], 1, v[1], v[2], v[3]).unwrap()
    });
    out
}
