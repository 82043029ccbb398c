//! Building blocks shared by the neural forecasters.

use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            w: store.init(format!("{name}.w"), &[inputs, outputs], InitScheme::GlorotUniform, seed)?,
            b: store.init(format!("{name}.b"), &[outputs], InitScheme::Zeros, seed)?,
        })
    }

    /// `x W + b` over the last axis of `x`.
    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// `σ(Ã X W + b)` for node features `x` shaped `[..., N, F]`.
pub fn gcn_layer(g: &mut Graph, adj: Var, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let mixed = g.node_mix(adj, xw)?;
    let out = g.add(mixed, b)?;
    Ok(if relu { g.relu(out) } else { out })
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub lin: Linear,
    pub relu: bool,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        Ok(Self { lin: Linear::new(store, name, inputs, outputs, seed)?, relu: true })
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, adj: Var, x: Var) -> Result<Var> {
        let (w, b) = (g.param(p, self.lin.w), g.param(p, self.lin.b));
        gcn_layer(g, adj, x, w, b, self.relu)
    }
}

/// Single GRU layer with PyTorch gate layout (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub hidden: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, seed: u64) -> Result<Self> {
        let g3 = 3 * hidden;
        Ok(Self {
            hidden,
            w_in: store.init(format!("{name}.w_in"), &[inputs, g3], InitScheme::GlorotUniform, seed)?,
            b_in: store.init(format!("{name}.b_in"), &[g3], InitScheme::Zeros, seed)?,
            w_h: store.init(format!("{name}.w_h"), &[hidden, g3], InitScheme::GlorotUniform, seed)?,
            b_h: store.init(format!("{name}.b_h"), &[g3], InitScheme::Zeros, seed)?,
        })
    }

    /// Runs over a time-major `[T, R, F]` input from a zero state and
    /// returns the hidden state after every step.
    pub fn run(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        let (steps, rows) = (shape[0], shape[1]);
        let (w_in, b_in) = (g.param(p, self.w_in), g.param(p, self.b_in));
        let (w_h, b_h) = (g.param(p, self.w_h), g.param(p, self.b_h));
        let proj = g.matmul(x, w_in)?;
        let xw = g.add(proj, b_in)?;
        let mut h = g.constant(Tensor::zeros([rows, self.hidden]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            h = g.gru_cell(xw, t, h, w_h, b_h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn([len, d], |k| {
        let (pos, i) = (k / d, k % d);
        let freq = 10_000f64.powf(-((i - i % 2) as f64) / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Post-norm Transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, seed: u64) -> Result<Self> {
        let norm = |store: &mut ParamStore, tag: &str| {
            (
                store.add(format!("{name}.{tag}.gain"), Tensor::full([d], 1.0)),
                store.add(format!("{name}.{tag}.bias"), Tensor::zeros([d])),
            )
        };
        Ok(Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), d, d, seed)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, seed)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, seed)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, seed)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, ff, seed)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, d, seed)?,
            ln1: norm(store, "ln1"),
            ln2: norm(store, "ln2"),
        })
    }

    fn norm(g: &mut Graph, p: &ParamStore, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let z = g.layer_norm(x, 1e-5)?;
        let (gn, bs) = (g.param(p, gain), g.param(p, bias));
        let scaled = g.mul(z, gn)?;
        g.add(scaled, bs)
    }

    /// `x` is `[B, T, d]`.
    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap();
        let dh = d / self.heads;
        let q = self.q.apply(g, p, x)?;
        let k = self.k.apply(g, p, x)?;
        let v = self.v.apply(g, p, x)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 2, h * dh, dh)?;
            let kh = g.slice(k, 2, h * dh, dh)?;
            let vh = g.slice(v, 2, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scores = g.scale(raw, 1.0 / (dh as f64).sqrt());
            let att = g.softmax(scores, 2)?;
            heads.push(g.matmul(att, vh)?);
        }
        let cat = g.concat(&heads, 2)?;
        let attn = self.o.apply(g, p, cat)?;
        let res1 = g.add(x, attn)?;
        let x1 = Self::norm(g, p, res1, self.ln1)?;
        let f1 = self.ff1.apply(g, p, x1)?;
        let f1 = g.relu(f1);
        let f2 = self.ff2.apply(g, p, f1)?;
        let res2 = g.add(x1, f2)?;
        Self::norm(g, p, res2, self.ln2)
    }
}
