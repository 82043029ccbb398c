use super::layers::{positional_encoding, EncoderLayer, GcnLayer, GruLayer, Linear};
use super::{ForecasterSpec, ModelError, ModelKind, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const TRANSFORMER_HEADS: usize = 4;
pub const TRANSFORMER_FF: usize = 128;
pub const TGCN_GCN_WIDTH: usize = 32;

/// Reorders `[B, N, C]` into time-major `[C, B, N]`.
pub fn time_major(x: &Tensor) -> Tensor {
    let (b, n, c) = dims3(x);
    let d = x.data();
    Tensor::from_fn([c, b, n], |k| {
        let (t, rest) = (k / (b * n), k % (b * n));
        let (bi, ni) = (rest / n, rest % n);
        d[(bi * n + ni) * c + t]
    })
}

/// Reorders `[B, N, C]` into `[B, C, N]`.
pub fn batch_time_nodes(x: &Tensor) -> Tensor {
    let (b, n, c) = dims3(x);
    let d = x.data();
    Tensor::from_fn([b, c, n], |k| {
        let (bi, rest) = (k / (c * n), k % (c * n));
        let (t, ni) = (rest / n, rest % n);
        d[(bi * n + ni) * c + t]
    })
}

fn dims3(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}

#[derive(Clone, Debug)]
pub enum Network {
    Gru { layers: Vec<GruLayer>, head: Linear },
    Transformer { input: Linear, layers: Vec<EncoderLayer>, head: Linear },
    GruGcn { gru: GruLayer, gcn: GcnLayer, head: Linear },
    Tgcn { gcn1: GcnLayer, gcn2: GcnLayer, gru: GruLayer, head: Linear },
}

impl Network {
    /// Registers parameters in a fixed order, so one seed always yields the
    /// same weights.
    pub fn build(spec: &ForecasterSpec, store: &mut ParamStore) -> Result<Self> {
        let (n, h, hid, seed) = (spec.n_nodes, spec.horizon_len, spec.hidden, spec.seed);
        Ok(match spec.kind {
            ModelKind::Gru => {
                let mut layers = Vec::with_capacity(spec.layers);
                for l in 0..spec.layers.max(1) {
                    let inputs = if l == 0 { n } else { hid };
                    layers.push(GruLayer::new(store, &format!("gru{l}"), inputs, hid, seed)?);
                }
                Network::Gru { layers, head: Linear::new(store, "head", hid, n * h, seed)? }
            }
            ModelKind::Transformer => {
                if hid % TRANSFORMER_HEADS != 0 {
                    return Err(ModelError::Config(format!("model dim {hid} not divisible by {TRANSFORMER_HEADS} heads")));
                }
                let input = Linear::new(store, "input", n, hid, seed)?;
                let layers = (0..spec.layers.max(1))
                    .map(|l| EncoderLayer::new(store, &format!("enc{l}"), hid, TRANSFORMER_HEADS, TRANSFORMER_FF, seed))
                    .collect::<Result<_, _>>()?;
                Network::Transformer { input, layers, head: Linear::new(store, "head", hid, n * h, seed)? }
            }
            ModelKind::GruGcn => Network::GruGcn {
                gru: GruLayer::new(store, "gru", 1, hid, seed)?,
                gcn: GcnLayer::new(store, "gcn", hid, hid, seed)?,
                head: Linear::new(store, "head", hid, h, seed)?,
            },
            ModelKind::Tgcn => Network::Tgcn {
                gcn1: GcnLayer::new(store, "gcn1", 1, TGCN_GCN_WIDTH, seed)?,
                gcn2: GcnLayer::new(store, "gcn2", TGCN_GCN_WIDTH, TGCN_GCN_WIDTH, seed)?,
                gru: GruLayer::new(store, "gru", TGCN_GCN_WIDTH, hid, seed)?,
                head: Linear::new(store, "head", hid, h, seed)?,
            },
            ModelKind::Var => return Err(ModelError::Config("VAR has no network".into())),
        })
    }

    /// Normalised `[B, N, C]` contexts to `[B, N, H]` forecasts.
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, adj: Option<&Tensor>, x: &Tensor, horizon: usize) -> Result<Var> {
        let (b, n, c) = dims3(x);
        match self {
            Network::Gru { layers, head } => {
                let mut seq = g.constant(time_major(x));
                let mut last = None;
                for (l, layer) in layers.iter().enumerate() {
                    let states = layer.run(g, p, seq)?;
                    last = states.last().copied();
                    if l + 1 < layers.len() {
                        seq = g.stack(&states)?;
                    }
                }
                let out = head.apply(g, p, last.expect("at least one step"))?;
                Ok(g.reshape(out, &[b, n, horizon])?)
            }
            Network::Transformer { input, layers, head } => {
                let xs = g.constant(batch_time_nodes(x));
                let d = p.get(input.w).shape()[1];
                let proj = input.apply(g, p, xs)?;
                let pe = g.constant(positional_encoding(c, d));
                let mut enc = g.add(proj, pe)?;
                for layer in layers {
                    enc = layer.apply(g, p, enc)?;
                }
                let pooled = g.mean(enc, 1)?;
                let out = head.apply(g, p, pooled)?;
                Ok(g.reshape(out, &[b, n, horizon])?)
            }
            Network::GruGcn { gru, gcn, head } => {
                let adj = g.constant(adj.ok_or(ModelError::MissingGraph(ModelKind::GruGcn))?.clone());
                let seq = time_major(x).reshape([c, b * n, 1])?;
                let seq = g.constant(seq);
                let states = gru.run(g, p, seq)?;
                let last = *states.last().expect("at least one step");
                let hs = g.reshape(last, &[b, n, gru.hidden])?;
                let mixed = gcn.apply(g, p, adj, hs)?;
                Ok(head.apply(g, p, mixed)?)
            }
            Network::Tgcn { gcn1, gcn2, gru, head } => {
                let adj = g.constant(adj.ok_or(ModelError::MissingGraph(ModelKind::Tgcn))?.clone());
                let seq = g.constant(time_major(x).reshape([c, b, n, 1])?);
                let s1 = gcn1.apply(g, p, adj, seq)?;
                let s2 = gcn2.apply(g, p, adj, s1)?;
                let flat = g.reshape(s2, &[c, b * n, TGCN_GCN_WIDTH])?;
                let states = gru.run(g, p, flat)?;
                let last = *states.last().expect("at least one step");
                let hs = g.reshape(last, &[b, n, gru.hidden])?;
                Ok(head.apply(g, p, hs)?)
            }
        }
    }
}
