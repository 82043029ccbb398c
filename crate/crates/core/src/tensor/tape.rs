use std::collections::HashMap;

use super::gemm::gemm;
use super::{axis_split, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct GruSaved {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Abs { a: usize },
    Square { a: usize },
    Softmax { a: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Mean { a: usize, axis: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    LayerNorm { a: usize, rstd: Vec<f64> },
    NodeMix { adj: usize, x: usize },
    GruCell { xw: usize, step: usize, h: usize, w: usize, b: usize, saved: Box<GruSaved> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run tape. Nodes are appended in evaluation order, which is
/// already a topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// Leaf gradients produced by [`Graph::backward`]. Interior gradients are
/// released as soon as they have been propagated.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients indexed by `ParamId`, `None` for parameters the loss does
    /// not depend on.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for &(pid, node) in &self.params {
            out[pid.0] = self.by_node[node].clone();
        }
        out
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// Broadcast plan for binary elementwise ops: the smaller operand's shape
/// must equal a suffix of the larger one and is tiled over the leading axes.
#[derive(Clone, Copy)]
struct Broadcast {
    out_len: usize,
    a_len: usize,
    b_len: usize,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(mismatch(op, a, b));
    }
    let out_len: usize = long.iter().product();
    Ok((
        long.to_vec(),
        Broadcast { out_len, a_len: a.iter().product(), b_len: b.iter().product() },
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sums the nonzero terms `w_k * x_k` in ascending value order, so the
/// result does not depend on how the terms were enumerated.
fn ordered_sum(buf: &mut Vec<f64>) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the tape so it can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    // ----- forward ops -------------------------------------------------

    /// Matrix product over the last two axes. Leading (batch) axes must
    /// either match or be absent on one side, which is then shared.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba.is_empty() || bb.is_empty() || ba == bb) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch_dims = if ba.is_empty() { bb } else { ba };
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let nb: usize = batch_dims.iter().product();
        let mut out = vec![0.0; nb * m * n];
        let (xa, xb) = (self.val(a.0).data(), self.val(b.0).data());
        if bb.is_empty() {
            gemm(nb * m, k, n, xa, false, xb, false, 0.0, &mut out);
        } else {
            for i in 0..nb {
                let ai = if ba.is_empty() { xa } else { &xa[i * m * k..(i + 1) * m * k] };
                gemm(
                    m,
                    k,
                    n,
                    ai,
                    false,
                    &xb[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a: a.0, b: b.0 }, ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let (xa, xb) = (self.val(a.0).data(), self.val(b.0).data());
        let data = (0..bc.out_len).map(|i| f(xa[i % bc.a_len], xb[i % bc.b_len])).collect();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.val(a.0);
        let t = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&x| f(x)).collect() };
        let ng = self.ng(a.0);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a: a.0 })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.val(a.0);
        if axis >= src.shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", src.shape)));
        }
        let (outer, len, inner) = axis_split(&src.shape, axis);
        let mut out = src.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor { shape: src.shape.clone(), data: out };
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Softmax { a: a.0, axis }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.val(p.0);
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let op = Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis };
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            reshaped.push(self.reshape(p, &s)?);
        }
        self.concat(&reshaped, 0)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.val(a.0);
        if axis >= src.shape.len() || start + len > src.shape[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}..{}] on axis {axis} of {:?}", start + len, src.shape),
            ));
        }
        let (outer, full, inner) = axis_split(&src.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src.data[base..base + len * inner]);
        }
        let mut shape = src.shape.clone();
        shape[axis] = len;
        let ng = self.ng(a.0);
        Ok(self.push(Tensor { shape, data }, Op::Slice { a: a.0, axis, start }, ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let src = self.val(a.0);
        let r = src.shape.len();
        if r < 2 {
            return Err(invalid("transpose", format!("needs rank >= 2, got {:?}", src.shape)));
        }
        let (m, n) = (src.shape[r - 2], src.shape[r - 1]);
        let nb = src.data.len() / (m * n).max(1);
        let mut data = vec![0.0; src.data.len()];
        for b in 0..nb {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[off + j * m + i] = src.data[off + i * n + j];
                }
            }
        }
        let mut shape = src.shape.clone();
        shape.swap(r - 2, r - 1);
        let ng = self.ng(a.0);
        Ok(self.push(Tensor { shape, data }, Op::Transpose { a: a.0 }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a.0).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Reshape { a: a.0 }, ng))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.val(a.0);
        if axis >= src.shape.len() {
            return Err(invalid("mean", format!("axis {axis} out of range for {:?}", src.shape)));
        }
        let (outer, len, inner) = axis_split(&src.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src.data[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = src.shape.clone();
        shape.remove(axis);
        let ng = self.ng(a.0);
        Ok(self.push(Tensor { shape, data }, Op::Mean { a: a.0, axis }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a.0).data.iter().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.val(a.0);
        let s: f64 = v.data.iter().sum::<f64>() / v.data.len().max(1) as f64;
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::MeanAll { a: a.0 }, ng)
    }

    /// Normalises over the last axis to zero mean and unit variance
    /// (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let src = self.val(a.0);
        let d = *src.shape.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if d == 0 {
            return Err(invalid("layer_norm", "empty last axis"));
        }
        let rows = src.data.len() / d;
        let mut data = vec![0.0; src.data.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &src.data[r * d..(r + 1) * d];
            let mu = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mu) * s;
            }
        }
        let t = Tensor { shape: src.shape.clone(), data };
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::LayerNorm { a: a.0, rstd }, ng))
    }

    /// Left-multiplies every `[n, f]` block of `x` (shape `[..., n, f]`) by
    /// the `[n, n]` matrix `adj`. Each output element sums its nonzero terms
    /// in sorted order, so relabelling nodes permutes the result exactly.
    pub fn node_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj), self.shape(x));
        if sa.len() != 2 || sa[0] != sa[1] || sx.len() < 2 || sx[sx.len() - 2] != sa[0] {
            return Err(mismatch("node_mix", sa, sx));
        }
        let n = sa[0];
        let f = sx[sx.len() - 1];
        let (wa, xv) = (self.val(adj.0), self.val(x.0));
        let blocks = xv.data.len() / (n * f).max(1);
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|k| {
                        let w = wa.data[i * n + k];
                        (w != 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        let mut out = vec![0.0; xv.data.len()];
        let mut buf = Vec::with_capacity(n);
        for b in 0..blocks {
            let xb = &xv.data[b * n * f..(b + 1) * n * f];
            let ob = &mut out[b * n * f..(b + 1) * n * f];
            for (i, row) in rows.iter().enumerate() {
                for j in 0..f {
                    buf.clear();
                    buf.extend(row.iter().map(|&(k, w)| w * xb[k * f + j]));
                    ob[i * f + j] = ordered_sum(&mut buf);
                }
            }
        }
        let t = Tensor { shape: xv.shape.clone(), data: out };
        let ng = self.ng(adj.0) || self.ng(x.0);
        Ok(self.push(t, Op::NodeMix { adj: adj.0, x: x.0 }, ng))
    }

    /// One GRU step (gate order reset, update, candidate).
    ///
    /// `xw` holds precomputed input projections for every step, shape
    /// `[steps, rows, 3h]` with input biases folded in; `step` selects the
    /// slice. `h` is `[rows, h]`, `w` is `[h, 3h]`, `b` is `[3h]`.
    /// Returns `(1 - z) * n + z * h`.
    pub fn gru_cell(&mut self, xw: Var, step: usize, h: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sh, sw, sb) = (self.shape(xw), self.shape(h), self.shape(w), self.shape(b));
        if sh.len() != 2 || sx.len() != 3 || step >= sx[0] {
            return Err(mismatch("gru_cell", sx, sh));
        }
        let (rows, hd) = (sh[0], sh[1]);
        if sx[1] != rows || sx[2] != 3 * hd || sw != [hd, 3 * hd] || sb != [3 * hd] {
            return Err(invalid(
                "gru_cell",
                format!("xw {sx:?}, h {sh:?}, w {sw:?}, b {sb:?} are inconsistent"),
            ));
        }
        let g3 = 3 * hd;
        let hv = self.val(h.0).data();
        let bv = self.val(b.0).data();
        let mut hw = vec![0.0; rows * g3];
        for row in hw.chunks_exact_mut(g3) {
            row.copy_from_slice(bv);
        }
        gemm(rows, hd, g3, hv, false, self.val(w.0).data(), false, 1.0, &mut hw);
        let xs = &self.val(xw.0).data()[step * rows * g3..(step + 1) * rows * g3];
        let cells = rows * hd;
        let mut saved = GruSaved {
            r: vec![0.0; cells],
            z: vec![0.0; cells],
            n: vec![0.0; cells],
            hn: vec![0.0; cells],
        };
        let mut out = vec![0.0; cells];
        for r in 0..rows {
            let (xr, hr) = (&xs[r * g3..(r + 1) * g3], &hw[r * g3..(r + 1) * g3]);
            for j in 0..hd {
                let c = r * hd + j;
                let rg = sigmoid(xr[j] + hr[j]);
                let zg = sigmoid(xr[hd + j] + hr[hd + j]);
                let hn = hr[2 * hd + j];
                let ng = (xr[2 * hd + j] + rg * hn).tanh();
                out[c] = ng + zg * (hv[c] - ng);
                saved.r[c] = rg;
                saved.z[c] = zg;
                saved.n[c] = ng;
                saved.hn[c] = hn;
            }
        }
        let needs = [xw, h, w, b].iter().any(|v| self.ng(v.0));
        let op = Op::GruCell { xw: xw.0, step, h: h.0, w: w.0, b: b.0, saved: Box::new(saved) };
        Ok(self.push(Tensor { shape: vec![rows, hd], data: out }, op, needs))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Each node is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Detached(loss.0));
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if self.val(loss.0).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }

        let by_node = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.needs_grad => {
                    Some(Tensor { shape: node.value.shape.clone(), data: g })
                }
                (None, Op::Leaf) if node.needs_grad => Some(Tensor::zeros(node.value.shape.clone())),
                _ => None,
            })
            .collect();
        let params = self.params.iter().map(|(&pid, v)| (pid, v.0)).collect();
        Ok(Gradients { by_node, params })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = Acc { graph: self, grads };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.matmul_backward(*a, *b, g, &mut acc),
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let (la, lb) = (self.val(*a).numel(), self.val(*b).numel());
                acc.add(*a, &fold(g, la, 1.0));
                acc.add(*b, &fold(g, lb, sign));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.val(*a).data(), self.val(*b).data());
                let (la, lb) = (xa.len(), xb.len());
                if self.ng(*a) {
                    let ga: Vec<f64> = (0..g.len()).map(|i| g[i] * xb[i % lb]).collect();
                    acc.add(*a, &fold(&ga, la, 1.0));
                }
                if self.ng(*b) {
                    let gb: Vec<f64> = (0..g.len()).map(|i| g[i] * xa[i % la]).collect();
                    acc.add(*b, &fold(&gb, lb, 1.0));
                }
            }
            Op::Scale { a, c } => acc.add(*a, &g.iter().map(|v| v * c).collect::<Vec<_>>()),
            Op::AddScalar { a } | Op::Reshape { a } => acc.add(*a, g),
            Op::Sigmoid { a } => {
                let d: Vec<f64> = g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc.add(*a, &d);
            }
            Op::Tanh { a } => {
                let d: Vec<f64> = g.iter().zip(&out.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc.add(*a, &d);
            }
            Op::Relu { a } => {
                let x = self.val(*a).data();
                let d: Vec<f64> =
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                acc.add(*a, &d);
            }
            Op::Abs { a } => {
                let x = self.val(*a).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                    .collect();
                acc.add(*a, &d);
            }
            Op::Square { a } => {
                let x = self.val(*a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                acc.add(*a, &d);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc.add(*a, &d);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&out.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).shape[*axis];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc.add(p, &d);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = axis_split(&self.val(*a).shape, *axis);
                let len = out.shape[*axis];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    acc.add_at(*a, base, &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Transpose { a } => {
                let r = out.shape.len();
                let (m, n) = (out.shape[r - 2], out.shape[r - 1]);
                let nb = g.len() / (m * n).max(1);
                let mut d = vec![0.0; g.len()];
                for b in 0..nb {
                    let off = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            d[off + j * m + i] = g[off + i * n + j];
                        }
                    }
                }
                acc.add(*a, &d);
            }
            Op::Mean { a, axis } => {
                let (outer, len, inner) = axis_split(&self.val(*a).shape, *axis);
                let inv = 1.0 / len as f64;
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut d[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (x, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x = gv * inv;
                        }
                    }
                }
                acc.add(*a, &d);
            }
            Op::SumAll { a } => acc.add(*a, &vec![g[0]; self.val(*a).numel()]),
            Op::MeanAll { a } => {
                let n = self.val(*a).numel();
                acc.add(*a, &vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm { a, rstd } => {
                let d = *out.shape.last().unwrap();
                let y = &out.data;
                let mut dx = vec![0.0; y.len()];
                for (r, s) in rstd.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = s * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc.add(*a, &dx);
            }
            Op::NodeMix { adj, x } => {
                let n = self.val(*adj).shape[0];
                let xv = self.val(*x).data();
                let f = *out.shape.last().unwrap();
                let blocks = g.len() / (n * f).max(1);
                let w = self.val(*adj).data();
                if self.ng(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..blocks {
                        let off = b * n * f;
                        gemm(n, n, f, w, true, &g[off..off + n * f], false, 0.0, &mut dx[off..off + n * f]);
                    }
                    acc.add(*x, &dx);
                }
                if self.ng(*adj) {
                    let mut dw = vec![0.0; n * n];
                    for b in 0..blocks {
                        let off = b * n * f;
                        gemm(n, f, n, &g[off..off + n * f], false, &xv[off..off + n * f], true, 1.0, &mut dw);
                    }
                    acc.add(*adj, &dw);
                }
            }
            Op::GruCell { xw, step, h, w, b, saved } => {
                self.gru_backward(*xw, *step, *h, *w, *b, saved, g, &mut acc)
            }
        }
    }

    fn matmul_backward(&self, a: usize, b: usize, g: &[f64], acc: &mut Acc<'_>) {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (&ta.shape, &tb.shape);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let a_batched = sa.len() > 2;
        let b_batched = sb.len() > 2;
        let nb = if a_batched { ta.numel() / (m * k) } else { tb.numel() / (k * n) };
        if !b_batched {
            // a is [nb*m, k] against a shared [k, n].
            if self.ng(a) {
                let mut da = vec![0.0; nb * m * k];
                gemm(nb * m, n, k, g, false, tb.data(), true, 0.0, &mut da);
                acc.add(a, &da);
            }
            if self.ng(b) {
                let mut db = vec![0.0; k * n];
                gemm(k, nb * m, n, ta.data(), true, g, false, 0.0, &mut db);
                acc.add(b, &db);
            }
            return;
        }
        if self.ng(a) {
            let mut da = vec![0.0; ta.numel()];
            for i in 0..nb {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                if a_batched {
                    gemm(m, n, k, gi, false, bi, true, 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                } else {
                    gemm(m, n, k, gi, false, bi, true, 1.0, &mut da);
                }
            }
            acc.add(a, &da);
        }
        if self.ng(b) {
            let mut db = vec![0.0; tb.numel()];
            for i in 0..nb {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = if a_batched { &ta.data()[i * m * k..(i + 1) * m * k] } else { ta.data() };
                gemm(k, m, n, ai, true, gi, false, 0.0, &mut db[i * k * n..(i + 1) * k * n]);
            }
            acc.add(b, &db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        xw: usize,
        step: usize,
        h: usize,
        w: usize,
        b: usize,
        s: &GruSaved,
        g: &[f64],
        acc: &mut Acc<'_>,
    ) {
        let hv = self.val(h).data();
        let (rows, hd) = (self.val(h).shape[0], self.val(h).shape[1]);
        let g3 = 3 * hd;
        let mut dxs = vec![0.0; rows * g3];
        let mut dhw = vec![0.0; rows * g3];
        let mut dh = vec![0.0; rows * hd];
        for r in 0..rows {
            for j in 0..hd {
                let c = r * hd + j;
                let (rg, zg, ng, hn) = (s.r[c], s.z[c], s.n[c], s.hn[c]);
                let gc = g[c];
                dh[c] = gc * zg;
                let dn = gc * (1.0 - zg);
                let dz = gc * (hv[c] - ng);
                let dan = dn * (1.0 - ng * ng);
                let dar = dan * hn * rg * (1.0 - rg);
                let daz = dz * zg * (1.0 - zg);
                let o = r * g3;
                dxs[o + j] = dar;
                dxs[o + hd + j] = daz;
                dxs[o + 2 * hd + j] = dan;
                dhw[o + j] = dar;
                dhw[o + hd + j] = daz;
                dhw[o + 2 * hd + j] = dan * rg;
            }
        }
        acc.add_at(xw, step * rows * g3, &dxs);
        if self.ng(h) {
            gemm(rows, g3, hd, &dhw, false, self.val(w).data(), true, 1.0, &mut dh);
            acc.add(h, &dh);
        }
        if self.ng(w) {
            let mut dw = vec![0.0; hd * g3];
            gemm(hd, rows, g3, hv, true, &dhw, false, 0.0, &mut dw);
            acc.add(w, &dw);
        }
        if self.ng(b) {
            let mut db = vec![0.0; g3];
            for row in dhw.chunks_exact(g3) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            acc.add(b, &db);
        }
    }
}

/// Gradient accumulator used during the backward sweep.
struct Acc<'a> {
    graph: &'a Graph,
    grads: &'a mut [Option<Vec<f64>>],
}

impl Acc<'_> {
    fn add(&mut self, target: usize, contrib: &[f64]) {
        if !self.graph.nodes[target].needs_grad {
            return;
        }
        match &mut self.grads[target] {
            Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Adds `contrib` into `target`'s gradient starting at `offset`.
    fn add_at(&mut self, target: usize, offset: usize, contrib: &[f64]) {
        let node = &self.graph.nodes[target];
        if !node.needs_grad {
            return;
        }
        let buf = self.grads[target].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        buf[offset..offset + contrib.len()]
            .iter_mut()
            .zip(contrib)
            .for_each(|(b, c)| *b += c);
    }
}

/// Sums a broadcast gradient back down to an operand of `len` elements.
fn fold(g: &[f64], len: usize, sign: f64) -> Vec<f64> {
    if len == g.len() {
        return if sign == 1.0 { g.to_vec() } else { g.iter().map(|v| -v).collect() };
    }
    let mut d = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        d.iter_mut().zip(chunk).for_each(|(x, v)| *x += v);
    }
    if sign != 1.0 {
        d.iter_mut().for_each(|x| *x *= sign);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.value(s).item(), Some(0.5));
        assert_eq!(g.value(th).item(), Some(0.0));
    }

    #[test]
    fn softmax_uniform_and_normalised() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1., 1., 1.]));
        let y = g.softmax(x, 1).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_fn([4, 5], |i| (i as f64 * 1.7).sin() * 9.0));
        for axis in 0..2 {
            let y = g.softmax(x, axis).unwrap();
            let (outer, len, inner) = axis_split(g.shape(y), axis);
            let d = g.value(y).data();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|j| d[o * len * inner + j * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1., -2., 5.]));
        let l = g.sum_all(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.0));
        let l = g.scale(x, 2.0);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(TensorError::BackwardTwice)));
        g.reset();
        let x = g.variable(Tensor::scalar(1.0));
        let l = g.scale(x, 2.0);
        assert!(g.backward(l).is_ok());
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let mut g2 = Graph::new();
        assert!(matches!(g2.backward(x), Err(TensorError::Detached(_))));
    }

    #[test]
    fn broadcast_add_bias() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros([2, 3]));
        let b = g.variable(t(&[3], &[1., 2., 3.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 1., 2., 3.]);
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2., 2., 2.]);
        let bad = g.constant(Tensor::zeros([2]));
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::zeros([2, 3]));
        let _ = bad;
        let b2 = g2.constant(Tensor::zeros([2]));
        assert!(g2.add(x2, b2).is_err());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn([2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn([2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        let back = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn node_mix_identity_is_exact() {
        let mut g = Graph::new();
        let adj = g.constant(Tensor::eye(3));
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| (i as f64).sqrt() * 0.3 - 1.0));
        let y = g.node_mix(adj, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn gru_cell_matches_composed_ops() {
        let (rows, hd) = (3, 2);
        let xw = Tensor::from_fn([2, rows, 3 * hd], |i| (i as f64 * 0.7).sin());
        let h0 = Tensor::from_fn([rows, hd], |i| (i as f64 * 1.3).cos() * 0.5);
        let w = Tensor::from_fn([hd, 3 * hd], |i| (i as f64 * 0.4).sin() * 0.8);
        let b = Tensor::from_fn([3 * hd], |i| i as f64 * 0.05);

        let mut g = Graph::new();
        let (vx, vh, vw, vb) =
            (g.constant(xw.clone()), g.constant(h0.clone()), g.constant(w), g.constant(b));
        let fused = g.gru_cell(vx, 1, vh, vw, vb).unwrap();

        let xs = g.slice(vx, 0, 1, 1).unwrap();
        let xs = g.reshape(xs, &[rows, 3 * hd]).unwrap();
        let hw = g.matmul(vh, vw).unwrap();
        let hw = g.add(hw, vb).unwrap();
        let part = |g: &mut Graph, v: Var, i: usize| g.slice(v, 1, i * hd, hd).unwrap();
        let (xr, xz, xn) = (part(&mut g, xs, 0), part(&mut g, xs, 1), part(&mut g, xs, 2));
        let (hr, hz, hn) = (part(&mut g, hw, 0), part(&mut g, hw, 1), part(&mut g, hw, 2));
        let r = g.add(xr, hr).unwrap();
        let r = g.sigmoid(r);
        let z = g.add(xz, hz).unwrap();
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn).unwrap();
        let n = g.add(xn, rh).unwrap();
        let n = g.tanh(n);
        let d = g.sub(vh, n).unwrap();
        let zd = g.mul(z, d).unwrap();
        let composed = g.add(n, zd).unwrap();

        for (a, b) in g.value(fused).data().iter().zip(g.value(composed).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
