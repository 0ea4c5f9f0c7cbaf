//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] replays the
//! nodes in reverse. A tape is single-use: build it, run backward once, read
//! gradients, then drop it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, gemm, strides_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Gelu(Var),
    SumLast(Var),
    SumAll(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    RmsNorm { x: Var, gain: Var, rinv: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, scale: f64, probs: Vec<f64> },
    Elementwise { x: Var, derivative: ScalarFn },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node from `len` on. Vars created after that point become
    /// invalid. Intended for forward-only loops that reuse a prefix.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        self.push_arc(op, Arc::new(value), node_op, requires_grad)
    }

    fn push_arc(&mut self, op: &'static str, value: Arc<Tensor>, node_op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node { value, op: node_op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push_arc("param", store.get(id).value.clone(), Op::Leaf, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.clone();
        self.push_arc("detach", value, Op::Leaf, false)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(ta.shape(), data)?, self.rg(&[a, b])));
        }
        let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::shapes(name, ta.shape(), tb.shape()))?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok((Tensor::new(&out, data)?, self.rg(&[a, b])))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v + c);
        let rg = self.rg(&[x]);
        self.push("add_scalar", t, Op::AddScalar(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::exp);
        let rg = self.rg(&[x]);
        self.push("exp", t, Op::Exp(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, gelu);
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn elementwise(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Var> {
        let t = self.map(x, f);
        let rg = self.rg(&[x]);
        self.push("elementwise", t, Op::Elementwise { x, derivative: Arc::new(derivative) }, rg)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        Tensor::new(tx.shape(), data).expect("map preserves shape")
    }

    /// Sums the last axis away. A rank-1 input yields a scalar.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        let data: Vec<f64> = tx.data().chunks(w).map(|r| r.iter().sum()).collect();
        let shape = &tx.shape()[..tx.rank().saturating_sub(1)];
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        self.push("sum_last", t, Op::SumLast(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `a @ b` (or `a @ bᵀ` with `trans_b`). `a` is `[..., m, k]`; `b` is
    /// either a shared `[k, n]` matrix or carries the same batch prefix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = MatDims::new(ta.shape(), tb.shape(), trans_b)?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        if dims.shared_b {
            gemm(dims.batch * dims.m, dims.k, dims.n, ta.data(), false, tb.data(), trans_b, 0.0, &mut out);
        } else {
            let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            for p in 0..dims.batch {
                gemm(
                    dims.m,
                    dims.k,
                    dims.n,
                    &ta.data()[p * sa..],
                    false,
                    &tb.data()[p * sb..],
                    trans_b,
                    0.0,
                    &mut out[p * sc..(p + 1) * sc],
                );
            }
        }
        let mut shape = ta.shape()[..ta.rank() - 1].to_vec();
        shape.push(dims.n);
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", t, Op::MatMul { a, b, trans_b }, rg)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(w) {
            softmax_row(row, None);
        }
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax(x), rg)
    }

    /// Softmax over the last axis where `allowed` (a `rows x cols` pattern
    /// broadcast over the leading axes) selects visible entries. Hidden
    /// entries get probability exactly zero, as with an additive −∞.
    pub fn softmax_masked(&mut self, x: Var, allowed: &[bool], rows: usize, cols: usize) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        if r < 2 || tx.shape()[r - 1] != cols || tx.shape()[r - 2] != rows || allowed.len() != rows * cols {
            return Err(Error::dim(
                "softmax_masked",
                format!("mask {rows}x{cols} does not fit logits {:?}", tx.shape()),
            ));
        }
        if let Some(i) = (0..rows).find(|&i| !allowed[i * cols..(i + 1) * cols].iter().any(|&a| a)) {
            return Err(Error::Contract(format!("attention mask row {i} has no visible position")));
        }
        let mut data = tx.data().to_vec();
        for (n, row) in data.chunks_mut(cols).enumerate() {
            let i = n % rows;
            softmax_row(row, Some(&allowed[i * cols..(i + 1) * cols]));
        }
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push("softmax_masked", t, Op::Softmax(x), rg)
    }

    /// `(x − mean) / sqrt(var + eps) * gain + bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        for p in [gain, bias] {
            if self.value(p).shape() != [w] {
                return Err(Error::shapes("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.len() / w;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(w).enumerate() {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// `x / sqrt(mean(x²) + eps) * gain` over the last axis; no centering.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.last_dim();
        if self.value(gain).shape() != [w] {
            return Err(Error::shapes("rms_norm", tx.shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).data();
        let mut rinv = Vec::with_capacity(tx.len() / w);
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(w).enumerate() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
            let ri = 1.0 / (ms + eps).sqrt();
            rinv.push(ri);
            for j in 0..w {
                out[r * w + j] = row[j] * ri * g[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain]);
        self.push("rms_norm", t, Op::RmsNorm { x, gain, rinv }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::clone(self.value(x)).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..tx.rank()).collect::<Vec<_>>() {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {:?}", tx.shape())));
        }
        let (data, shape) = permute_data(tx.data(), tx.shape(), axes);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        self.push("permute", t, Op::Permute { x, axes: axes.to_vec() }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} for rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let ok = s.len() == rank && (0..rank).all(|i| i == axis || s[i] == first.shape()[i]);
            if !ok {
                return Err(Error::shapes("concat", first.shape(), s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(xs);
        self.push("concat", t, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let mut shape = tx.shape().to_vec();
        let full = shape[axis];
        shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        self.push("slice", t, Op::Slice { x, axis, start }, rg)
    }

    /// Row lookup: output shape is `lead_shape ++ [width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead_shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::dim("embedding", format!("table must be 2-D, got {:?}", tt.shape())));
        }
        if lead_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding", format!("{} ids for shape {lead_shape:?}", ids.len())));
        }
        let (v, w) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { op: "embedding", id, bound: v });
            }
            data.extend_from_slice(tt.row(id));
        }
        let mut shape = lead_shape.to_vec();
        shape.push(w);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[table]);
        self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Mean negative log-likelihood of `targets` (one per row of the last
    /// axis), skipping rows whose target is `ignore`. With every row ignored
    /// the loss is zero and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != ignore).count();
        let denom = if count == 0 { 1.0 } else { count as f64 };
        self.cross_entropy_scaled(logits, targets, ignore, 1.0 / denom)
    }

    /// Sum of target NLLs times `scale`.
    pub fn cross_entropy_scaled(&mut self, logits: Var, targets: &[usize], ignore: usize, scale: f64) -> Result<Var> {
        let tl = self.value(logits);
        let c = tl.last_dim();
        let rows = tl.len() / c;
        if targets.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), tl.shape()),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[r];
            if t == ignore {
                row.fill(0.0);
                continue;
            }
            if t >= c {
                return Err(Error::Index { op: "cross_entropy", id: t, bound: c });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, scale, probs };
        self.push("cross_entropy", Tensor::scalar(total * scale), op, rg)
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`]; kept for
    /// leaves (inputs and parameters) only.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape(), g.clone()).expect("grad matches value shape"))
    }

    /// Adds every parameter gradient on this tape into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(Some(g)) = self.grads.get(v.0) {
                for (acc, x) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(nodes, grads, node, &g);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_row(row: &mut [f64], allowed: Option<&[bool]>) {
    let visible = |j: usize| allowed.is_none_or(|a| a[j]);
    let max = (0..row.len()).filter(|&j| visible(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for j in 0..row.len() {
        if visible(j) {
            row[j] = (row[j] - max).exp();
            sum += row[j];
        } else {
            row[j] = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, src, _| out[o] = data[src]);
    (out, out_shape)
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatDims {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || Error::shapes("matmul", a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(err());
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let shared_b = b.len() == 2;
        if !shared_b && b[..b.len() - 2] != a[..a.len() - 2] {
            return Err(err());
        }
        Ok(MatDims { batch, m, k, n, shared_b })
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// Accumulates a gradient computed at the broadcast output shape into an
/// operand of shape `own`.
fn reduce_into(dst: &mut [f64], own: &[usize], out: &[usize], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if own == out {
        for (o, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(o, gv);
        }
        return;
    }
    let s = broadcast_strides(own, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, i, _| dst[i] += f(o, g[o]));
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(d) = slot(nodes, grads, *a) {
                reduce_into(d, val(*a).shape(), out_shape, g, |_, gv| gv);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                reduce_into(d, val(*b).shape(), out_shape, g, |_, gv| sign * gv);
            }
        }
        Op::Mul(a, b) => {
            for (this, other) in [(*a, *b), (*b, *a)] {
                let (ts, to) = (val(this), val(other));
                if !nodes[this.0].requires_grad {
                    continue;
                }
                // value of `other` at each output position
                let other_at: Vec<f64> = if to.shape() == out_shape {
                    to.data().to_vec()
                } else {
                    let so = broadcast_strides(to.shape(), out_shape);
                    let zeros = vec![0; out_shape.len()];
                    let mut buf = vec![0.0; g.len()];
                    for_each_broadcast(out_shape, &so, &zeros, |o, i, _| buf[o] = to.data()[i]);
                    buf
                };
                let own = ts.shape().to_vec();
                if let Some(d) = slot(nodes, grads, this) {
                    reduce_into(d, &own, out_shape, g, |o, gv| gv * other_at[o]);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
        }
        Op::Exp(x) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).zip(y).for_each(|((d, gv), yv)| *d += gv * yv);
            }
        }
        Op::Gelu(x) => {
            let xs = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).zip(xs).for_each(|((d, gv), &xv)| *d += gv * gelu_grad(xv));
            }
        }
        Op::Elementwise { x, derivative } => {
            let xs = val(*x).data();
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).zip(xs).for_each(|((d, gv), &xv)| *d += gv * derivative(xv));
            }
        }
        Op::SumLast(x) => {
            let w = val(*x).last_dim();
            if let Some(d) = slot(nodes, grads, *x) {
                for (r, chunk) in d.chunks_mut(w).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += g[r]);
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (val(*a), val(*b));
            let dims = MatDims::new(ta.shape(), tb.shape(), *trans_b).expect("validated in forward");
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if let Some(d) = slot(nodes, grads, *a) {
                // dA = dC · op(B)ᵀ
                if dims.shared_b {
                    gemm(dims.batch * m, n, k, g, false, tb.data(), !*trans_b, 1.0, d);
                } else {
                    for p in 0..dims.batch {
                        gemm(m, n, k, &g[p * m * n..], false, &tb.data()[p * k * n..], !*trans_b, 1.0, &mut d[p * m * k..(p + 1) * m * k]);
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dC, or dCᵀ · A when B entered transposed
                let rows = if dims.shared_b { dims.batch * m } else { m };
                let reps = if dims.shared_b { 1 } else { dims.batch };
                for p in 0..reps {
                    let (ga, aa) = (&g[p * rows * n..], &ta.data()[p * rows * k..]);
                    let db = &mut d[p * k * n..(p + 1) * k * n];
                    if *trans_b {
                        gemm(n, rows, k, ga, true, aa, false, 1.0, db);
                    } else {
                        gemm(k, rows, n, aa, true, ga, false, 1.0, db);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let w = node.value.last_dim();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((dr, yr), gr) in d.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let w = node.value.last_dim();
            let gv = val(*gain).data();
            if let Some(d) = slot(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        d[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *bias) {
                for gr in g.chunks(w) {
                    for j in 0..w {
                        d[j] += gr[j];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; w];
                for (r, (dr, (gr, hr))) in d.chunks_mut(w).zip(g.chunks(w).zip(xhat.chunks(w))).enumerate() {
                    for j in 0..w {
                        dh[j] = gr[j] * gv[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / w as f64;
                    let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        dr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, rinv } => {
            let w = node.value.last_dim();
            let (xs, gv) = (val(*x).data(), val(*gain).data());
            if let Some(d) = slot(nodes, grads, *gain) {
                for (r, (gr, xr)) in g.chunks(w).zip(xs.chunks(w)).enumerate() {
                    for j in 0..w {
                        d[j] += gr[j] * xr[j] * rinv[r];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                for (r, (dr, (gr, xr))) in d.chunks_mut(w).zip(g.chunks(w).zip(xs.chunks(w))).enumerate() {
                    let ri = rinv[r];
                    let ux: f64 = (0..w).map(|j| gr[j] * gv[j] * xr[j]).sum();
                    let c = ri * ri * ri * ux / w as f64;
                    for j in 0..w {
                        dr[j] += ri * gr[j] * gv[j] - c * xr[j];
                    }
                }
            }
        }
        Op::Permute { x, axes } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (back, _) = permute_data(g, out_shape, &inverse);
                d.iter_mut().zip(back).for_each(|(d, v)| *d += v);
            }
        }
        Op::Concat { xs, axis } => {
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let mut offset = 0;
            for &v in xs {
                let len = val(v).shape()[*axis];
                if let Some(d) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = (o * out_shape[*axis] + offset) * inner;
                        let dst = o * len * inner;
                        for j in 0..len * inner {
                            d[dst + j] += g[src + j];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let full = val(*x).shape()[*axis];
            let len = out_shape[*axis];
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            if let Some(d) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        d[dst + j] += g[src + j];
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let w = val(*table).shape()[1];
            if let Some(d) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        d[id * w + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, ignore, scale, probs } => {
            let c = val(*logits).last_dim();
            if let Some(d) = slot(nodes, grads, *logits) {
                let s = g[0] * scale;
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for j in 0..c {
                        d[r * c + j] += s * probs[r * c + j];
                    }
                    d[r * c + t] -= s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap()).unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let dot = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(dot).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[4, 5])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_basic_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn masked_softmax_rejects_dead_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = tape.softmax_masked(x, &[true, false, false, false], 2, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let x = tape.constant(t(&[3], &[5.0, 5.0, 5.0])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::ones(&[2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let x = tape.constant(t(&[2], &[1.0, -1.0])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert!(tape.value(y).max_abs_diff(&t(&[2], &[1.0, -1.0])) < 1e-12);
    }

    #[test]
    fn rms_norm_edge_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2])).unwrap();
        let x = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let y = tape.rms_norm(x, g, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!(tape.value(y).max_abs_diff(&t(&[2], &[3.0 / r, 4.0 / r])) < 1e-15);
        assert!((tape.value(y).data()[0] - 0.8485).abs() < 1e-4);
        let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.rms_norm(x, g, 1e-6).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0; 96];
        logits[7] = 1000.0;
        let x = tape.leaf(t(&[1, 96], &logits)).unwrap();
        let l = tape.cross_entropy(x, &[7], 99).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let u = tape.leaf(Tensor::zeros(&[3, 96])).unwrap();
        let l = tape.cross_entropy(u, &[0, 5, 95], 99).unwrap();
        assert!((tape.value(l).item() - 96f64.ln()).abs() < 1e-12);
        assert!((96f64.ln() - 4.5643).abs() < 1e-4);

        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::ones(&[2, 4])).unwrap();
        let l = tape.cross_entropy(u, &[9, 9], 9).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(u).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));

        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::ones(&[1, 4])).unwrap();
        assert!(matches!(tape.cross_entropy(u, &[4], 9), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let s = tape.sum_all(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data)).unwrap();
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data()[..6], [1.0, 2.0, 5.0, 6.0, 7.0, 8.0]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }
}
