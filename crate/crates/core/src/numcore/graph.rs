//! Tape-based reverse-mode differentiation over whole-tensor operators.
//!
//! A [`Graph`] records every operator applied to its [`Var`]s in execution
//! order. [`Graph::backward`] replays the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf marked as
//! requiring gradients. Parameters are bound into a graph by copying their
//! current values; frozen parameters become constants, so no gradient is ever
//! computed for them.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Keys/values that precede a block of queries, e.g. a cached prompt prefix.
#[derive(Clone, Debug)]
pub struct PastKv {
    pub keys: Tensor,
    pub values: Tensor,
}

impl PastKv {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One independent attention problem inside a fused attention call.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub past: Option<Rc<PastKv>>,
    /// Query `i` sees every past key plus segment keys `0..=i`.
    pub causal: bool,
}

impl AttnSegment {
    fn past_len(&self) -> usize {
        self.past.as_ref().map_or(0, |p| p.len())
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that collects a gradient (used for input sensitivities and tests).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .as_matrix()
            .map_err(|e| Error::Dimension(format!("{what}: {e}")))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            a_t,
            self.value(b).data(),
            b_t,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, a_t, b_t }, rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::Dimension(format!(
                "bias of length {} for {cols} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            row.iter_mut().zip(&b).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push(t, Op::AddBias { x, bias }, rg, "add_bias")
    }

    /// `x * w + b` for a row-major batch of inputs.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn map(&mut self, x: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::from_parts(vx.shape().to_vec(), vx.data().iter().map(|v| f(*v)).collect());
        let rg = self.rg(&[x]);
        self.push(t, op, rg, name)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, s), "scale", |v| v * s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), "gelu", gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    // ---- reductions and normalization ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.value(x).data().to_vec();
        softmax_strided(&mut data, outer, len, inner);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Softmax { x, outer, len, inner },
            rg,
            "softmax",
        )
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Dimension("layer_norm affine length".into()));
        }
        let rows = vx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    /// Summed cross-entropy `-ln softmax(row)[target]` over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, classes) = v.as_matrix()?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|t| **t >= classes) {
            return Err(Error::Index(format!("class {t} outside 0..{classes}")));
        }
        let mut probs = v.data().to_vec();
        softmax_strided(&mut probs, rows, classes, 1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.matrix_dims(*p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension(format!("concat_rows: {c} vs {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let rows = self.matrix_dims(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.matrix_dims(*p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: {r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::Index(format!("columns {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![rows, len], data),
            Op::SliceCols { x, start },
            rg,
            "slice_cols",
        )
    }

    // ---- attention ----

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` share a width divisible by `heads`. Each segment attends
    /// independently; its keys are the segment's `past` rows (constants)
    /// followed by rows `k_start..k_start + k_len` of `k`. Query rows not
    /// covered by any segment are zero in the output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
    ) -> Result<Var> {
        let (qr, width) = self.matrix_dims(q, "attention q")?;
        let (kr, kw) = self.matrix_dims(k, "attention k")?;
        let (vr, vw) = self.matrix_dims(v, "attention v")?;
        if heads == 0 || width % heads != 0 || kw != width || vw != width || kr != vr {
            return Err(Error::Config(format!(
                "attention widths q={width} k={kw} v={vw} with {heads} heads"
            )));
        }
        for s in &segments {
            if s.q_start + s.q_len > qr || s.k_start + s.k_len > kr {
                return Err(Error::Index("attention segment out of range".into()));
            }
            if s.causal && s.q_len != s.k_len {
                return Err(Error::Config("causal segment needs q_len == k_len".into()));
            }
            if let Some(p) = &s.past {
                if p.keys.cols() != width || p.values.cols() != width || p.keys.rows() != p.values.rows() {
                    return Err(Error::Dimension("past key/value width".into()));
                }
            }
            if s.past_len() + s.k_len == 0 && s.q_len > 0 {
                return Err(Error::Dimension("attention over zero keys".into()));
            }
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; qr * width];
        let mut probs = Vec::new();
        for s in &segments {
            let past_len = s.past_len();
            let total = past_len + s.k_len;
            let key = |j: usize| -> &[f64] {
                if j < past_len {
                    s.past.as_ref().unwrap().keys.row(j)
                } else {
                    let r = s.k_start + j - past_len;
                    &kd[r * width..(r + 1) * width]
                }
            };
            let val = |j: usize| -> &[f64] {
                if j < past_len {
                    s.past.as_ref().unwrap().values.row(j)
                } else {
                    let r = s.k_start + j - past_len;
                    &vd[r * width..(r + 1) * width]
                }
            };
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * width..][cols.clone()];
                    let visible = if s.causal { past_len + i + 1 } else { total };
                    let base = probs.len();
                    probs.resize(base + total, 0.0);
                    let p = &mut probs[base..base + total];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let kj = &key(j)[cols.clone()];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        *pj = dot * scale;
                        max = max.max(*pj);
                    }
                    let mut denom = 0.0;
                    for pj in p.iter_mut().take(visible) {
                        *pj = (*pj - max).exp();
                        denom += *pj;
                    }
                    let orow = &mut out[(s.q_start + i) * width..][cols.clone()];
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        *pj /= denom;
                        let vj = &val(j)[cols.clone()];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += *pj * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::from_parts(vec![qr, width], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            rg,
            "attention",
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of all bound trainable parameters into `store`.
    pub fn export_grads(&self, store: &mut ParamStore) -> Result<()> {
        let mut bound: Vec<_> = self.bound.iter().collect();
        bound.sort();
        for (id, var) in bound {
            if let Some(g) = self.grad(*var) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (ar, ac) = va.as_matrix().expect("checked in forward");
                let (br, bc) = vb.as_matrix().expect("checked in forward");
                let (m, k) = if *a_t { (ac, ar) } else { (ar, ac) };
                let n = if *b_t { br } else { bc };
                if self.requires_grad(*a) {
                    let ga = self.grad_buf(*a, grads);
                    if *a_t {
                        // a is k×m: dA = B' * dC^T
                        gemm(k, n, m, vb.data(), *b_t, gy, true, ga, 1.0);
                    } else {
                        // dA = dC * B'^T
                        gemm(m, n, k, gy, false, vb.data(), !*b_t, ga, 1.0);
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_buf(*b, grads);
                    if *b_t {
                        // b is n×k: dB = dC^T * A'
                        gemm(n, m, k, gy, true, va.data(), *a_t, gb, 1.0);
                    } else {
                        // dB = A'^T * dC
                        gemm(k, m, n, va.data(), !*a_t, gy, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, grads, |g| add_into(g, gy));
                self.acc(*b, grads, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(*a, grads, |g| add_into(g, gy));
                self.acc(*b, grads, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc(*a, grads, |g| {
                    g.iter_mut().zip(gy).zip(vb).for_each(|((g, d), x)| *g += d * x)
                });
                self.acc(*b, grads, |g| {
                    g.iter_mut().zip(gy).zip(va).for_each(|((g, d), x)| *g += d * x)
                });
            }
            Op::AddBias { x, bias } => {
                self.acc(*x, grads, |g| add_into(g, gy));
                let cols = self.value(*bias).len();
                self.acc(*bias, grads, |g| {
                    for row in gy.chunks(cols.max(1)) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(*x, grads, |g| g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(*x, grads, |g| {
                    g.iter_mut()
                        .zip(gy)
                        .zip(vx)
                        .for_each(|((g, d), x)| if *x > 0.0 { *g += d })
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.acc(*x, grads, |g| {
                    g.iter_mut()
                        .zip(gy)
                        .zip(vx)
                        .for_each(|((g, d), x)| *g += d * gelu_grad(*x))
                });
            }
            Op::Tanh(x) => {
                self.acc(*x, grads, |g| {
                    g.iter_mut()
                        .zip(gy)
                        .zip(y)
                        .for_each(|((g, d), t)| *g += d * (1.0 - t * t))
                });
            }
            Op::Sigmoid(x) => {
                self.acc(*x, grads, |g| {
                    g.iter_mut()
                        .zip(gy)
                        .zip(y)
                        .for_each(|((g, d), s)| *g += d * s * (1.0 - s))
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.acc(*x, grads, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| y[at(j)] * gy[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(*x, grads);
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let dy = &gy[span.clone()];
                        let xh = &xhat[span.clone()];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = dy[c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = dy[c] * gv[c];
                            gx[span.start + c] += rs * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                self.acc(*gain, grads, |g| {
                    for (dy, xh) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            g[c] += dy[c] * xh[c];
                        }
                    }
                });
                self.acc(*bias, grads, |g| {
                    for dy in gy.chunks(cols) {
                        add_into(g, dy);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc(*p, grads, |g| add_into(g, &gy[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(*p, grads, |g| {
                        for r in 0..rows {
                            add_into(&mut g[r * w..(r + 1) * w], &gy[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                self.acc(*x, grads, |g| add_into(&mut g[start * cols..start * cols + gy.len()], gy));
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let w = node.value.cols();
                self.acc(*x, grads, |g| {
                    for (r, d) in gy.chunks(w.max(1)).enumerate() {
                        add_into(&mut g[r * cols + start..r * cols + start + w], d);
                    }
                });
            }
            Op::Reshape(x) => self.acc(*x, grads, |g| add_into(g, gy)),
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).as_matrix().expect("checked in forward");
                self.acc(*x, grads, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(*x, grads, |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = self.value(*logits).cols();
                self.acc(*logits, grads, |g| {
                    for (r, t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == *t { 1.0 } else { 0.0 };
                            g[r * classes + c] += gy[0] * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, segments, probs, gy, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let width = self.value(q).cols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let (need_q, need_k, need_v) = (self.requires_grad(q), self.requires_grad(k), self.requires_grad(v));
        let mut gq = vec![0.0; if need_q { qd.len() } else { 0 }];
        let mut gk = vec![0.0; if need_k { kd.len() } else { 0 }];
        let mut gv = vec![0.0; if need_v { vd.len() } else { 0 }];
        let mut pos = 0;
        let mut dp = Vec::new();
        for s in segments {
            let past_len = s.past_len();
            let total = past_len + s.k_len;
            let key = |j: usize| -> &[f64] {
                if j < past_len {
                    s.past.as_ref().unwrap().keys.row(j)
                } else {
                    let r = s.k_start + j - past_len;
                    &kd[r * width..(r + 1) * width]
                }
            };
            let val = |j: usize| -> &[f64] {
                if j < past_len {
                    s.past.as_ref().unwrap().values.row(j)
                } else {
                    let r = s.k_start + j - past_len;
                    &vd[r * width..(r + 1) * width]
                }
            };
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.q_len {
                    let p = &probs[pos..pos + total];
                    pos += total;
                    let visible = if s.causal { past_len + i + 1 } else { total };
                    let qrow = (s.q_start + i) * width;
                    let go = &gy[qrow..][cols.clone()];
                    dp.clear();
                    dp.resize(visible, 0.0);
                    let mut dot = 0.0;
                    for j in 0..visible {
                        let vj = &val(j)[cols.clone()];
                        let d: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dp[j] = d;
                        dot += d * p[j];
                        if need_v && j >= past_len {
                            let r = (s.k_start + j - past_len) * width;
                            gv[r..][cols.clone()]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(g, o)| *g += p[j] * o);
                        }
                    }
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        if need_q {
                            let kj = &key(j)[cols.clone()];
                            gq[qrow..][cols.clone()]
                                .iter_mut()
                                .zip(kj)
                                .for_each(|(g, x)| *g += ds * x);
                        }
                        if need_k && j >= past_len {
                            let r = (s.k_start + j - past_len) * width;
                            let qi = &qd[qrow..][cols.clone()];
                            gk[r..][cols.clone()]
                                .iter_mut()
                                .zip(qi)
                                .for_each(|(g, x)| *g += ds * x);
                        }
                    }
                }
            }
        }
        if need_q {
            self.acc(q, grads, |g| add_into(g, &gq));
        }
        if need_k {
            self.acc(k, grads, |g| add_into(g, &gk));
        }
        if need_v {
            self.acc(v, grads, |g| add_into(g, &gv));
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut [f64] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if self.requires_grad(v) {
            f(self.grad_buf(v, grads));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_strided(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                denom += e;
            }
            for j in 0..len {
                data[at(j)] /= denom;
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reverse pass plus gradient export into `store`. Frozen parameters are
/// bound as constants and never receive gradients.
pub fn backward(g: &mut Graph, loss: Var, store: &mut ParamStore) -> Result<()> {
    g.backward(loss)?;
    g.export_grads(store)
}
