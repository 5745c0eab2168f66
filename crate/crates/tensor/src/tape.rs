use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::{matmul_into, MatRef, Scalar};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Identifier of a trainable parameter, chosen by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// Row replacement applied by [`Tape::patch_rows`].
#[derive(Clone, Debug)]
pub struct RowPatch<S = f32> {
    pub row: usize,
    pub value: Vec<S>,
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulCols(Var, Var),
    Sum(Var),
    Gelu { x: Var, dydx: Vec<S> },
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<u32> },
    Attention { qkv: Var, seqs: usize, seq_len: usize, heads: usize, probs: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, count: usize, probs: Vec<S> },
    PatchRows { x: Var, rows: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter on the tape.
#[derive(Clone, Debug)]
pub struct Gradients<S = f32> {
    by_param: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradients assembled by hand, e.g. after post-processing a backward pass.
    pub fn from_map(by_param: BTreeMap<ParamId, Tensor<S>>) -> Self {
        Self { by_param }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor<S>> {
        self.by_param
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Records eagerly evaluated operations for reverse-mode differentiation.
///
/// Ops are appended in evaluation order, which is a topological order of the
/// graph; [`Tape::backward`] walks it once in reverse and consumes the tape.
pub struct Tape<S = f32> {
    id: u32,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::lit(0.797_884_560_802_865_4);
    let a = S::lit(0.044_715);
    let half = S::lit(0.5);
    let three = S::lit(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let du = c * (S::one() + three * a * x * x);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * du;
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(TensorError::NotOnTape);
        }
        self.nodes.get(v.idx as usize).ok_or(TensorError::NotOnTape)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<S>> {
        Ok(&self.node(v)?.value)
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, kind: Op<S>, requires_grad: bool) -> Result<Var> {
        check_finite(op, &value)?;
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op: kind, requires_grad });
        Ok(Var { tape: self.id, idx })
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx as usize].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Trainable leaf; [`Tape::backward`] reports its gradient under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor<S>) -> Result<Var> {
        self.push("param", t, Op::Param(id), true)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(TensorError::ShapeMismatch { op: "matmul_bt", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(MatRef::new(ta.data(), m, k), MatRef::t(tb.data(), n, k), &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul_bt", Tensor::new([m, n], out)?, Op::MatMulBt(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    /// Adds a `[n]` bias to every row of `x` (last axis `n`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(bias)?.value);
        if tb.ndim() != 1 || tx.last_dim() != tb.len() {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: tx.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let mut out = tx.clone();
        let n = tb.len();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", out, Op::AddBias(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        let t = self.node(x)?.value.map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, c), rg)
    }

    /// Multiplies column `j` of every row by `m[j]`.
    pub fn mul_cols(&mut self, x: Var, m: Var) -> Result<Var> {
        let (tx, tm) = (&self.node(x)?.value, &self.node(m)?.value);
        if tm.ndim() != 1 || tx.last_dim() != tm.len() {
            return Err(TensorError::ShapeMismatch { op: "mul_cols", lhs: tx.shape().to_vec(), rhs: tm.shape().to_vec() });
        }
        let mut out = tx.clone();
        let n = tm.len();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &s) in row.iter_mut().zip(tm.data()) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, m]);
        self.push("mul_cols", out, Op::MulCols(x, m), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.node(x)?.value.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        if n == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (y, dydx): (Vec<S>, Vec<S>) = tx.data().iter().map(|&v| gelu_parts(v)).unzip();
        let t = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu { x, dydx }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.node(x)?.value.map(|v| S::one() / (S::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push("sigmoid", t, Op::Sigmoid(x), rg)
    }

    /// Normalizes each vector along the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (&self.node(x)?.value, &self.node(gamma)?.value, &self.node(beta)?.value);
        let d = tx.last_dim();
        if tx.ndim() == 0 || d < 2 {
            return Err(TensorError::Invalid(format!("layer_norm needs last extent >= 2, got {:?}", tx.shape())));
        }
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: tg.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let eps = S::lit(eps);
        let inv_d = S::lit(1.0 / d as f64);
        let rows = tx.rows();
        let mut xhat = vec![S::zero(); tx.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.len()];
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().copied().sum::<S>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let base = r * d;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[base + j] = h;
                out[base + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax", axis, shape });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * n * inner + a * inner + i;
                let mut mx = out[at(0)];
                for a in 1..n {
                    mx = mx.max(out[at(a)]);
                }
                let mut total = S::zero();
                for a in 0..n {
                    let e = (out[at(a)] - mx).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..n {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax { x, axis }, rg)
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = &self.node(table)?.value;
        if tt.ndim() != 2 {
            return Err(TensorError::Invalid(format!("embedding table must be 2-D, got {:?}", tt.shape())));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::Invalid(format!("token id {id} out of range for vocab {v}")));
            }
            out.extend_from_slice(tt.row(id as usize));
        }
        let t = Tensor::new([ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Causal multi-head self-attention over packed `[seqs * seq_len, 3 * d]`
    /// query/key/value rows. Returns `[seqs * seq_len, d]` with heads
    /// concatenated along the last axis.
    ///
    /// Each query only reads keys at or before its own position, so the rows
    /// of a sequence prefix are computed exactly as if the sequence ended there.
    pub fn causal_attention(&mut self, qkv: Var, seqs: usize, seq_len: usize, heads: usize) -> Result<Var> {
        let tq = &self.node(qkv)?.value;
        if tq.ndim() != 2 || tq.shape()[0] != seqs * seq_len || tq.shape()[1] % 3 != 0 {
            return Err(TensorError::Invalid(format!("attention input {:?} for {seqs}x{seq_len}", tq.shape())));
        }
        let d = tq.shape()[1] / 3;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("d_model {d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let q = tq.data();
        let w = 3 * d;
        let t = seq_len;
        let mut probs = vec![S::zero(); seqs * heads * t * t];
        let mut out = vec![S::zero(); seqs * t * d];
        let mut scores = vec![S::zero(); t];
        for b in 0..seqs {
            for h in 0..heads {
                let pbase = (b * heads + h) * t * t;
                for i in 0..t {
                    let qi = &q[(b * t + i) * w + h * dh..][..dh];
                    let mut mx = S::neg_infinity();
                    for j in 0..=i {
                        let kj = &q[(b * t + j) * w + d + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    let mut total = S::zero();
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - mx).exp();
                        total += *s;
                    }
                    let prow = &mut probs[pbase + i * t..][..t];
                    let orow = &mut out[(b * t + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / total;
                        prow[j] = p;
                        let vj = &q[(b * t + j) * w + 2 * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let tt = Tensor::new([seqs * t, d], out)?;
        let rg = self.rg(&[qkv]);
        self.push("causal_attention", tt, Op::Attention { qkv, seqs, seq_len, heads, probs }, rg)
    }

    /// Mean next-token cross-entropy (natural log) over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let tl = &self.node(logits)?.value;
        if tl.ndim() != 2 || tl.shape()[0] != targets.len() {
            return Err(TensorError::Invalid(format!("logits {:?} vs {} targets", tl.shape(), targets.len())));
        }
        let v = tl.shape()[1];
        let mut total = 0.0f64;
        let mut count = 0usize;
        let mut probs = Vec::new();
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(tgt) = *tgt {
                if tgt as usize >= v {
                    return Err(TensorError::Invalid(format!("target {tgt} out of range for vocab {v}")));
                }
                let row = tl.row(r);
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let start = probs.len();
                probs.extend(row.iter().map(|&z| (z - mx).exp()));
                let sum: S = probs[start..].iter().copied().sum();
                let lse = mx + sum.ln();
                let inv = S::one() / sum;
                probs[start..].iter_mut().for_each(|p| *p *= inv);
                total += (lse - row[tgt as usize]).as_f64();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy without targets".into()));
        }
        let loss = S::lit(total / count as f64);
        let rg = self.rg(&[logits]);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), count, probs }, rg)
    }

    /// Copy of a `[rows, d]` value with the listed rows overwritten, applied in
    /// order. Gradient does not flow into overwritten rows.
    pub fn patch_rows(&mut self, x: Var, patches: &[RowPatch<S>]) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let d = tx.last_dim();
        let mut out = tx.clone();
        let rows = out.rows();
        for p in patches {
            if p.row >= rows {
                return Err(TensorError::Invalid(format!("patch row {} out of range ({rows} rows)", p.row)));
            }
            if p.value.len() != d {
                return Err(TensorError::ShapeMismatch { op: "patch_rows", lhs: vec![d], rhs: vec![p.value.len()] });
            }
            out.row_mut(p.row).copy_from_slice(&p.value);
        }
        let rg = self.rg(&[x]);
        self.push("patch_rows", out, Op::PatchRows { x, rows: patches.iter().map(|p| p.row).collect() }, rg)
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    ///
    /// Every parameter recorded on the tape gets an entry, zero if the loss
    /// does not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(TensorError::NotScalar(ln.value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.idx as usize] = Some(vec![S::one()]);
        let nodes = &self.nodes;

        for idx in (0..=loss.idx as usize).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            // Params keep their gradient for collection below.
            if matches!(node.op, Op::Param(_)) {
                grads[idx] = Some(g);
                continue;
            }
            backward_node(nodes, node, &g, &mut grads)?;
        }

        let mut by_param = BTreeMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let data = grads[idx].take().unwrap_or_else(|| vec![S::zero(); node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data)?;
                check_finite("backward", &t)?;
                match by_param.entry(id) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(t);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        // same parameter bound twice: gradients add
                        let acc: &mut Tensor<S> = e.get_mut();
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Dot product with eight fixed partial sums, reduced in a fixed order, so
/// the result depends only on the two operands.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const L: usize = 8;
    let mut acc = [S::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], alpha: S, x: &[S]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

fn grad_slot<'g, S: Scalar>(nodes: &[Node<S>], grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
    let node = &nodes[v.idx as usize];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.idx as usize].get_or_insert_with(|| vec![S::zero(); len]))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
    let val = |v: Var| &nodes[v.idx as usize].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                // dA = G B^T
                matmul_into(MatRef::new(g, m, n), MatRef::t(tb.data(), k, n), ga, true);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                // dB = A^T G
                matmul_into(MatRef::t(ta.data(), m, k), MatRef::new(g, m, n), gb, true);
            }
        }
        Op::MatMulBt(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                // dA = G B
                matmul_into(MatRef::new(g, m, n), MatRef::new(tb.data(), n, k), ga, true);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                // dB = G^T A
                matmul_into(MatRef::t(g, m, n), MatRef::new(ta.data(), m, k), gb, true);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_slot(nodes, grads, *bias) {
                let n = gb.len();
                for row in g.chunks_exact(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *d += gg * y;
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for ((d, &gg), &x) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *d += gg * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (d, &gg) in gx.iter_mut().zip(g) {
                    *d += gg * *c;
                }
            }
        }
        Op::MulCols(x, m) => {
            let (tx, tm) = (val(*x), val(*m));
            let n = tm.len();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (grow, drow) in g.chunks_exact(n).zip(gx.chunks_exact_mut(n)) {
                    for ((d, &gg), &s) in drow.iter_mut().zip(grow).zip(tm.data()) {
                        *d += gg * s;
                    }
                }
            }
            if let Some(gm) = grad_slot(nodes, grads, *m) {
                for (grow, xrow) in g.chunks_exact(n).zip(tx.data().chunks_exact(n)) {
                    for ((d, &gg), &xv) in gm.iter_mut().zip(grow).zip(xrow) {
                        *d += gg * xv;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let s = g[0];
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Gelu { x, dydx } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for ((d, &gg), &dy) in gx.iter_mut().zip(g).zip(dydx) {
                    *d += gg * dy;
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for ((d, &gg), &yv) in gx.iter_mut().zip(g).zip(y.data()) {
                    *d += gg * yv * (S::one() - yv);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = val(*gamma).len();
            let tg = val(*gamma).data().to_vec();
            if let Some(gg) = grad_slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((acc, &gy), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                        *acc += gy * h;
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *beta) {
                for grow in g.chunks_exact(d) {
                    add_into(gb, grow);
                }
            }
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let inv_d = S::lit(1.0 / d as f64);
                let mut dh = vec![S::zero(); d];
                for (r, ((grow, hrow), xrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..d {
                        dh[j] = grow[j] * tg[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * hrow[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    let rs = rstd[r];
                    for j in 0..d {
                        xrow[j] += rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * n * inner + a * inner + i;
                        let mut s = S::zero();
                        for a in 0..n {
                            s += yd[at(a)] * g[at(a)];
                        }
                        for a in 0..n {
                            gx[at(a)] += yd[at(a)] * (g[at(a)] - s);
                        }
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = grad_slot(nodes, grads, *table) {
                let d = val(*table).shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id as usize * d..][..d], &g[r * d..][..d]);
                }
            }
        }
        Op::Attention { qkv, seqs, seq_len, heads, probs } => {
            let tq = val(*qkv);
            if let Some(gq) = grad_slot(nodes, grads, *qkv) {
                attention_backward(tq.data(), probs, g, gq, *seqs, *seq_len, *heads);
            }
        }
        Op::CrossEntropy { logits, targets, count, probs } => {
            let tl = val(*logits);
            if let Some(gl) = grad_slot(nodes, grads, *logits) {
                let v = tl.shape()[1];
                let scale = g[0] / S::lit(*count as f64);
                let mut prows = probs.chunks_exact(v);
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = *tgt else { continue };
                    let prow = prows.next().expect("one probability row per target");
                    let grow = &mut gl[r * v..][..v];
                    for (d, &p) in grow.iter_mut().zip(prow) {
                        *d += p * scale;
                    }
                    grow[tgt as usize] -= scale;
                }
            }
        }
        Op::PatchRows { x, rows } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let d = node.value.last_dim();
                let mut masked = g.to_vec();
                for &r in rows {
                    masked[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = S::zero());
                }
                add_into(gx, &masked);
            }
        }
    }
    Ok(())
}

fn attention_backward<S: Scalar>(qkv: &[S], probs: &[S], g: &[S], gq: &mut [S], seqs: usize, t: usize, heads: usize) {
    let w = qkv.len() / (seqs * t);
    let d = w / 3;
    let dh = d / heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut dp = vec![S::zero(); t];
    let mut dq = vec![S::zero(); dh];
    for b in 0..seqs {
        for h in 0..heads {
            let pbase = (b * heads + h) * t * t;
            let q_at = |i: usize| (b * t + i) * w + h * dh;
            let k_at = |j: usize| (b * t + j) * w + d + h * dh;
            let v_at = |j: usize| (b * t + j) * w + 2 * d + h * dh;
            for i in 0..t {
                let go = &g[(b * t + i) * d + h * dh..][..dh];
                let prow = &probs[pbase + i * t..][..t];
                let mut sum_pdp = S::zero();
                for j in 0..=i {
                    dp[j] = dot(go, &qkv[v_at(j)..][..dh]);
                    sum_pdp += prow[j] * dp[j];
                    // dV_j += p_ij * dout_i
                    axpy(&mut gq[v_at(j)..][..dh], prow[j], go);
                }
                dq.iter_mut().for_each(|x| *x = S::zero());
                let qi = &qkv[q_at(i)..][..dh];
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - sum_pdp) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    // dQ_i += ds * k_j ; dK_j += ds * q_i
                    axpy(&mut dq, ds, &qkv[k_at(j)..][..dh]);
                    axpy(&mut gq[k_at(j)..][..dh], ds, qi);
                }
                add_into(&mut gq[q_at(i)..][..dh], &dq);
            }
        }
    }
}
