use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, S),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { src: Var, rows: Arc<[usize]> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<S> },
    SoftmaxRows(Var),
    BiasLookup { table: Var, buckets: Arc<[u32]>, head: usize },
    Sum(Var),
    HuberSum { pred: Var, residual: Vec<S>, mask: Vec<bool>, delta: S },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Computation tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    trainable: Vec<bool>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), trainable: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.trainable.push(false);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input: receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.trainable[v.0] = true;
        v
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable input, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul {}x{} by {}x{}", m, k, k2, n));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), S::zero(), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul_nt {}x{} by ({}x{})^T", m, k, n, k2));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), S::zero(), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("{} of {:?} and {:?}", what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        let tb = self.value(bias);
        if tb.numel() != c {
            return Err(shape_err!("row bias of {} elements for {} columns", tb.numel(), c));
        }
        let b = tb.data().to_vec();
        let tx = self.value(x);
        let data = tx.data().chunks(c).flat_map(|row| row.iter().zip(&b).map(|(&v, &w)| v + w)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    /// `x * mul + add` with scalar constants.
    pub fn affine(&mut self, x: Var, mul: S, add: S) -> Var {
        let t = self.value(x).map(|v| v * mul + add);
        let ng = self.needs(x);
        self.push(t, Op::Affine(x, mul), ng)
    }

    pub fn scale(&mut self, x: Var, mul: S) -> Var {
        let t = self.value(x).map(|v| v * mul);
        let ng = self.needs(x);
        self.push(t, Op::Affine(x, mul), ng)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if start + len > c {
            return Err(shape_err!("column slice {}..{} of {} columns", start, start + len, c));
        }
        let ts = self.value(src);
        let data = ts.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let t = Tensor::new(vec![r, len], data)?;
        let ng = self.needs(src);
        Ok(self.push(t, Op::SliceCols { src, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(shape_err!("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(shape_err!("concat_rows with differing column counts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Output row `r` is row `rows[r]` of `src`; rows may repeat.
    pub fn gather_rows(&mut self, src: Var, rows: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(src);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err!("gather row {} from {} rows", bad, r));
        }
        let ts = self.value(src);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows.iter() {
            data.extend_from_slice(ts.row(i));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        let ng = self.needs(src);
        Ok(self.push(t, Op::GatherRows { src, rows }, ng))
    }

    /// Normalizes each row over its last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err!("layer_norm affine parameters must have {} elements", d));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = S::lit(d as f64);
        let mut xhat = Vec::with_capacity(r * d);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Inverted dropout. Identity (no node recorded) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<S> = (0..n).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(t, Op::SoftmaxRows(x), ng)
    }

    /// Builds an `l x l` matrix whose `(p, q)` entry is
    /// `table[buckets[p * l + q]][head]`, with `table` of shape `buckets x heads`.
    pub fn bias_lookup(&mut self, table: Var, buckets: Arc<[u32]>, head: usize) -> Result<Var> {
        let (nb, heads) = self.dims(table);
        let l = (buckets.len() as f64).sqrt() as usize;
        if l * l != buckets.len() {
            return Err(shape_err!("bucket index of {} entries is not square", buckets.len()));
        }
        if head >= heads {
            return Err(shape_err!("head {} of {}", head, heads));
        }
        let tt = self.value(table).data();
        let mut data = Vec::with_capacity(buckets.len());
        for &b in buckets.iter() {
            let b = b as usize;
            if b >= nb {
                return Err(shape_err!("bucket {} outside table of {} rows", b, nb));
            }
            data.push(tt[b * heads + head]);
        }
        let t = Tensor::new(vec![l, l], data)?;
        let ng = self.needs(table);
        Ok(self.push(t, Op::BiasLookup { table, buckets, head }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::lit(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, S::one() / n)
    }

    /// Sum of Huber penalties over entries where `mask` is set.
    pub fn huber_sum(&mut self, pred: Var, target: &[S], mask: &[bool], delta: S) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.len() || mask.len() != target.len() {
            return Err(shape_err!(
                "huber: prediction has {} elements, target {}, mask {}",
                tp.numel(),
                target.len(),
                mask.len()
            ));
        }
        let residual: Vec<S> = tp.data().iter().zip(target).map(|(&p, &t)| p - t).collect();
        let total = residual.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| huber(e, delta)).sum();
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(total), Op::HuberSum { pred, residual, mask: mask.to_vec(), delta }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable inputs are
    /// added to whatever earlier calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward from non-scalar of shape {:?}", self.value(loss).shape()));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if self.trainable[i] {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let value = |v: Var| &nodes[v.0].value;
        macro_rules! with {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = adjoint(nodes, adj, $v) {
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (value(*a).rows(), value(*a).cols());
                let n = value(*b).cols();
                with!(*a, |da| S::gemm(m, n, k, g, (n, 1), value(*b).data(), (1, n), S::one(), da));
                with!(*b, |db| S::gemm(k, m, n, value(*a).data(), (1, k), g, (n, 1), S::one(), db));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (value(*a).rows(), value(*a).cols());
                let n = value(*b).rows();
                with!(*a, |da| S::gemm(m, n, k, g, (n, 1), value(*b).data(), (k, 1), S::one(), da));
                with!(*b, |db| S::gemm(n, m, k, g, (1, n), value(*a).data(), (k, 1), S::one(), db));
            }
            Op::Add(a, b) => {
                with!(*a, |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                with!(*b, |db| db.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                with!(*a, |da| da.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                with!(*b, |db| db.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (value(*a).data(), value(*b).data());
                with!(*a, |da| da.iter_mut().zip(g).zip(vb).for_each(|((x, &y), &w)| *x += y * w));
                with!(*b, |db| db.iter_mut().zip(g).zip(va).for_each(|((x, &y), &w)| *x += y * w));
            }
            Op::AddRow(x, bias) => {
                let c = value(*x).cols();
                with!(*x, |dx| dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                with!(*bias, |db| for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                });
            }
            Op::Affine(x, mul) => {
                with!(*x, |dx| dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *mul));
            }
            Op::SliceCols { src, start } => {
                let c = value(*src).cols();
                let len = nodes[i].value.cols();
                with!(*src, |ds| for (r, row) in g.chunks(len).enumerate() {
                    ds[r * c + start..r * c + start + len].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = value(p).cols();
                    with!(p, |dp| for (r, row) in g.chunks(total).enumerate() {
                        dp[r * w..(r + 1) * w].iter_mut().zip(&row[offset..offset + w]).for_each(|(a, &b)| *a += b);
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = value(p).numel();
                    with!(p, |dp| dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, &b)| *a += b));
                    offset += n;
                }
            }
            Op::GatherRows { src, rows } => {
                let c = value(*src).cols();
                with!(*src, |ds| for (r, &from) in rows.iter().enumerate() {
                    ds[from * c..(from + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, &b)| *a += b);
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = value(*x).cols();
                let gm = value(*gamma).data();
                with!(*gamma, |dg| for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                });
                with!(*beta, |db| for gr in g.chunks(d) {
                    db.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                });
                let dn = S::lit(d as f64);
                with!(*x, |dx| for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    let inv = inv_std[r];
                    for j in 0..d {
                        dx[r * d + j] += inv * (gr[j] * gm[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = value(*x).data();
                with!(*x, |dx| dx.iter_mut().zip(g).zip(vx).for_each(|((a, &b), &v)| *a += b * gelu_grad(v)));
            }
            Op::Dropout { x, mask } => {
                with!(*x, |dx| dx.iter_mut().zip(g).zip(mask).for_each(|((a, &b), &m)| *a += b * m));
            }
            Op::SoftmaxRows(x) => {
                let y = &nodes[i].value;
                let c = y.cols();
                with!(*x, |dx| for (r, (gr, yr)) in g.chunks(c).zip(y.data().chunks(c)).enumerate() {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                });
            }
            Op::BiasLookup { table, buckets, head } => {
                let heads = value(*table).cols();
                with!(*table, |dt| for (&b, &gv) in buckets.iter().zip(g) {
                    dt[b as usize * heads + head] += gv;
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                with!(*x, |dx| dx.iter_mut().for_each(|a| *a += s));
            }
            Op::HuberSum { pred, residual, mask, delta } => {
                let s = g[0];
                with!(*pred, |dp| for ((a, &e), &m) in dp.iter_mut().zip(residual).zip(mask) {
                    if m {
                        *a += s * huber_grad(e, *delta);
                    }
                });
            }
        }
    }
}

/// Adjoint buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
fn adjoint<'a, S: Scalar>(nodes: &[Node<S>], adj: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![S::zero(); node.value.numel()]))
}

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    S::lit(0.5) * x * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-S::lit(0.5) * x * x).exp() * S::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Huber penalty of residual `e`.
#[inline]
pub fn huber<S: Scalar>(e: S, delta: S) -> S {
    let a = e.abs();
    if a <= delta {
        S::lit(0.5) * e * e
    } else {
        delta * (a - S::lit(0.5) * delta)
    }
}

/// Derivative of [`huber`] with respect to `e`.
#[inline]
pub fn huber_grad<S: Scalar>(e: S, delta: S) -> S {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        let mut z = S::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
