//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Tape::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every recorded node that
//! requires one. Nodes built only from constants never get a gradient.

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::feature_space::{sample_backward, sample_forward, sample_pieces, SampleLayout};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, permute_values, split_at_axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type CustomBackward = fn(x: &Tensor, y: &Tensor, grad_y: &Tensor) -> Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var, usize),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var, usize),
    Pow(Var, f64),
    Maximum(Var, Var, usize),
    Minimum(Var, Var, usize),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    SumAxis(Var, usize),
    SumAll(Var),
    Sample { space: Var, coords: Var, layout: SampleLayout, branch: usize },
    Custom(Var, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    branches: Vec<Vec<i64>>,
    replay: Option<Branches>,
    diverged: bool,
    off_branch: bool,
}

/// Pieces chosen by the piecewise ops of one tape (relu, abs, maximum,
/// minimum and the trilinear reads), in recording order.
///
/// A tape built with [`Tape::replaying`] reuses these choices instead of
/// picking its own, so it evaluates the smooth piece that contained the
/// recorded point, extended past its knots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Branches(Vec<Vec<i64>>);

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into `store` (`grad += dL/dparam`).
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (&id, &var) in &tape.params {
            if let Some(g) = self.get(var) {
                let p = store.get_mut(id);
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }
}

fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = out.len();
    let pad = n - src.len();
    let mut src_strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        src_strides[i + pad] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(grad: &Tensor, dims: &[usize]) -> Tensor {
    if grad.dims() == dims {
        return grad.clone();
    }
    let map = broadcast_map(grad.dims(), dims);
    let mut out = Tensor::zeros(dims.to_vec());
    let od = out.data_mut();
    for (g, &m) in grad.data().iter().zip(&map) {
        od[m] += g;
    }
    out
}

fn binary_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.dims() == b.dims() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.dims().to_vec(), data);
    }
    let out = broadcast_dims(a.dims(), b.dims())?;
    let ma = broadcast_map(&out, a.dims());
    let mb = broadcast_map(&out, b.dims());
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(out, data)
}

/// `a[m,k] × b[k,n]` into `out[m,n]` (accumulating).
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `aᵀ × b` where a is `[k,m]`, b is `[k,n]`, out `[m,n]` (accumulating).
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a × bᵀ` where a is `[m,k]`, b is `[n,k]`, out `[m,n]` (accumulating).
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// Sum that does not depend on the order of `vals` (sorted first), so
/// reductions over a permuted axis are bit-identical.
fn order_free_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let w = *x.dims().last().unwrap_or(&1);
    let mut out = x.clone();
    if w == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - m).exp();
        }
        let s = order_free_sum(&mut row.to_vec());
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Elementwise `f(x, mask == 1)`.
fn masked(x: &Tensor, mask: &[i64], f: impl Fn(f64, bool) -> f64) -> Tensor {
    Tensor::new(x.dims().to_vec(), x.data().iter().zip(mask).map(|(&v, &m)| f(v, m == 1)).collect()).expect("same dims")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that follows the pieces recorded in `branches`.
    pub fn replaying(branches: Branches) -> Self {
        Self { replay: Some(branches), ..Self::default() }
    }

    /// Pieces chosen so far.
    pub fn branches(&self) -> Branches {
        Branches(self.branches.clone())
    }

    /// True when a replaying tape met an op the record does not cover, so
    /// it fell back to its own choices.
    pub fn replay_diverged(&self) -> bool {
        self.diverged
    }

    /// True when a replaying tape would have picked a different piece
    /// somewhere on its own.
    pub fn left_branch(&self) -> bool {
        self.off_branch
    }

    fn choose(&mut self, natural: Vec<i64>) -> usize {
        let k = self.branches.len();
        let chosen = match self.replay.as_ref().map(|r| r.0.get(k)) {
            None => natural,
            Some(Some(c)) if c.len() == natural.len() => {
                if *c != natural {
                    self.off_branch = true;
                }
                c.clone()
            }
            Some(_) => {
                self.diverged = true;
                natural
            }
        };
        self.branches.push(chosen);
        k
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Records a leaf. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a stored parameter. Repeated binds of one id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).tensor.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, k) = self.select(a, b, true)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Maximum(a, b, k), ng))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, k) = self.select(a, b, false)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Minimum(a, b, k), ng))
    }

    // ties pick the first operand
    fn select(&mut self, a: Var, b: Var, max: bool) -> Result<(Tensor, usize)> {
        let (av, bv) = (self.value(a), self.value(b));
        let pick = binary_values(av, bv, |x, z| if (max && x >= z) || (!max && x <= z) { 1.0 } else { 0.0 })?;
        let first = binary_values(av, bv, |x, _| x)?;
        let second = binary_values(av, bv, |_, z| z)?;
        let k = self.choose(pick.data().iter().map(|&p| p as i64).collect());
        let mask = &self.branches[k];
        let v = Tensor::new(
            first.dims().to_vec(),
            first.data().iter().zip(second.data()).zip(mask).map(|((&x, &z), &m)| if m == 1 { x } else { z }).collect(),
        )?;
        Ok((v, k))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let k = self.choose(self.value(a).data().iter().map(|&x| i64::from(x > 0.0)).collect());
        let v = masked(self.value(a), &self.branches[k], |x, on| if on { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(v, Op::Relu(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `2^a`.
    pub fn exp2(&mut self, a: Var) -> Var {
        let s = self.scale(a, std::f64::consts::LN_2);
        self.exp(s)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let k = self.choose(self.value(a).data().iter().map(|&x| i64::from(x >= 0.0)).collect());
        let v = masked(self.value(a), &self.branches[k], |x, on| if on { x } else { -x });
        let ng = self.ng(a);
        self.push(v, Op::Abs(a, k), ng)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        let ng = self.ng(a);
        self.push(v, Op::Pow(a, p), ng)
    }

    /// Elementwise op with a caller-supplied backward rule.
    pub fn custom(&mut self, a: Var, forward: fn(f64) -> f64, backward: CustomBackward) -> Var {
        let v = self.value(a).map(forward);
        let ng = self.ng(a);
        self.push(v, Op::Custom(a, backward), ng)
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(shape_err!("matmul {:?} × {:?}", da, db));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = Tensor::zeros([m, n]);
        gemm_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Batched `[B,m,k] × [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] || da[2] != db[1] {
            return Err(shape_err!("bmm {:?} × {:?}", da, db));
        }
        let (bt, m, k, n) = (da[0], da[1], da[2], db[2]);
        let mut out = Tensor::zeros([bt, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..bt {
                gemm_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut od[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Bmm(a, b), ng))
    }

    /// [`Tape::bmm`] whose contraction sums are independent of the order
    /// along the shared `k` axis. Used where that axis indexes instances.
    pub fn bmm_order_free(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] || da[2] != db[1] {
            return Err(shape_err!("bmm {:?} × {:?}", da, db));
        }
        let (bt, m, k, n) = (da[0], da[1], da[2], db[2]);
        let mut out = Tensor::zeros([bt, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            let mut terms = vec![0.0; k];
            for bi in 0..bt {
                for i in 0..m {
                    for j in 0..n {
                        for (p, t) in terms.iter_mut().enumerate() {
                            *t = av[(bi * m + i) * k + p] * bv[(bi * k + p) * n + j];
                        }
                        od[(bi * m + i) * n + j] = order_free_sum(&mut terms);
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Bmm(a, b), ng))
    }

    // ---- normalisation -------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = *x.dims().last().unwrap_or(&1);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(w.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let lse = m + order_free_sum(&mut e).ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Layer normalisation over the last axis followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let w = *xd.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if self.dims(gain) != [w] || self.dims(bias) != [w] {
            return Err(shape_err!(
                "layer_norm gain {:?} / bias {:?} for width {}",
                self.dims(gain),
                self.dims(bias),
                w
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / w.max(1);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..w {
                let h = (row[c] - mean) * rs;
                xhat[r * w + c] = h;
                out[r * w + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let v = Tensor::new(xd, out)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    // ---- structure -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(dims.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = permute_values(self.value(a), axes)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), ng))
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self.dims(*vars.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {} on rank {}", axis, first.len()));
        }
        let mut total = 0;
        for &v in vars {
            let d = self.dims(v);
            let compatible = d.len() == first.len()
                && d.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err!("concat {:?} with {:?} on axis {}", d, first, axis));
            }
            total += d[axis];
        }
        let mut out_dims = first.clone();
        out_dims[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_dims, axis);
        let mut data = Vec::with_capacity(numel(&out_dims));
        for o in 0..outer {
            for &v in vars {
                let t = self.value(v);
                let chunk = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = vars.iter().any(|&v| self.ng(v));
        let value = Tensor::new(out_dims, data)?;
        Ok(self.push(value, Op::Concat(vars.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if axis >= d.len() || start + len > d[axis] {
            return Err(shape_err!("slice [{}..{}) on axis {} of {:?}", start, start + len, axis, d));
        }
        let (outer, n, inner) = split_at_axis(&d, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut od = d;
        od[axis] = len;
        let ng = self.ng(a);
        let v = Tensor::new(od, data)?;
        Ok(self.push(v, Op::Slice { x: a, axis, start }, ng))
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if axis >= d.len() || indices.iter().any(|&i| i >= d[axis]) {
            return Err(shape_err!("index_select {:?} on axis {} of {:?}", indices, axis, d));
        }
        let (outer, n, inner) = split_at_axis(&d, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut od = d;
        od[axis] = indices.len();
        let ng = self.ng(a);
        let v = Tensor::new(od, data)?;
        Ok(self.push(v, Op::IndexSelect { x: a, axis, indices: indices.to_vec() }, ng))
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if axis >= d.len() {
            return Err(shape_err!("sum over axis {} of {:?}", axis, d));
        }
        let (outer, n, inner) = split_at_axis(&d, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut od = d;
        od.remove(axis);
        let ng = self.ng(a);
        let v = Tensor::new(od, data)?;
        Ok(self.push(v, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .dims(a)
            .get(axis)
            .ok_or_else(|| shape_err!("mean over axis {} of {:?}", axis, self.dims(a)))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Trilinear reads from a `[D, T, S, H, W]` feature volume; see
    /// [`SampleLayout`] for the coordinate and output conventions.
    pub fn sample(&mut self, space: Var, coords: Var, layout: SampleLayout) -> Result<Var> {
        let pieces = sample_pieces(self.dims(space), self.value(coords), &layout);
        let branch = self.choose(pieces);
        let v = sample_forward(self.value(space), self.value(coords), &layout, &self.branches[branch])?;
        let ng = self.ng(space) || self.ng(coords);
        Ok(self.push(v, Op::Sample { space, coords, layout, branch }, ng))
    }

    // ---- backward ------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        grads[loss.0] = Some(Tensor::full(self.dims(loss).to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let push = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    push(&mut grads, *a, reduce_to(&g, self.dims(*a)));
                    push(&mut grads, *b, reduce_to(&g, self.dims(*b)));
                }
                Op::Sub(a, b) => {
                    push(&mut grads, *a, reduce_to(&g, self.dims(*a)));
                    push(&mut grads, *b, reduce_to(&g.map(|v| -v), self.dims(*b)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let t = binary_values(&g, bv, |x, y| x * y).expect("broadcast");
                        push(&mut grads, *a, reduce_to(&t, av.dims()));
                    }
                    if self.ng(*b) {
                        let t = binary_values(&g, av, |x, y| x * y).expect("broadcast");
                        push(&mut grads, *b, reduce_to(&t, bv.dims()));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let t = binary_values(&g, bv, |x, y| x / y).expect("broadcast");
                        push(&mut grads, *a, reduce_to(&t, av.dims()));
                    }
                    if self.ng(*b) {
                        // d(a/b)/db = -y / b
                        let t = binary_values(&g, y, |x, q| x * q).expect("same dims");
                        let t = binary_values(&t, bv, |x, w| -x / w).expect("broadcast");
                        push(&mut grads, *b, reduce_to(&t, bv.dims()));
                    }
                }
                Op::Maximum(a, b, k) | Op::Minimum(a, b, k) => {
                    let mask = &self.branches[*k];
                    let ga = masked(&g, mask, |x, on| if on { x } else { 0.0 });
                    let gb = masked(&g, mask, |x, on| if on { 0.0 } else { x });
                    push(&mut grads, *a, reduce_to(&ga, self.dims(*a)));
                    push(&mut grads, *b, reduce_to(&gb, self.dims(*b)));
                }
                Op::Scale(a, c) => push(&mut grads, *a, g.map(|v| v * c)),
                Op::AddScalar(a) => push(&mut grads, *a, g),
                Op::Relu(a, k) => push(&mut grads, *a, masked(&g, &self.branches[*k], |x, on| if on { x } else { 0.0 })),
                Op::Sigmoid(a) => push(&mut grads, *a, zip_map(&g, y, |gv, s| gv * s * (1.0 - s))),
                Op::Exp(a) => push(&mut grads, *a, zip_map(&g, y, |gv, e| gv * e)),
                Op::Ln(a) => push(&mut grads, *a, zip_map(&g, self.value(*a), |gv, x| gv / x)),
                Op::Abs(a, k) => push(&mut grads, *a, masked(&g, &self.branches[*k], |x, on| if on { x } else { -x })),
                Op::Pow(a, p) => {
                    let p = *p;
                    push(
                        &mut grads,
                        *a,
                        zip_map(&g, self.value(*a), |gv, x| {
                            if p == 0.0 { 0.0 } else { gv * p * x.powf(p - 1.0) }
                        }),
                    )
                }
                Op::Custom(a, bw) => push(&mut grads, *a, bw(self.value(*a), y, &g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                    if self.ng(*a) {
                        let mut ga = Tensor::zeros([m, k]);
                        gemm_nt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                        push(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros([k, n]);
                        gemm_tn_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                        push(&mut grads, *b, gb);
                    }
                }
                Op::Bmm(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (bt, m, k, n) = (av.dims()[0], av.dims()[1], av.dims()[2], bv.dims()[2]);
                    if self.ng(*a) {
                        let mut ga = Tensor::zeros([bt, m, k]);
                        let gd = ga.data_mut();
                        for i in 0..bt {
                            gemm_nt_acc(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                &mut gd[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        push(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros([bt, k, n]);
                        let gd = gb.data_mut();
                        for i in 0..bt {
                            gemm_tn_acc(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut gd[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        push(&mut grads, *b, gb);
                    }
                }
                Op::Softmax(a) => {
                    let w = *y.dims().last().unwrap_or(&1);
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    push(&mut grads, *a, gx);
                }
                Op::LogSoftmax(a) => {
                    let w = *y.dims().last().unwrap_or(&1);
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                        let s: f64 = grow.iter().sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv -= yv.exp() * s;
                        }
                    }
                    push(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let w = self.dims(*gain)[0];
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; w];
                    let mut dbias = vec![0.0; w];
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..w {
                            dgain[c] += gr[c] * hr[c];
                            dbias[c] += gr[c];
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= w as f64;
                        mean_dh /= w as f64;
                        for c in 0..w {
                            let d = gr[c] * gv[c];
                            dx[r * w + c] = rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    push(&mut grads, *x, Tensor::new(self.dims(*x).to_vec(), dx).expect("dims"));
                    push(&mut grads, *gain, Tensor::vector(dgain));
                    push(&mut grads, *bias, Tensor::vector(dbias));
                }
                Op::Reshape(a) => {
                    let t = g.reshape(self.dims(*a).to_vec()).expect("reshape back");
                    push(&mut grads, *a, t);
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    push(&mut grads, *a, permute_values(&g, &inv).expect("inverse permutation"));
                }
                Op::Concat(vars, axis) => {
                    let (outer, _, inner) = split_at_axis(g.dims(), *axis);
                    let mut start = 0;
                    let total = g.dims()[*axis];
                    for &v in vars {
                        let d = self.dims(v).to_vec();
                        let len = d[*axis];
                        if self.ng(v) {
                            let mut data = Vec::with_capacity(numel(&d));
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                data.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            push(&mut grads, v, Tensor::new(d, data).expect("dims"));
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let d = self.dims(*x).to_vec();
                    let (outer, n, inner) = split_at_axis(&d, *axis);
                    let len = g.dims()[*axis];
                    let mut gx = Tensor::zeros(d);
                    let gd = gx.data_mut();
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        gd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    push(&mut grads, *x, gx);
                }
                Op::IndexSelect { x, axis, indices } => {
                    let d = self.dims(*x).to_vec();
                    let (outer, n, inner) = split_at_axis(&d, *axis);
                    let mut gx = Tensor::zeros(d);
                    let gd = gx.data_mut();
                    for o in 0..outer {
                        for (k, &ix) in indices.iter().enumerate() {
                            let dst = (o * n + ix) * inner;
                            let src = (o * indices.len() + k) * inner;
                            for c in 0..inner {
                                gd[dst + c] += g.data()[src + c];
                            }
                        }
                    }
                    push(&mut grads, *x, gx);
                }
                Op::SumAxis(a, axis) => {
                    let d = self.dims(*a).to_vec();
                    let (outer, n, inner) = split_at_axis(&d, *axis);
                    let mut gx = Tensor::zeros(d);
                    let gd = gx.data_mut();
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            gd[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    push(&mut grads, *a, gx);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    push(&mut grads, *a, Tensor::full(self.dims(*a).to_vec(), gv));
                }
                Op::Sample { space, coords, layout, branch } => {
                    let (gs, gc) = sample_backward(
                        self.value(*space),
                        self.value(*coords),
                        layout,
                        &self.branches[*branch],
                        &g,
                        self.ng(*space),
                        self.ng(*coords),
                    );
                    if let Some(gs) = gs {
                        push(&mut grads, *space, gs);
                    }
                    if let Some(gc) = gc {
                        push(&mut grads, *coords, gc);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        g.dims().to_vec(),
        g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
    .expect("matching dims")
}
