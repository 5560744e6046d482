//! Standard layers on top of the tape: linear maps, layer norm, two-layer
//! feed-forward blocks and multi-head attention.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_HEADS: usize = 8;

/// `y = x·w + b` over the last axis of `x`.
pub fn linear_apply(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xd = tape.dims(x).to_vec();
    let wd = tape.dims(w).to_vec();
    let din = *xd.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
    if wd.len() != 2 || wd[0] != din || tape.dims(b) != [wd[1]] {
        return Err(shape_err!(
            "linear: x {:?}, w {:?}, b {:?}",
            xd,
            wd,
            tape.dims(b)
        ));
    }
    let rows = xd[..xd.len() - 1].iter().product::<usize>();
    let x2 = tape.reshape(x, &[rows, din])?;
    let y = tape.matmul(x2, w)?;
    let y = tape.add(y, b)?;
    let mut od = xd;
    *od.last_mut().expect("non-empty") = wd[1];
    tape.reshape(y, &od)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Weights from `w_init`, bias from `b_init`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        w_init: Init,
        b_init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.init(format!("{name}.w"), &[din, dout], w_init, rng)?;
        let b = store.init(format!("{name}.b"), &[dout], b_init, rng)?;
        Ok(Self { w, b, din, dout })
    }

    /// Uniform `±1/sqrt(din)` weights, zero bias.
    pub fn standard(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Result<Self> {
        let a = 1.0 / (din as f64).sqrt();
        Self::new(store, name, din, dout, Init::Uniform(-a, a), Init::Zeros, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        linear_apply(tape, x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Result<Self> {
        let gain = store.init(format!("{name}.gain"), &[width], Init::Ones, rng)?;
        let bias = store.init(format!("{name}.bias"), &[width], Init::Zeros, rng)?;
        Ok(Self { gain, bias, eps: LAYER_NORM_EPS })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub hidden: Linear,
    pub out: Linear,
}

impl Ffn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        out_init: (Init, Init),
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden_l = Linear::standard(store, &format!("{name}.fc1"), din, hidden, rng)?;
        let out = Linear::new(store, &format!("{name}.fc2"), hidden, dout, out_init.0, out_init.1, rng)?;
        Ok(Self { hidden: hidden_l, out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}

/// Scaled dot-product attention with per-head input projections and an
/// output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("attention width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::standard(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::standard(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::standard(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::standard(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `query` is `[B, Nq, D]` (or `[Nq, D]`), `kv` is `[B, Nk, D]` (or `[Nk, D]`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, kv: Var) -> Result<Var> {
        let unbatched = tape.dims(query).len() == 2;
        let (query, kv) = if unbatched {
            let qd = tape.dims(query).to_vec();
            let kd = tape.dims(kv).to_vec();
            if kd.len() != 2 {
                return Err(shape_err!("attention query {:?} with keys {:?}", qd, kd));
            }
            (tape.reshape(query, &[1, qd[0], qd[1]])?, tape.reshape(kv, &[1, kd[0], kd[1]])?)
        } else {
            (query, kv)
        };
        let qd = tape.dims(query).to_vec();
        let kd = tape.dims(kv).to_vec();
        if qd.len() != 3 || kd.len() != 3 || qd[0] != kd[0] || qd[2] != self.dim || kd[2] != self.dim {
            return Err(shape_err!("attention query {:?} with keys {:?} (width {})", qd, kd, self.dim));
        }
        let (b, nq, nk, h) = (qd[0], qd[1], kd[1], self.heads);
        let dh = self.dim / h;

        let split = |tape: &mut Tape, x: Var, n: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, n, h, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * h, n, dh])
        };
        let qp = self.q.forward(tape, store, query)?;
        let kp = self.k.forward(tape, store, kv)?;
        let vp = self.v.forward(tape, store, kv)?;
        let qh = split(tape, qp, nq)?;
        let kh = split(tape, kp, nk)?;
        let vh = split(tape, vp, nk)?;
        let kt = tape.permute(kh, &[0, 2, 1])?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores);
        let ctx = tape.bmm_order_free(attn, vh)?;
        let ctx = tape.reshape(ctx, &[b, h, nq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, nq, self.dim])?;
        let out = self.o.forward(tape, store, ctx)?;
        if unbatched {
            tape.reshape(out, &[nq, self.dim])
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::zeros([2]));
        let y = linear_apply(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = tape.constant(Tensor::new([2, 1], vec![1.0, -1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.5]));
        let y = linear_apply(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);

        let x = tape.constant(Tensor::from_fn([3, 4], |i| i as f64 - 5.0));
        let w = tape.constant(Tensor::zeros([4, 2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = linear_apply(&mut tape, x, w, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.dims(y), &[3, 2]);
    }

    #[test]
    fn linear_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        let w = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(matches!(linear_apply(&mut tape, x, w, b), Err(Error::Shape(_))));
    }

    fn ln(x: &[f64], eps: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let g = tape.constant(Tensor::full([x.len()], 1.0));
        let b = tape.constant(Tensor::zeros([x.len()]));
        let y = tape.layer_norm(xv, g, b, eps).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_examples() {
        let y = ln(&[1.0, -1.0], 1e-12);
        assert!((y[0] - 1.0).abs() < 1e-6 && (y[1] + 1.0).abs() < 1e-6);
        assert_eq!(ln(&[3.0, 3.0, 3.0], LAYER_NORM_EPS), vec![0.0; 3]);
        let y = ln(&[0.0, 2.0], 1e-12);
        assert!((y[0] + 1.0).abs() < 1e-6 && (y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_standardises() {
        let mut rng = Rng::new(4);
        let x: Vec<f64> = (0..7).map(|_| 3.0 * rng.normal() + 2.0).collect();
        let y = ln(&x, 1e-12);
        let mean = y.iter().sum::<f64>() / 7.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros([3]));
        let s = tape.softmax(z);
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let s = tape.softmax(l);
        let v = tape.value(s).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
