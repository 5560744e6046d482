//! Query-conditioned adaptive mixing and the decoupled spatio-temporal
//! mixing strategies.
//!
//! Channels are split into `G` groups of `Dg = D/G`; every group gets its
//! own generated `M_c ∈ [Dg, Dg]` and `M_p ∈ [P, P′]`. The channel layout is
//! group-major, matching the output of [`crate::autograd::Tape::sample`].

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::Mode;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard deviation of generator weights at init.
pub const GENERATOR_INIT_STD: f64 = 1e-3;

/// Linear weight generator `D → dout`. Without a weight matrix (fixed
/// mixing) the "generated" parameters are just the learned bias.
#[derive(Debug, Clone)]
pub struct Generator {
    pub w: Option<ParamId>,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Generator {
    fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, fixed: bool, rng: &mut Rng) -> Result<Self> {
        let w = if fixed {
            None
        } else {
            Some(store.init(format!("{name}.w"), &[din, dout], Init::Normal(GENERATOR_INIT_STD), rng)?)
        };
        let a = 1.0 / (din as f64).sqrt();
        let b = store.init(format!("{name}.b"), &[dout], Init::Uniform(-a, a), rng)?;
        Ok(Self { w, b, din, dout })
    }

    /// `q ∈ [B, D]` to `[B, dout]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Result<Var> {
        let b = tape.param(store, self.b);
        match self.w {
            Some(w) => {
                let w = tape.param(store, w);
                crate::nn::linear_apply(tape, q, w, b)
            }
            None => {
                let rows = tape.dims(q)[0];
                let b = tape.reshape(b, &[1, self.dout])?;
                tape.index_select(b, 0, &vec![0; rows])
            }
        }
    }
}

/// One adaptive mixer `AM(q, f, P, P′)`.
#[derive(Debug, Clone)]
pub struct AdaptiveMixer {
    pub channel_gen: Generator,
    pub point_gen: Generator,
    pub channel_norm: LayerNorm,
    pub point_norm: LayerNorm,
    pub out: Linear,
    pub dim: usize,
    pub groups: usize,
    pub points_in: usize,
    pub points_out: usize,
}

impl AdaptiveMixer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        groups: usize,
        points_in: usize,
        points_out: usize,
        fixed: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if groups == 0 || !dim.is_multiple_of(groups) {
            return Err(Error::Config(format!("{dim} channels cannot be split into {groups} groups")));
        }
        if points_in == 0 || points_out == 0 {
            return Err(Error::Config(format!("mixer needs points (P={points_in}, P'={points_out})")));
        }
        let dg = dim / groups;
        Ok(Self {
            channel_gen: Generator::new(store, &format!("{name}.channel_gen"), dim, groups * dg * dg, fixed, rng)?,
            point_gen: Generator::new(store, &format!("{name}.point_gen"), dim, groups * points_in * points_out, fixed, rng)?,
            channel_norm: LayerNorm::new(store, &format!("{name}.channel_norm"), dg, rng)?,
            point_norm: LayerNorm::new(store, &format!("{name}.point_norm"), points_out, rng)?,
            out: Linear::new(store, &format!("{name}.out"), groups * dg * points_out, dim, Init::Zeros, Init::Zeros, rng)?,
            dim,
            groups,
            points_in,
            points_out,
        })
    }

    fn group_dim(&self) -> usize {
        self.dim / self.groups
    }

    fn check(&self, tape: &Tape, q: Var, f: Var) -> Result<usize> {
        let (qd, fd) = (tape.dims(q), tape.dims(f));
        if qd.len() != 2 || qd[1] != self.dim || fd != [qd[0], self.points_in, self.dim] {
            return Err(shape_err!(
                "mixer (D={}, P={}) given q {:?}, f {:?}",
                self.dim,
                self.points_in,
                qd,
                fd
            ));
        }
        Ok(qd[0])
    }

    /// `ReLU(LN(f × M_c))` per group, as `[B·G, P, Dg]`.
    fn channel_stage(&self, tape: &mut Tape, store: &ParamStore, q: Var, f: Var, b: usize) -> Result<Var> {
        let (g, dg, p) = (self.groups, self.group_dim(), self.points_in);
        let mc = self.channel_gen.forward(tape, store, q)?;
        let mc = tape.reshape(mc, &[b * g, dg, dg])?;
        let fg = tape.reshape(f, &[b, p, g, dg])?;
        let fg = tape.permute(fg, &[0, 2, 1, 3])?;
        let fg = tape.reshape(fg, &[b * g, p, dg])?;
        let cm = tape.bmm(fg, mc)?;
        let cm = self.channel_norm.forward(tape, store, cm)?;
        Ok(tape.relu(cm))
    }

    /// `ReLU(LN(CMᵀ × M_p))` per group, as `[B·G, Dg, P′]`.
    fn point_stage(&self, tape: &mut Tape, store: &ParamStore, q: Var, cm: Var, b: usize) -> Result<Var> {
        let (g, p, po) = (self.groups, self.points_in, self.points_out);
        let mp = self.point_gen.forward(tape, store, q)?;
        let mp = tape.reshape(mp, &[b * g, p, po])?;
        let cmt = tape.permute(cm, &[0, 2, 1])?;
        let pcm = tape.bmm(cmt, mp)?;
        let pcm = self.point_norm.forward(tape, store, pcm)?;
        Ok(tape.relu(pcm))
    }

    /// `q ∈ [B, D]`, `f ∈ [B, P, D]` to `q′ = q + Linear(Flatten(PCM))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, f: Var) -> Result<Var> {
        let b = self.check(tape, q, f)?;
        let cm = self.channel_stage(tape, store, q, f, b)?;
        let pcm = self.point_stage(tape, store, q, cm, b)?;
        let flat = tape.reshape(pcm, &[b, self.dim * self.points_out])?;
        let delta = self.out.forward(tape, store, flat)?;
        tape.add(q, delta)
    }

    /// Channel mixing of a single query, `[P, D]` in the input layout.
    pub fn channel_mix(&self, store: &ParamStore, q: &Tensor, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (qv, fv) = self.single(&mut tape, q, f)?;
        let cm = self.channel_stage(&mut tape, store, qv, fv, 1)?;
        let cm = tape.reshape(cm, &[self.groups, self.points_in, self.group_dim()])?;
        let cm = tape.permute(cm, &[1, 0, 2])?;
        let cm = tape.reshape(cm, &[self.points_in, self.dim])?;
        Ok(tape.value(cm).clone())
    }

    /// Point mixing of already channel-mixed features `[P, D]` to `[D, P′]`.
    pub fn point_mix(&self, store: &ParamStore, q: &Tensor, cm: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (qv, cv) = self.single(&mut tape, q, cm)?;
        let (g, p, dg) = (self.groups, self.points_in, self.group_dim());
        let cg = tape.reshape(cv, &[p, g, dg])?;
        let cg = tape.permute(cg, &[1, 0, 2])?;
        let pcm = self.point_stage(&mut tape, store, qv, cg, 1)?;
        let pcm = tape.reshape(pcm, &[self.dim, self.points_out])?;
        Ok(tape.value(pcm).clone())
    }

    /// Full `AM(q, f)` for one query.
    pub fn adaptive_mix(&self, store: &ParamStore, q: &Tensor, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (qv, fv) = self.single(&mut tape, q, f)?;
        let out = self.forward(&mut tape, store, qv, fv)?;
        Ok(Tensor::vector(tape.value(out).data().to_vec()))
    }

    fn single(&self, tape: &mut Tape, q: &Tensor, f: &Tensor) -> Result<(Var, Var)> {
        if q.dims() != [self.dim] || f.dims() != [self.points_in, self.dim] {
            return Err(shape_err!("single-query mixer given q {:?}, f {:?}", q.dims(), f.dims()));
        }
        let qv = tape.constant(q.clone().reshape([1, self.dim])?);
        let fv = tape.constant(f.clone().reshape([1, self.points_in, self.dim])?);
        Ok((qv, fv))
    }
}

/// How spatial and temporal queries consume the sampled features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixStrategy {
    /// Spatial and temporal mixers side by side.
    #[default]
    Parallel,
    /// Spatial mixing, then temporal mixing of the spatial query.
    Sequential,
    /// One mixer over all `T·P` points; the temporal query is left alone.
    Coupled,
    SpatialOnly,
    TemporalOnly,
}

impl MixStrategy {
    pub const ALL: [MixStrategy; 5] = [
        MixStrategy::Parallel,
        MixStrategy::Sequential,
        MixStrategy::Coupled,
        MixStrategy::SpatialOnly,
        MixStrategy::TemporalOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MixStrategy::Parallel => "parallel",
            MixStrategy::Sequential => "sequential",
            MixStrategy::Coupled => "coupled",
            MixStrategy::SpatialOnly => "spatial_only",
            MixStrategy::TemporalOnly => "temporal_only",
        }
    }
}

impl std::str::FromStr for MixStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MixStrategy::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mixing strategy {s:?}")))
    }
}

/// Temporal pooling: `[B, T, P, D]` to `[B, P, D]`.
pub fn temporal_pool(tape: &mut Tape, f: Var) -> Result<Var> {
    tape.mean_axis(f, 1)
}

/// Spatial pooling: `[B, T, P, D]` to `[B, T, D]`.
pub fn spatial_pool(tape: &mut Tape, f: Var) -> Result<Var> {
    tape.mean_axis(f, 2)
}

/// Keyframe mixing: `q_s′ = AM(q_s, TP(F))`, `q_t′ = AM(q_t, SP(F))`.
/// `q_s, q_t ∈ [N, D]`, `F ∈ [N, T, P, D]`.
pub fn decoupled_mix_keyframe(
    tape: &mut Tape,
    store: &ParamStore,
    spatial: &AdaptiveMixer,
    temporal: &AdaptiveMixer,
    qs: Var,
    qt: Var,
    f: Var,
) -> Result<(Var, Var)> {
    let tp = temporal_pool(tape, f)?;
    let sp = spatial_pool(tape, f)?;
    Ok((spatial.forward(tape, store, qs, tp)?, temporal.forward(tape, store, qt, sp)?))
}

/// Tubelet mixing: `q_s′[t] = AM(q_s[t], F[t])` for every frame,
/// `q_t′ = AM(q_t, SP(F))`. `q_s ∈ [N, T, D]`.
pub fn decoupled_mix_tubelet(
    tape: &mut Tape,
    store: &ParamStore,
    spatial: &AdaptiveMixer,
    temporal: &AdaptiveMixer,
    qs: Var,
    qt: Var,
    f: Var,
) -> Result<(Var, Var)> {
    let qs = per_frame_mix(tape, store, spatial, qs, f)?;
    let sp = spatial_pool(tape, f)?;
    Ok((qs, temporal.forward(tape, store, qt, sp)?))
}

fn per_frame_mix(tape: &mut Tape, store: &ParamStore, mixer: &AdaptiveMixer, qs: Var, f: Var) -> Result<Var> {
    let fd = tape.dims(f).to_vec();
    if fd.len() != 4 || tape.dims(qs) != [fd[0], fd[1], fd[3]] {
        return Err(shape_err!("per-frame mixing of q {:?} over F {:?}", tape.dims(qs), fd));
    }
    let (n, t, p, d) = (fd[0], fd[1], fd[2], fd[3]);
    let q2 = tape.reshape(qs, &[n * t, d])?;
    let f2 = tape.reshape(f, &[n * t, p, d])?;
    let out = mixer.forward(tape, store, q2, f2)?;
    tape.reshape(out, &[n, t, d])
}

/// The mixers of one decoder module, arranged per [`MixStrategy`].
#[derive(Debug, Clone)]
pub struct DecoupledMixer {
    pub strategy: MixStrategy,
    pub spatial: Option<AdaptiveMixer>,
    pub temporal: Option<AdaptiveMixer>,
    pub coupled: Option<AdaptiveMixer>,
}

/// Sizes shared by the mixers of one module.
#[derive(Debug, Clone, Copy)]
pub struct MixerShape {
    pub dim: usize,
    pub groups: usize,
    pub points: usize,
    pub frames: usize,
    /// `P_out / P_in` and `T_out / T_in`.
    pub out_ratio: usize,
    pub fixed: bool,
}

impl DecoupledMixer {
    pub fn new(store: &mut ParamStore, name: &str, strategy: MixStrategy, s: MixerShape, rng: &mut Rng) -> Result<Self> {
        let spatial_needed = matches!(strategy, MixStrategy::Parallel | MixStrategy::Sequential | MixStrategy::SpatialOnly);
        let temporal_needed = matches!(strategy, MixStrategy::Parallel | MixStrategy::Sequential | MixStrategy::TemporalOnly);
        let spatial = if spatial_needed {
            Some(AdaptiveMixer::new(store, &format!("{name}.spatial"), s.dim, s.groups, s.points, s.out_ratio * s.points, s.fixed, rng)?)
        } else {
            None
        };
        let temporal = if temporal_needed {
            Some(AdaptiveMixer::new(store, &format!("{name}.temporal"), s.dim, s.groups, s.frames, s.out_ratio * s.frames, s.fixed, rng)?)
        } else {
            None
        };
        let coupled = if strategy == MixStrategy::Coupled {
            let p = s.points * s.frames;
            Some(AdaptiveMixer::new(store, &format!("{name}.coupled"), s.dim, s.groups, p, s.out_ratio * s.points, s.fixed, rng)?)
        } else {
            None
        };
        Ok(Self { strategy, spatial, temporal, coupled })
    }

    /// `q_s ∈ [N, L, D]`, `q_t ∈ [N, D]`, `F ∈ [N, T, P, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mode: Mode, qs: Var, qt: Var, f: Var) -> Result<(Var, Var)> {
        let fd = tape.dims(f).to_vec();
        let qd = tape.dims(qs).to_vec();
        if fd.len() != 4 || qd.len() != 3 {
            return Err(shape_err!("mixing q_s {:?} over F {:?}", qd, fd));
        }
        let (n, t, p, d) = (fd[0], fd[1], fd[2], fd[3]);
        let want_l = match mode {
            Mode::Keyframe => 1,
            Mode::Tubelet => t,
        };
        if qd != [n, want_l, d] {
            return Err(shape_err!("{:?} mixing needs q_s [{}, {}, {}], got {:?}", mode, n, want_l, d, qd));
        }
        let need = |m: &Option<AdaptiveMixer>| -> Result<AdaptiveMixer> {
            m.clone().ok_or_else(|| Error::Config(format!("{} mixing is missing a mixer", self.strategy.as_str())))
        };
        // spatial step, returns [N, L, D]
        let spatial_step = |tape: &mut Tape, mixer: &AdaptiveMixer, q: Var| -> Result<Var> {
            match mode {
                Mode::Keyframe => {
                    let q2 = tape.reshape(q, &[n, d])?;
                    let tp = temporal_pool(tape, f)?;
                    let out = mixer.forward(tape, store, q2, tp)?;
                    tape.reshape(out, &[n, 1, d])
                }
                Mode::Tubelet => per_frame_mix(tape, store, mixer, q, f),
            }
        };
        match self.strategy {
            MixStrategy::Parallel => {
                let qs = spatial_step(tape, &need(&self.spatial)?, qs)?;
                let sp = spatial_pool(tape, f)?;
                let qt = need(&self.temporal)?.forward(tape, store, qt, sp)?;
                Ok((qs, qt))
            }
            MixStrategy::SpatialOnly => Ok((spatial_step(tape, &need(&self.spatial)?, qs)?, qt)),
            MixStrategy::TemporalOnly => {
                let sp = spatial_pool(tape, f)?;
                Ok((qs, need(&self.temporal)?.forward(tape, store, qt, sp)?))
            }
            MixStrategy::Sequential => {
                let mid = spatial_step(tape, &need(&self.spatial)?, qs)?;
                let sp = spatial_pool(tape, f)?;
                let temporal = need(&self.temporal)?;
                let rows = n * want_l;
                let mid2 = tape.reshape(mid, &[rows, d])?;
                let sp = if want_l == 1 {
                    sp
                } else {
                    let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, want_l)).collect();
                    tape.index_select(sp, 0, &idx)?
                };
                let out = temporal.forward(tape, store, mid2, sp)?;
                Ok((tape.reshape(out, &[n, want_l, d])?, qt))
            }
            MixStrategy::Coupled => {
                let mixer = need(&self.coupled)?;
                let flat = tape.reshape(f, &[n, t * p, d])?;
                let rows = n * want_l;
                let flat = if want_l == 1 {
                    flat
                } else {
                    let idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, want_l)).collect();
                    tape.index_select(flat, 0, &idx)?
                };
                let q2 = tape.reshape(qs, &[rows, d])?;
                let out = mixer.forward(tape, store, q2, flat)?;
                Ok((tape.reshape(out, &[n, want_l, d])?, qt))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixer(store: &mut ParamStore, d: usize, g: usize, p: usize, po: usize, fixed: bool) -> AdaptiveMixer {
        AdaptiveMixer::new(store, "m", d, g, p, po, fixed, &mut Rng::new(9)).unwrap()
    }

    fn fill_random(store: &mut ParamStore, seed: u64) {
        let mut rng = Rng::new(seed);
        for p in store.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = rng.normal() * 0.5;
            }
        }
    }

    #[test]
    fn identity_channel_weights_example() {
        let mut store = ParamStore::new();
        let m = mixer(&mut store, 2, 1, 1, 1, true);
        store.set(m.channel_gen.b, Tensor::vector(vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let cm = m.channel_mix(&store, &Tensor::zeros([2]), &Tensor::new([1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        assert!((cm.data()[0] - 1.0).abs() < 1e-4);
        assert_eq!(cm.data()[1], 0.0);
    }

    #[test]
    fn zero_generators_give_zero_mixing() {
        let mut store = ParamStore::new();
        let m = mixer(&mut store, 4, 2, 3, 5, true);
        store.set(m.channel_gen.b, Tensor::zeros([8])).unwrap();
        store.set(m.point_gen.b, Tensor::zeros([30])).unwrap();
        let f = Tensor::from_fn([3, 4], |i| i as f64 - 5.0);
        let cm = m.channel_mix(&store, &Tensor::zeros([4]), &f).unwrap();
        assert!(cm.data().iter().all(|&v| v == 0.0));
        assert_eq!(cm.dims(), &[3, 4]);
        let pcm = m.point_mix(&store, &Tensor::zeros([4]), &f).unwrap();
        assert!(pcm.data().iter().all(|&v| v == 0.0));
        assert_eq!(pcm.dims(), &[4, 5]);
    }

    #[test]
    fn point_mix_shape() {
        let mut store = ParamStore::new();
        let m = mixer(&mut store, 8, 4, 8, 32, false);
        let pcm = m.point_mix(&store, &Tensor::full([8], 0.3), &Tensor::from_fn([8, 8], |i| (i as f64).sin())).unwrap();
        assert_eq!(pcm.dims(), &[8, 32]);
    }

    #[test]
    fn identity_point_mix_is_ln_of_transpose() {
        let mut store = ParamStore::new();
        let m = mixer(&mut store, 3, 1, 3, 3, true);
        store.set(m.point_gen.b, Tensor::identity(3).reshape([9]).unwrap()).unwrap();
        let cm = Tensor::from_fn([3, 3], |i| (i * i) as f64 * 0.1);
        let pcm = m.point_mix(&store, &Tensor::zeros([3]), &cm).unwrap();
        let mut tape = Tape::new();
        let ct = tape.constant(cm.permute(&[1, 0]).unwrap());
        let g = tape.constant(Tensor::full([3], 1.0));
        let b = tape.constant(Tensor::zeros([3]));
        let want = tape.layer_norm(ct, g, b, crate::nn::LAYER_NORM_EPS).unwrap();
        let want = tape.relu(want);
        assert!(pcm.max_abs_diff(tape.value(want)) < 1e-15);
    }

    #[test]
    fn residual_identity_at_init() {
        let mut store = ParamStore::new();
        let m = mixer(&mut store, 8, 2, 4, 16, false);
        let q = Tensor::from_fn([8], |i| i as f64 * 0.37 - 1.0);
        let f = Tensor::from_fn([4, 8], |i| (i as f64 * 0.7).cos());
        assert_eq!(m.adaptive_mix(&store, &q, &f).unwrap(), q);
    }

    #[test]
    fn grouped_generator_has_one_over_g_weights() {
        let mut s1 = ParamStore::new();
        let m1 = mixer(&mut s1, 16, 1, 4, 4, false);
        let mut s4 = ParamStore::new();
        let m4 = mixer(&mut s4, 16, 4, 4, 4, false);
        let count = |s: &ParamStore, g: &Generator| s.get(g.w.unwrap()).tensor.len() + s.get(g.b).tensor.len();
        assert_eq!(count(&s1, &m1.channel_gen), 4 * count(&s4, &m4.channel_gen));
    }

    #[test]
    fn queries_mix_independently() {
        let mut store = ParamStore::new();
        let m = mixer(&mut store, 4, 2, 3, 6, false);
        fill_random(&mut store, 3);
        let mut rng = Rng::new(4);
        let q = Tensor::from_fn([2, 4], |_| rng.normal());
        let f = Tensor::from_fn([2, 3, 4], |_| rng.normal());
        let run = |q: &Tensor, f: &Tensor| {
            let mut tape = Tape::new();
            let (qv, fv) = (tape.constant(q.clone()), tape.constant(f.clone()));
            let o = m.forward(&mut tape, &store, qv, fv).unwrap();
            tape.value(o).clone()
        };
        let a = run(&q, &f);
        let swapped = |t: &Tensor| Tensor::stack(&[t.select0(1), t.select0(0)]).unwrap();
        let b = run(&swapped(&q), &swapped(&f));
        assert_eq!(b, swapped(&a));
    }

    #[test]
    fn keyframe_spatial_mix_ignores_frame_order() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let sp = AdaptiveMixer::new(&mut store, "s", 4, 2, 3, 6, false, &mut rng).unwrap();
        let tm = AdaptiveMixer::new(&mut store, "t", 4, 2, 2, 4, false, &mut rng).unwrap();
        fill_random(&mut store, 6);
        let q = Tensor::from_fn([1, 4], |_| rng.normal());
        let f = Tensor::from_fn([1, 2, 3, 4], |_| rng.normal());
        let flipped = f.permute(&[0, 1, 2, 3]).unwrap();
        let mut fl = flipped.clone();
        let half = 12;
        fl.data_mut()[..half].copy_from_slice(&f.data()[half..]);
        fl.data_mut()[half..].copy_from_slice(&f.data()[..half]);
        let run = |f: &Tensor| {
            let mut tape = Tape::new();
            let (qs, qt, fv) = (tape.constant(q.clone()), tape.constant(q.clone()), tape.constant(f.clone()));
            let (a, _) = decoupled_mix_keyframe(&mut tape, &store, &sp, &tm, qs, qt, fv).unwrap();
            tape.value(a).clone()
        };
        assert!(run(&f).max_abs_diff(&run(&fl)) < 1e-14);
    }

    #[test]
    fn tubelet_frames_mix_independently() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let sp = AdaptiveMixer::new(&mut store, "s", 4, 1, 2, 4, false, &mut rng).unwrap();
        let tm = AdaptiveMixer::new(&mut store, "t", 4, 1, 3, 6, false, &mut rng).unwrap();
        fill_random(&mut store, 8);
        let qs = Tensor::from_fn([1, 3, 4], |_| rng.normal());
        let qt = Tensor::from_fn([1, 4], |_| rng.normal());
        let f = Tensor::from_fn([1, 3, 2, 4], |_| rng.normal());
        let run = |f: &Tensor| {
            let mut tape = Tape::new();
            let (a, b, c) = (tape.constant(qs.clone()), tape.constant(qt.clone()), tape.constant(f.clone()));
            let (s, t) = decoupled_mix_tubelet(&mut tape, &store, &sp, &tm, a, b, c).unwrap();
            (tape.value(s).clone(), tape.value(t).clone())
        };
        let mut f2 = f.clone();
        f2.data_mut()[8] += 1.0; // frame 1
        let (a, at) = run(&f);
        let (b, bt) = run(&f2);
        for t in [0, 2] {
            for c in 0..4 {
                assert_eq!(a.at(&[0, t, c]), b.at(&[0, t, c]));
            }
        }
        assert!((0..4).any(|c| a.at(&[0, 1, c]) != b.at(&[0, 1, c])));
        assert_ne!(at, bt);
    }

    #[test]
    fn every_strategy_runs_in_both_modes() {
        for strategy in MixStrategy::ALL {
            for mode in [Mode::Keyframe, Mode::Tubelet] {
                let mut store = ParamStore::new();
                let mut rng = Rng::new(11);
                let shape = MixerShape { dim: 4, groups: 2, points: 3, frames: 2, out_ratio: 2, fixed: false };
                let mx = DecoupledMixer::new(&mut store, "mix", strategy, shape, &mut rng).unwrap();
                fill_random(&mut store, 12);
                let l = if mode == Mode::Keyframe { 1 } else { 2 };
                let mut tape = Tape::new();
                let qs = tape.constant(Tensor::from_fn([2, l, 4], |_| rng.normal()));
                let qt = tape.constant(Tensor::from_fn([2, 4], |_| rng.normal()));
                let f = tape.constant(Tensor::from_fn([2, 2, 3, 4], |_| rng.normal()));
                let (a, b) = mx.forward(&mut tape, &store, mode, qs, qt, f).unwrap();
                assert_eq!(tape.dims(a), &[2, l, 4], "{strategy:?} {mode:?}");
                assert_eq!(tape.dims(b), &[2, 4]);
                assert_eq!(strategy.as_str().parse::<MixStrategy>().unwrap(), strategy);
            }
        }
    }
}
