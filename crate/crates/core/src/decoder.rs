//! The ASAM decoder: stacked modules of self-attention, adaptive sampling,
//! decoupled mixing and positional refinement, plus the prediction heads of
//! the keyframe and tubelet detectors.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::feature_space::FeatureSpace4D;
use crate::geometry::{decode_boxes_var, grid_offsets, points_var, update_positional_var, Mode, PositionalQuery, QuerySet};
use crate::mixer::{DecoupledMixer, MixStrategy, MixerShape};
use crate::nn::{Ffn, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    ShortTerm,
    LongTerm,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::ShortTerm => "short_term",
            ClassifierKind::LongTerm => "long_term",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short_term" => Ok(ClassifierKind::ShortTerm),
            "long_term" => Ok(ClassifierKind::LongTerm),
            other => Err(Error::Config(format!("unknown classifier {other:?} (short_term|long_term)"))),
        }
    }
}

/// Where sampling points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Offsets regressed from the spatial query.
    Adaptive,
    /// A fixed `m × m` grid inside the decoded box.
    Grid(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsamConfig {
    pub modules: usize,
    pub queries: usize,
    pub dim: usize,
    /// Sampling points per group and frame (`P_in`); ignored for grid sampling.
    pub points: usize,
    pub groups: usize,
    pub heads: usize,
    pub mode: Mode,
    pub classes: usize,
    pub classifier: ClassifierKind,
    /// Input frames `T_in` of the feature volume.
    pub frames: usize,
    pub out_ratio: usize,
    pub strategy: MixStrategy,
    pub fixed_mixing: bool,
    pub sampling: Sampling,
    /// Rows kept per clip in the query bank.
    pub bank_k: usize,
    /// Clips per long-term window.
    pub bank_window: usize,
    pub cross_layers: usize,
}

impl AsamConfig {
    pub fn default_for(mode: Mode) -> Self {
        let (modules, classes, frames) = match mode {
            Mode::Keyframe => (6, 80, 4),
            Mode::Tubelet => (3, 24, 8),
        };
        Self {
            modules,
            queries: 100,
            dim: 256,
            points: 32,
            groups: 4,
            heads: 8,
            mode,
            classes,
            classifier: ClassifierKind::ShortTerm,
            frames,
            out_ratio: 4,
            strategy: MixStrategy::Parallel,
            fixed_mixing: false,
            sampling: Sampling::Adaptive,
            bank_k: 5,
            bank_window: 60,
            cross_layers: 3,
        }
    }

    /// Points per group and frame actually sampled.
    pub fn points_per_frame(&self) -> usize {
        match self.sampling {
            Sampling::Adaptive => self.points,
            Sampling::Grid(m) => m * m,
        }
    }

    /// `P_out`.
    pub fn points_out(&self) -> usize {
        self.out_ratio * self.points_per_frame()
    }

    /// `T_out`.
    pub fn frames_out(&self) -> usize {
        self.out_ratio * self.frames
    }

    /// Rows of the per-frame query axis: 1 for keyframes, `T` for tubelets.
    pub fn query_frames(&self) -> usize {
        match self.mode {
            Mode::Keyframe => 1,
            Mode::Tubelet => self.frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.modules == 0 {
            return bad("at least one ASAM module is required".into());
        }
        if self.queries == 0 || self.dim == 0 || self.frames == 0 || self.classes == 0 {
            return bad("queries, dim, frames and classes must be positive".into());
        }
        if self.groups == 0 || !self.dim.is_multiple_of(self.groups) {
            return bad(format!("dim {} not divisible by {} groups", self.dim, self.groups));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.points_per_frame() == 0 || self.out_ratio == 0 {
            return bad("sampling points and out ratio must be positive".into());
        }
        if self.classifier == ClassifierKind::LongTerm {
            if self.mode != Mode::Keyframe {
                return bad("the long-term classifier is a keyframe-mode head".into());
            }
            if self.bank_k == 0 || self.bank_window == 0 || self.cross_layers == 0 {
                return bad("long-term classifier needs k, w and cross layers > 0".into());
            }
        }
        Ok(())
    }
}

/// Cross-attention over a window of stored queries, then an FFN over the
/// concatenation of the input and the attended features.
#[derive(Debug, Clone)]
pub struct LongTermClassifier {
    pub cross: Vec<MultiHeadAttention>,
    pub ffn: Ffn,
    pub width: usize,
}

impl LongTermClassifier {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, layers: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let cross = (0..layers)
            .map(|l| MultiHeadAttention::new(store, &format!("{name}.cross{l}"), width, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let ffn = Ffn::new(store, &format!("{name}.ffn"), 2 * width, 4 * width, classes, (Init::Normal(0.02), Init::Zeros), rng)?;
        Ok(Self { cross, ffn, width })
    }

    /// `s ∈ [N, d]`, `window ∈ [w·k, d]` to logits `[N, C]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, s: Var, window: Var) -> Result<Var> {
        if tape.dims(window).len() != 2 || tape.dims(window)[1] != self.width {
            return Err(shape_err!("long-term window {:?}, width {}", tape.dims(window), self.width));
        }
        let mut sp = s;
        for layer in &self.cross {
            sp = layer.forward(tape, store, sp, window)?;
        }
        let cat = tape.concat(&[s, sp], 1)?;
        self.ffn.forward(tape, store, cat)
    }
}

#[derive(Debug, Clone)]
pub enum ActionClassifier {
    ShortTerm(Ffn),
    LongTerm(LongTermClassifier),
}

#[derive(Debug, Clone)]
pub enum Heads {
    Keyframe { human: Ffn, action: ActionClassifier },
    Tubelet { class: Ffn },
}

/// Pre-norm residual self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    /// `x ∈ [B, n, D]` or `[n, D]`: `x + MHA(LN(x), LN(x))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h)?;
        tape.add(x, a)
    }
}

#[derive(Debug, Clone)]
pub struct AsamModule {
    pub spatial_attn: SelfAttention,
    /// Tubelet mode only: attention across the frames of one instance.
    pub frame_attn: Option<SelfAttention>,
    pub temporal_attn: SelfAttention,
    pub offsets: Option<Linear>,
    pub mixer: DecoupledMixer,
    pub box_head: Ffn,
    pub heads: Heads,
}

/// The query state threaded through the modules.
#[derive(Debug, Clone, Copy)]
pub struct QueryVars {
    /// `[N, L, D]`.
    pub spatial: Var,
    /// `[N, L, 4]`.
    pub positional: Var,
    /// `[N, D]`.
    pub temporal: Var,
}

impl QueryVars {
    pub fn to_query_set(&self, tape: &Tape, mode: Mode) -> QuerySet {
        let qp = tape.value(self.positional).data();
        QuerySet {
            spatial: tape.value(self.spatial).clone(),
            positional: qp.chunks(4).map(|c| PositionalQuery { x: c[0], y: c[1], z: c[2], r: c[3] }).collect(),
            temporal: tape.value(self.temporal).clone(),
            mode,
        }
    }
}

/// Predictions after one module. Boxes are `xyxy` pixels.
#[derive(Debug, Clone, Copy)]
pub struct ModuleOutput {
    pub queries: QueryVars,
    /// `[N, L, 4]`.
    pub boxes: Var,
    /// Keyframe: `[N, 2]` logits, column 0 = human, column 1 = background.
    pub human_logits: Option<Var>,
    /// Keyframe: `[N, C]` logits of independent sigmoids.
    pub action_logits: Option<Var>,
    /// Tubelet: `[N, C + 1]` logits, last column = background.
    pub class_logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub modules: Vec<ModuleOutput>,
}

impl DecoderOutput {
    pub fn last(&self) -> &ModuleOutput {
        self.modules.last().expect("decoder has at least one module")
    }
}

/// Probabilities read off a [`ModuleOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    /// Keyframe `[N, 4]`, tubelet `[N, T, 4]`.
    pub boxes: Tensor,
    pub human: Option<Tensor>,
    pub actions: Option<Tensor>,
    pub classes: Option<Tensor>,
}

impl DetectionOutput {
    pub fn read(tape: &Tape, out: &ModuleOutput, mode: Mode) -> Result<Self> {
        let b = tape.value(out.boxes).clone();
        let boxes = match mode {
            Mode::Keyframe => {
                let n = b.dims()[0];
                b.reshape([n, 4])?
            }
            Mode::Tubelet => b,
        };
        let softmax = |v: Var| softmax_rows(tape.value(v));
        Ok(Self {
            boxes,
            human: out.human_logits.map(softmax),
            actions: out.action_logits.map(|v| tape.value(v).map(|x| 1.0 / (1.0 + (-x).exp()))),
            classes: out.class_logits.map(softmax),
        })
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let w = *t.dims().last().unwrap_or(&1);
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: AsamConfig,
    pub query_spatial: ParamId,
    pub query_temporal: ParamId,
    pub modules: Vec<AsamModule>,
}

impl Decoder {
    pub fn new(config: AsamConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.dim;
        let query_spatial = store.init("queries.spatial", &[c.queries, d], Init::Normal(1.0), rng)?;
        let query_temporal = store.init("queries.temporal", &[c.queries, d], Init::Normal(1.0), rng)?;
        let mut modules = Vec::with_capacity(c.modules);
        for m in 0..c.modules {
            let name = format!("asam{m}");
            let spatial_attn = SelfAttention::new(store, &format!("{name}.sa_spatial"), d, c.heads, rng)?;
            let frame_attn = match c.mode {
                Mode::Tubelet => Some(SelfAttention::new(store, &format!("{name}.sa_frames"), d, c.heads, rng)?),
                Mode::Keyframe => None,
            };
            let temporal_attn = SelfAttention::new(store, &format!("{name}.sa_temporal"), d, c.heads, rng)?;
            let offsets = match c.sampling {
                Sampling::Adaptive => Some(offset_head(store, &format!("{name}.offsets"), d, c.points, c.groups, rng)?),
                Sampling::Grid(_) => None,
            };
            let shape = MixerShape {
                dim: d,
                groups: c.groups,
                points: c.points_per_frame(),
                frames: c.frames,
                out_ratio: c.out_ratio,
                fixed: c.fixed_mixing,
            };
            let mixer = DecoupledMixer::new(store, &format!("{name}.mix"), c.strategy, shape, rng)?;
            let box_head = Ffn::new(store, &format!("{name}.box"), d, 2 * d, 4, (Init::Zeros, Init::Zeros), rng)?;
            let heads = match c.mode {
                Mode::Keyframe => {
                    let human = Ffn::new(store, &format!("{name}.human"), d, 2 * d, 2, (Init::Normal(0.02), Init::Zeros), rng)?;
                    let action = match c.classifier {
                        ClassifierKind::ShortTerm => ActionClassifier::ShortTerm(Ffn::new(
                            store,
                            &format!("{name}.action"),
                            2 * d,
                            4 * d,
                            c.classes,
                            (Init::Normal(0.02), Init::Zeros),
                            rng,
                        )?),
                        ClassifierKind::LongTerm => ActionClassifier::LongTerm(LongTermClassifier::new(
                            store,
                            &format!("{name}.long_term"),
                            2 * d,
                            c.heads,
                            c.cross_layers,
                            c.classes,
                            rng,
                        )?),
                    };
                    Heads::Keyframe { human, action }
                }
                Mode::Tubelet => Heads::Tubelet {
                    class: Ffn::new(store, &format!("{name}.class"), 2 * d, 4 * d, c.classes + 1, (Init::Normal(0.02), Init::Zeros), rng)?,
                },
            };
            modules.push(AsamModule { spatial_attn, frame_attn, temporal_attn, offsets, mixer, box_head, heads });
        }
        Ok(Self { config, query_spatial, query_temporal, modules })
    }

    /// Learned content queries (shared over the `L` frame rows) and
    /// whole-frame positional queries.
    pub fn initial_queries(&self, tape: &mut Tape, store: &ParamStore, frame: (f64, f64)) -> Result<QueryVars> {
        let (n, l, d) = (self.config.queries, self.config.query_frames(), self.config.dim);
        let qs = tape.param(store, self.query_spatial);
        let qs = tape.reshape(qs, &[n, 1, d])?;
        let spatial = if l == 1 { qs } else { tape.index_select(qs, 1, &vec![0; l])? };
        let temporal = tape.param(store, self.query_temporal);
        let whole = PositionalQuery::whole_frame(frame.0, frame.1).as_array();
        let qp = Tensor::new([n, l, 4], (0..n * l).flat_map(|_| whole).collect())?;
        let positional = tape.constant(qp);
        Ok(QueryVars { spatial, positional, temporal })
    }

    fn check_space(&self, space: &FeatureSpace4D) -> Result<()> {
        if space.channels() != self.config.dim || space.frames() != self.config.frames {
            return Err(shape_err!(
                "feature space has D={}, T={}; decoder expects D={}, T={}",
                space.channels(),
                space.frames(),
                self.config.dim,
                self.config.frames
            ));
        }
        Ok(())
    }

    /// One ASAM module on `q`; `space_var` must hold `space`'s tensor.
    pub fn asam_forward(&self, tape: &mut Tape, store: &ParamStore, m: usize, q: QueryVars, space: &FeatureSpace4D, space_var: Var) -> Result<QueryVars> {
        let c = &self.config;
        let module = self.modules.get(m).ok_or_else(|| Error::Config(format!("no ASAM module {m}")))?;
        let (n, l, d, g) = (c.queries, c.query_frames(), c.dim, c.groups);
        let p = c.points_per_frame();
        if tape.dims(q.spatial) != [n, l, d] || tape.dims(q.positional) != [n, l, 4] || tape.dims(q.temporal) != [n, d] {
            return Err(shape_err!(
                "queries {:?}/{:?}/{:?} for {:?} mode with N={}, D={}",
                tape.dims(q.spatial),
                tape.dims(q.positional),
                tape.dims(q.temporal),
                c.mode,
                n,
                d
            ));
        }

        // self-attention
        let qs = match &module.frame_attn {
            None => {
                let x = tape.reshape(q.spatial, &[n, d])?;
                let x = module.spatial_attn.forward(tape, store, x)?;
                tape.reshape(x, &[n, 1, d])?
            }
            Some(frames) => {
                let x = tape.permute(q.spatial, &[1, 0, 2])?;
                let x = module.spatial_attn.forward(tape, store, x)?;
                let x = tape.permute(x, &[1, 0, 2])?;
                frames.forward(tape, store, x)?
            }
        };
        let qt = module.temporal_attn.forward(tape, store, q.temporal)?;

        // adaptive sampling
        let offsets = match &module.offsets {
            Some(head) => {
                let o = head.forward(tape, store, qs)?;
                tape.reshape(o, &[n, l, p, g, 3])?
            }
            None => {
                let Sampling::Grid(m) = c.sampling else { unreachable!("offset head exists for adaptive sampling") };
                tape.constant(grid_offsets(m, g))
            }
        };
        let coords = points_var(tape, q.positional, offsets)?;
        let sampled = tape.sample(space_var, coords, space.layout(g))?;
        let f = tape.reshape(sampled, &[n, c.frames, p, d])?;

        // decoupled mixing
        let (qs, qt) = module.mixer.forward(tape, store, c.mode, qs, qt, f)?;

        // positional refinement
        let delta = module.box_head.forward(tape, store, qs)?;
        let qp = update_positional_var(tape, q.positional, delta)?;
        Ok(QueryVars { spatial: qs, positional: qp, temporal: qt })
    }

    /// Heads of module `m`. `window` is the long-term window
    /// `[w·k, 2D]`, required by the long-term classifier.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, m: usize, q: QueryVars, window: Option<Var>) -> Result<ModuleOutput> {
        let (n, d) = (self.config.queries, self.config.dim);
        let module = &self.modules[m];
        let boxes = decode_boxes_var(tape, q.positional)?;
        let mut out = ModuleOutput { queries: q, boxes, human_logits: None, action_logits: None, class_logits: None };
        match &module.heads {
            Heads::Keyframe { human, action } => {
                let qs = tape.reshape(q.spatial, &[n, d])?;
                out.human_logits = Some(human.forward(tape, store, qs)?);
                let s = tape.concat(&[qs, q.temporal], 1)?;
                out.action_logits = Some(match action {
                    ActionClassifier::ShortTerm(ffn) => ffn.forward(tape, store, s)?,
                    ActionClassifier::LongTerm(lt) => {
                        let w = window.ok_or_else(|| Error::Config("long-term classifier needs a query bank window".into()))?;
                        lt.forward(tape, store, s, w)?
                    }
                });
            }
            Heads::Tubelet { class } => {
                let pooled = tape.mean_axis(q.spatial, 1)?;
                let s = tape.concat(&[pooled, q.temporal], 1)?;
                out.class_logits = Some(class.forward(tape, store, s)?);
            }
        }
        Ok(out)
    }

    /// `M` chained modules with heads after each.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, space: &FeatureSpace4D, window: Option<&Tensor>) -> Result<DecoderOutput> {
        self.check_space(space)?;
        let space_var = tape.constant(space.data.clone());
        let window = window.map(|w| tape.constant(w.clone()));
        let mut q = self.initial_queries(tape, store, space.frame_size())?;
        let mut modules = Vec::with_capacity(self.modules.len());
        for m in 0..self.modules.len() {
            q = self.asam_forward(tape, store, m, q, space, space_var)?;
            modules.push(self.predict(tape, store, m, q, window)?);
        }
        Ok(DecoderOutput { modules })
    }

    /// Forward pass on a throwaway tape, returning final-module
    /// probabilities and the final `Q_s ‖ Q_t` rows `[N, 2D]`.
    pub fn infer(&self, store: &ParamStore, space: &FeatureSpace4D, window: Option<&Tensor>) -> Result<(DetectionOutput, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, space, window)?;
        let last = out.last();
        let det = DetectionOutput::read(&tape, last, self.config.mode)?;
        let (n, d) = (self.config.queries, self.config.dim);
        let pooled = tape.mean_axis(last.queries.spatial, 1)?;
        let s = tape.concat(&[pooled, last.queries.temporal], 1)?;
        debug_assert_eq!(tape.dims(s), [n, 2 * d]);
        Ok((det, tape.value(s).clone()))
    }
}

/// Offset regressor `D → P·G·3` with zero weights and biases spreading the
/// initial points over the box.
fn offset_head(store: &mut ParamStore, name: &str, d: usize, points: usize, groups: usize, rng: &mut Rng) -> Result<Linear> {
    let width = points * groups * 3;
    let head = Linear::new(store, name, d, width, Init::Zeros, Init::Zeros, rng)?;
    let bias = Tensor::from_fn([width], |i| if i % 3 == 2 { 0.0 } else { rng.uniform_range(-0.5, 0.5) });
    store.set(head.b, bias)?;
    Ok(head)
}
