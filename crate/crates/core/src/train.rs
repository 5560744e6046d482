//! Toy training loop: forward, match, loss, backward and a parameter update
//! per iteration, full batch over the scenario clips.

use crate::autograd::Tape;
use crate::bank::QueryBank;
use crate::config::{Optimizer, RunConfig, Schedule};
use crate::criterion::{training_loss, training_loss_given, training_matchings, LossBreakdown};
use crate::decoder::{ClassifierKind, Decoder};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, check_gradients_on_branch, GradCheckReport};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scenario::Clip;
use crate::tensor::Tensor;

/// Mixed into the run seed so parameter init and scenario painting draw
/// from different streams.
const INIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// A decoder together with its parameters and the config it was built from.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub decoder: Decoder,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.seed ^ INIT_STREAM);
        let decoder = Decoder::new(config.model.clone(), &mut store, &mut rng)?;
        Ok(Self { config: config.clone(), decoder, store })
    }

    /// Long-term window for clip `index`, when the classifier needs one.
    pub fn window(&self, bank: Option<&QueryBank>, index: usize) -> Result<Option<Tensor>> {
        match self.config.model.classifier {
            ClassifierKind::ShortTerm => Ok(None),
            ClassifierKind::LongTerm => {
                let bank = bank.ok_or_else(|| Error::Config("long-term classifier needs a query bank".into()))?;
                bank.window(index, self.config.model.bank_window).map(Some)
            }
        }
    }

    /// Reorders the learned query rows: query `i` becomes query `perm[i]`'s.
    pub fn permute_queries(&mut self, perm: &[usize]) -> Result<()> {
        for name in ["queries.spatial", "queries.temporal"] {
            let id = self.store.find(name).ok_or_else(|| Error::Config(format!("missing {name}")))?;
            let t = &self.store.get(id).tensor;
            let (n, d) = (t.dims()[0], t.dims()[1]);
            if perm.len() != n {
                return Err(Error::Input(format!("permutation of {} for {n} queries", perm.len())));
            }
            let rows: Vec<f64> = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
            self.store.set(id, Tensor::new([n, d], rows)?)?;
        }
        Ok(())
    }

    /// Summed training loss over `clips` without touching gradients.
    pub fn loss(&self, clips: &[Clip], bank: Option<&QueryBank>) -> Result<LossBreakdown> {
        let mut total = LossBreakdown::default();
        for (i, clip) in clips.iter().enumerate() {
            let mut tape = Tape::new();
            let (_, br) = self.clip_loss(&mut tape, clip, self.window(bank, i)?.as_ref())?;
            total = sum_breakdowns(&total, &br);
        }
        Ok(total)
    }

    fn clip_loss(&self, tape: &mut Tape, clip: &Clip, window: Option<&Tensor>) -> Result<(crate::autograd::Var, LossBreakdown)> {
        let out = self.decoder.forward(tape, &self.store, &clip.space, window)?;
        training_loss(tape, &out, &clip.gt, clip.space.frame_size(), &self.config.weights, self.config.focal)
    }
}

impl Model {
    /// Finite-difference check of clip `index`'s training loss against the
    /// tape gradient for every parameter. The matching is fixed at the
    /// current parameters; `on_branch` also fixes the pieces of the
    /// piecewise ops (see [`check_gradients_on_branch`]).
    pub fn check_gradients(&self, clips: &[Clip], index: usize, bank: Option<&QueryBank>, h: f64, tol: f64, on_branch: bool) -> Result<GradCheckReport> {
        let clip = clips.get(index).ok_or_else(|| Error::Input(format!("no clip {index} among {}", clips.len())))?;
        let window = self.window(bank, index)?;
        let frame = clip.space.frame_size();
        let (w, focal) = (&self.config.weights, self.config.focal);
        let mut tape = Tape::new();
        let out = self.decoder.forward(&mut tape, &self.store, &clip.space, window.as_ref())?;
        let sigmas = training_matchings(&tape, &out, &clip.gt, frame, w, focal)?;
        let f = |tape: &mut Tape, store: &ParamStore| {
            let out = self.decoder.forward(tape, store, &clip.space, window.as_ref())?;
            Ok(training_loss_given(tape, &out, &clip.gt, frame, w, focal, &sigmas)?.0)
        };
        let ids = self.store.ids();
        if on_branch {
            check_gradients_on_branch(&self.store, &ids, h, tol, f)
        } else {
            check_gradients(&self.store, &ids, h, tol, f)
        }
    }
}

fn sum_breakdowns(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    let per_module = if a.per_module.is_empty() {
        b.per_module.clone()
    } else {
        a.per_module.iter().zip(&b.per_module).map(|(x, y)| x + y).collect()
    };
    LossBreakdown {
        total: a.total + b.total,
        cls: a.cls + b.cls,
        l1: a.l1 + b.l1,
        giou: a.giou + b.giou,
        action: a.action + b.action,
        per_module,
        matched: a.matched + b.matched,
    }
}

/// Gradient descent with decoupled weight decay, either with heavy-ball
/// momentum or with Adam moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    schedule: Schedule,
    horizon: usize,
    momentum: f64,
    weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(config: &RunConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.dims().to_vec())).collect::<Vec<_>>();
        Self {
            kind: config.optimizer,
            lr: config.lr,
            schedule: config.schedule,
            horizon: config.iterations,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            step: 0,
            first: zeros(),
            second: match config.optimizer {
                Optimizer::AdamW => zeros(),
                Optimizer::Sgd => Vec::new(),
            },
        }
    }

    /// Applies the gradients held in `store`.
    pub fn apply(&mut self, store: &mut ParamStore) {
        let lr = self.lr * self.schedule.factor(self.step as usize, self.horizon);
        self.step += 1;
        let (wd, mu) = (self.weight_decay, self.momentum);
        let t = self.step as i32;
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.data();
            let value = p.tensor.data_mut();
            let m = self.first[i].data_mut();
            match self.kind {
                Optimizer::Sgd => {
                    for ((w, g), v) in value.iter_mut().zip(grad).zip(m.iter_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * (*v + wd * *w);
                    }
                }
                Optimizer::AdamW => {
                    let s = self.second[i].data_mut();
                    let (c1, c2) = (1.0 - mu.powi(t), 1.0 - ADAM_BETA2.powi(t));
                    for (((w, g), m), s) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *m = mu * *m + (1.0 - mu) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        let update = (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                        *w -= lr * (update + wd * *w);
                    }
                }
            }
        }
    }
}

/// One iteration's record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Runs one full-batch iteration over `clips` and returns the loss seen
/// before the update.
pub fn train_step(model: &mut Model, opt: &mut OptimizerState, clips: &[Clip], bank: Option<&QueryBank>, iteration: usize) -> Result<StepRecord> {
    model.store.zero_grad();
    let mut total = LossBreakdown::default();
    for (i, clip) in clips.iter().enumerate() {
        let window = model.window(bank, i)?;
        let mut tape = Tape::new();
        let (loss, br) = model.clip_loss(&mut tape, clip, window.as_ref())?;
        if !br.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {iteration}, clip {i}: cls {} l1 {} giou {} action {}",
                br.cls, br.l1, br.giou, br.action
            )));
        }
        tape.backward(loss).accumulate_into(&tape, &mut model.store);
        total = sum_breakdowns(&total, &br);
    }
    let grad_norm = model.store.iter().map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at iteration {iteration}")));
    }
    let clip = model.config.grad_clip;
    if clip > 0.0 && grad_norm > clip {
        let k = clip / grad_norm;
        for p in model.store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    opt.apply(&mut model.store);
    Ok(StepRecord { iteration, loss: total, grad_norm })
}

/// Trains for `config.iterations` steps. `on_step` sees the model after
/// each update and may stop early by returning `false`.
pub fn train(
    model: &mut Model,
    clips: &[Clip],
    bank: Option<&QueryBank>,
    mut on_step: impl FnMut(&Model, &StepRecord) -> Result<bool>,
) -> Result<Vec<StepRecord>> {
    let mut opt = OptimizerState::new(&model.config, &model.store);
    let mut trace = Vec::with_capacity(model.config.iterations);
    for it in 0..model.config.iterations {
        let rec = train_step(model, &mut opt, clips, bank, it)?;
        let go_on = on_step(model, &rec)?;
        trace.push(rec);
        if !go_on {
            break;
        }
    }
    Ok(trace)
}

/// Means of consecutive non-overlapping windows of `window` losses; a
/// trailing partial window is dropped.
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    trace.chunks_exact(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}
