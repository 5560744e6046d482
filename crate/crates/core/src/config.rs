//! Run configuration: a plain-text `key=value` file covering the model,
//! losses, optimiser, synthetic scenario and evaluation thresholds.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. `mode` picks the defaults every other key overrides, so it is
//! applied first wherever it appears.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::criterion::{Focal, LossWeights};
use crate::decoder::{AsamConfig, ClassifierKind, Sampling};
use crate::error::{Error, Result};
use crate::geometry::Mode;
use crate::mixer::MixStrategy;
use crate::scenario::{Preset, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Gradient descent with optional momentum.
    Sgd,
    AdamW,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::AdamW => "adamw",
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adamw" => Ok(Optimizer::AdamW),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (sgd|adamw)"))),
        }
    }
}

/// Learning-rate schedule over `iterations`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero.
    Cosine,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    /// Multiplier on the base rate at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?} (constant|cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: AsamConfig,
    pub weights: LossWeights,
    pub focal: Focal,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Keep a detection when its background probability is below this.
    pub bg_threshold: f64,
    pub link_iou: f64,
    pub eval_iou: f64,
    pub log_every: usize,
    /// Side of the fixed sampling grid, used when `sampling=grid`.
    pub grid_side: usize,
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "mode", "queries", "dim", "points", "groups", "heads", "modules", "classes", "frames", "out_ratio", "mixing",
    "fixed_mixing", "sampling", "grid_side", "classifier", "bank_k", "bank_window", "cross_layers", "lambda_cls",
    "lambda_l1", "lambda_giou", "lambda_action", "focal_gamma", "focal_alpha", "preset", "width", "height", "clips",
    "max_actors", "noise", "scales", "seed", "optimizer", "lr", "schedule", "momentum", "weight_decay", "iterations", "grad_clip",
    "bg_threshold", "link_iou", "eval_iou", "log_every",
];

impl RunConfig {
    /// Full-scale defaults for `mode`.
    pub fn default_for(mode: Mode) -> Self {
        let model = AsamConfig::default_for(mode);
        Self {
            scenario: ScenarioConfig {
                preset: Preset::Random,
                mode,
                width: 64,
                height: 64,
                frames: model.frames,
                clips: 3,
                max_actors: 2,
                classes: model.classes,
                channels: model.dim,
                scales: 4,
                noise: 0.05,
            },
            model,
            weights: LossWeights::default_for(mode),
            focal: Focal::default(),
            seed: 0,
            optimizer: Optimizer::AdamW,
            lr: 2.0e-5,
            schedule: Schedule::Constant,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 500,
            grad_clip: 0.0,
            bg_threshold: match mode {
                Mode::Keyframe => 0.3,
                Mode::Tubelet => 0.7,
            },
            link_iou: crate::tube::LINK_IOU,
            eval_iou: 0.5,
            log_every: 50,
            grid_side: 7,
        }
    }

    /// Small configuration used by the overfit runs and the examples.
    pub fn desk(mode: Mode) -> Self {
        let mut c = Self::default_for(mode);
        let settings: &[(&str, &str)] = &[
            ("queries", "10"),
            ("dim", "32"),
            ("points", "8"),
            ("groups", "4"),
            ("heads", "4"),
            ("modules", "2"),
            ("classes", "3"),
            ("frames", "4"),
            ("lr", "1e-3"),
            ("schedule", "cosine"),
            ("weight_decay", "1e-4"),
            ("iterations", "300"),
        ];
        for (k, v) in settings {
            c.set(k, v).expect("desk settings are valid keys");
        }
        c
    }

    pub fn mode(&self) -> Mode {
        self.model.mode
    }

    /// Parses `text`, starting from the defaults of its `mode` (or
    /// `fallback` when absent).
    pub fn parse(text: &str, fallback: Mode) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mode = match pairs.iter().rev().find(|p| p.1 == "mode") {
            Some((_, _, v)) => v.parse()?,
            None => fallback,
        };
        let mut cfg = Self::default_for(mode);
        for (n, k, v) in &pairs {
            if k != "mode" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {n}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. `mode` resets to that mode's defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
            }
        }
        let m = &mut self.model;
        match key {
            "mode" => *self = Self::default_for(value.parse()?),
            "queries" => m.queries = num(key, value)?,
            "dim" => {
                m.dim = num(key, value)?;
                self.scenario.channels = m.dim;
            }
            "points" => m.points = num(key, value)?,
            "groups" => m.groups = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "modules" => m.modules = num(key, value)?,
            "classes" => {
                m.classes = num(key, value)?;
                self.scenario.classes = m.classes;
            }
            "frames" => {
                m.frames = num(key, value)?;
                self.scenario.frames = m.frames;
            }
            "out_ratio" => m.out_ratio = num(key, value)?,
            "mixing" => m.strategy = value.parse::<MixStrategy>()?,
            "fixed_mixing" => m.fixed_mixing = flag(key, value)?,
            "sampling" => {
                m.sampling = match value {
                    "adaptive" => Sampling::Adaptive,
                    "grid" => Sampling::Grid(self.grid_side),
                    _ => return Err(Error::Config(format!("sampling: expected adaptive|grid, got {value:?}"))),
                }
            }
            "grid_side" => {
                self.grid_side = num(key, value)?;
                if let Sampling::Grid(_) = m.sampling {
                    m.sampling = Sampling::Grid(self.grid_side);
                }
            }
            "classifier" => m.classifier = value.parse::<ClassifierKind>()?,
            "bank_k" => m.bank_k = num(key, value)?,
            "bank_window" => m.bank_window = num(key, value)?,
            "cross_layers" => m.cross_layers = num(key, value)?,
            "lambda_cls" => self.weights.cls = num(key, value)?,
            "lambda_l1" => self.weights.l1 = num(key, value)?,
            "lambda_giou" => self.weights.giou = num(key, value)?,
            "lambda_action" => self.weights.action = num(key, value)?,
            "focal_gamma" => self.focal.gamma = num(key, value)?,
            "focal_alpha" => self.focal.alpha = num(key, value)?,
            "preset" => self.scenario.preset = value.parse()?,
            "width" => self.scenario.width = num(key, value)?,
            "height" => self.scenario.height = num(key, value)?,
            "clips" => self.scenario.clips = num(key, value)?,
            "max_actors" => self.scenario.max_actors = num(key, value)?,
            "noise" => self.scenario.noise = num(key, value)?,
            "scales" => self.scenario.scales = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "bg_threshold" => self.bg_threshold = num(key, value)?,
            "link_iou" => self.link_iou = num(key, value)?,
            "eval_iou" => self.eval_iou = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.scenario.validate()?;
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("bg_threshold", self.bg_threshold)?;
        unit("link_iou", self.link_iou)?;
        unit("eval_iou", self.eval_iou)?;
        unit("momentum", self.momentum)?;
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip), ("focal_gamma", self.focal.gamma), ("focal_alpha", self.focal.alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.scenario.channels != self.model.dim || self.scenario.frames != self.model.frames || self.scenario.classes != self.model.classes {
            return Err(Error::Config("scenario and model disagree on dim, frames or classes".into()));
        }
        Ok(())
    }

    /// `key=value` snapshot that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        put("mode", m.mode.as_str().into());
        put("queries", m.queries.to_string());
        put("dim", m.dim.to_string());
        put("points", m.points.to_string());
        put("groups", m.groups.to_string());
        put("heads", m.heads.to_string());
        put("modules", m.modules.to_string());
        put("classes", m.classes.to_string());
        put("frames", m.frames.to_string());
        put("out_ratio", m.out_ratio.to_string());
        put("mixing", m.strategy.as_str().into());
        put("fixed_mixing", m.fixed_mixing.to_string());
        put("sampling", if m.sampling == Sampling::Adaptive { "adaptive" } else { "grid" }.into());
        put("grid_side", self.grid_side.to_string());
        put("classifier", m.classifier.as_str().into());
        put("bank_k", m.bank_k.to_string());
        put("bank_window", m.bank_window.to_string());
        put("cross_layers", m.cross_layers.to_string());
        put("lambda_cls", self.weights.cls.to_string());
        put("lambda_l1", self.weights.l1.to_string());
        put("lambda_giou", self.weights.giou.to_string());
        put("lambda_action", self.weights.action.to_string());
        put("focal_gamma", self.focal.gamma.to_string());
        put("focal_alpha", self.focal.alpha.to_string());
        put("preset", self.scenario.preset.as_str().into());
        put("width", self.scenario.width.to_string());
        put("height", self.scenario.height.to_string());
        put("clips", self.scenario.clips.to_string());
        put("max_actors", self.scenario.max_actors.to_string());
        put("noise", self.scenario.noise.to_string());
        put("scales", self.scenario.scales.to_string());
        put("seed", self.seed.to_string());
        put("optimizer", self.optimizer.as_str().into());
        put("lr", self.lr.to_string());
        put("schedule", self.schedule.as_str().into());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("iterations", self.iterations.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("bg_threshold", self.bg_threshold.to_string());
        put("link_iou", self.link_iou.to_string());
        put("eval_iou", self.eval_iou.to_string());
        put("log_every", self.log_every.to_string());
        s
    }
}
