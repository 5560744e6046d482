//! Synthetic videos: moving box actors painted into multi-stage feature
//! maps, with ground truth for both detector variants.
//!
//! Each painted cell carries a presence flag, the offset from the cell
//! centre to the actor's box centre (in box units), the log box size and the
//! actor's labels, plus Gaussian noise. A fixed random lateral projection
//! maps the painted channels to the model width.

use crate::criterion::GroundTruthSet;
use crate::error::{Error, Result};
use crate::feature_space::{build_from_hierarchy, FeatureSpace4D, StageFeatureMap, MAX_STAGE};
use crate::geometry::{BoxXyxy, Mode};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tube::{iou_2d, ActionTube, FrameBox, Tubelet};

/// Painted channels before the labels.
pub const GEOMETRY_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Random,
    /// One actor whose box jumps between two adjacent frames.
    FastMotion,
    /// One actor missed by the per-frame detector on a single frame.
    Dropout,
    Empty,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Random, Preset::FastMotion, Preset::Dropout, Preset::Empty];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Random => "random",
            Preset::FastMotion => "fast-motion",
            Preset::Dropout => "dropout",
            Preset::Empty => "empty",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (random|fast-motion|dropout|empty)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    /// Frames per clip.
    pub frames: usize,
    pub clips: usize,
    pub max_actors: usize,
    pub classes: usize,
    /// Model width after the lateral projection.
    pub channels: usize,
    /// Number of stages fed to the feature volume, counted down from 5.
    pub scales: usize,
    pub noise: f64,
}

impl ScenarioConfig {
    pub fn video_frames(&self) -> usize {
        match self.mode {
            Mode::Keyframe => self.clips * self.frames,
            Mode::Tubelet => self.clips + self.frames - 1,
        }
    }

    pub fn min_stage(&self) -> usize {
        MAX_STAGE + 1 - self.scales
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.clips == 0 || self.classes == 0 || self.channels == 0 {
            return bad("frames, clips, classes and channels must be positive".into());
        }
        if !(1..=4).contains(&self.scales) {
            return bad(format!("scales must be 1..=4, got {}", self.scales));
        }
        if !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) || self.width == 0 || self.height == 0 {
            return bad(format!("frame {}x{} must be a positive multiple of 32", self.width, self.height));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub class: usize,
    /// Multi-hot keyframe actions; always contains `class`.
    pub actions: Vec<bool>,
    /// One box per video frame.
    pub boxes: Vec<BoxXyxy>,
    /// Frames on which the per-frame detector misses this actor.
    pub dropout: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub start: usize,
    /// Keyframe index within the video (keyframe mode).
    pub keyframe: usize,
    pub stages: Vec<StageFeatureMap>,
    pub space: FeatureSpace4D,
    pub gt: GroundTruthSet,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub video: String,
    pub actors: Vec<Actor>,
    pub clips: Vec<Clip>,
    /// `[C_paint, D]` weight and `[D]` bias per stage.
    pub lateral: Vec<(Tensor, Tensor)>,
}

fn inside(b: &BoxXyxy, w: f64, h: f64) -> bool {
    b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w && b[3] <= h && b[2] > b[0] && b[3] > b[1]
}

fn centred(cx: f64, cy: f64, bw: f64, bh: f64) -> BoxXyxy {
    [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0]
}

fn random_actors(cfg: &ScenarioConfig, rng: &mut Rng) -> Vec<Actor> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let count = 1 + rng.below(cfg.max_actors.max(1));
    let len = cfg.video_frames();
    (0..count.min(cfg.max_actors))
        .map(|i| {
            // each actor keeps to its own vertical strip
            let strip = w / count as f64;
            let bw = (rng.uniform_range(0.45, 0.8) * strip).min(w * 0.5);
            let bh = rng.uniform_range(0.3, 0.6) * h;
            let lo = i as f64 * strip + bw / 2.0;
            let hi = (i + 1) as f64 * strip - bw / 2.0;
            let x0 = rng.uniform_range(lo, hi.max(lo));
            let x1 = rng.uniform_range(lo, hi.max(lo));
            let y0 = rng.uniform_range(bh / 2.0, h - bh / 2.0);
            let y1 = rng.uniform_range(bh / 2.0, h - bh / 2.0);
            let boxes = (0..len)
                .map(|f| {
                    let a = if len > 1 { f as f64 / (len - 1) as f64 } else { 0.0 };
                    centred(x0 + a * (x1 - x0), y0 + a * (y1 - y0), bw, bh)
                })
                .collect();
            let class = rng.below(cfg.classes);
            let mut actions = vec![false; cfg.classes];
            actions[class] = true;
            if cfg.classes > 1 && rng.uniform() < 0.3 {
                actions[(class + 1 + rng.below(cfg.classes - 1)) % cfg.classes] = true;
            }
            Actor { class, actions, boxes, dropout: vec![] }
        })
        .collect()
}

fn single_actor(cfg: &ScenarioConfig, rng: &mut Rng, jump: bool) -> Result<Vec<Actor>> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let len = cfg.video_frames();
    if len < 4 {
        return Err(Error::Config(format!("the {} preset needs at least 4 video frames", cfg.preset.as_str())));
    }
    let bw = w / 4.0;
    let bh = h / 2.0;
    let cy = h / 2.0;
    let switch = len / 2;
    let boxes: Vec<BoxXyxy> = (0..len)
        .map(|f| {
            let cx = if jump && f >= switch { w - bw } else { bw };
            centred(cx, cy, bw, bh)
        })
        .collect();
    if jump && iou_2d(&boxes[switch - 1], &boxes[switch]) >= 0.1 {
        return Err(Error::Config("frame too narrow for a fast-motion jump".into()));
    }
    let class = rng.below(cfg.classes);
    let mut actions = vec![false; cfg.classes];
    actions[class] = true;
    let dropout = if jump { vec![] } else { vec![3] };
    Ok(vec![Actor { class, actions, boxes, dropout }])
}

fn paint_stage(cfg: &ScenarioConfig, actors: &[Actor], start: usize, stage: usize, rng: &mut Rng) -> Result<StageFeatureMap> {
    let stride = (1usize << stage) as f64;
    let (gh, gw) = (cfg.height >> stage, cfg.width >> stage);
    let c = GEOMETRY_CHANNELS + cfg.classes;
    let t_len = cfg.frames;
    let mut data = Tensor::zeros([c, t_len, gh, gw]);
    let plane = gh * gw;
    for t in 0..t_len {
        let frame = start + t;
        for iy in 0..gh {
            for ix in 0..gw {
                let (px, py) = ((ix as f64 + 0.5) * stride, (iy as f64 + 0.5) * stride);
                let hit = actors.iter().rev().find(|a| {
                    let b = &a.boxes[frame];
                    px >= b[0] && px <= b[2] && py >= b[1] && py <= b[3]
                });
                let cell = iy * gw + ix;
                let d = data.data_mut();
                let mut put = |ch: usize, v: f64| d[(ch * t_len + t) * plane + cell] = v;
                if let Some(a) = hit {
                    let b = &a.boxes[frame];
                    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
                    put(0, 1.0);
                    put(1, ((b[0] + b[2]) / 2.0 - px) / bw);
                    put(2, ((b[1] + b[3]) / 2.0 - py) / bh);
                    put(3, bw.log2() - 4.0);
                    put(4, bh.log2() - 4.0);
                    let labels: Vec<bool> = match cfg.mode {
                        Mode::Keyframe => a.actions.clone(),
                        Mode::Tubelet => (0..cfg.classes).map(|k| k == a.class).collect(),
                    };
                    for (k, on) in labels.into_iter().enumerate() {
                        if on {
                            put(GEOMETRY_CHANNELS + k, 1.0);
                        }
                    }
                }
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in data.data_mut() {
            *v += cfg.noise * rng.normal();
        }
    }
    StageFeatureMap::new(stage, data)
}

/// Deterministic scenario for `seed`.
pub fn gen_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let actors = match cfg.preset {
        Preset::Random => random_actors(cfg, &mut rng),
        Preset::FastMotion => single_actor(cfg, &mut rng, true)?,
        Preset::Dropout => single_actor(cfg, &mut rng, false)?,
        Preset::Empty => vec![],
    };
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for a in &actors {
        if let Some(b) = a.boxes.iter().find(|b| !inside(b, w, h)) {
            return Err(Error::Config(format!("actor box {b:?} leaves the {w}x{h} frame")));
        }
    }
    let c = GEOMETRY_CHANNELS + cfg.classes;
    let scale = 1.0 / (c as f64).sqrt();
    let lateral: Vec<(Tensor, Tensor)> = (cfg.min_stage()..=MAX_STAGE)
        .map(|_| (Tensor::from_fn([c, cfg.channels], |_| rng.normal() * scale), Tensor::zeros([cfg.channels])))
        .collect();
    let mut clips = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let start = match cfg.mode {
            Mode::Keyframe => i * cfg.frames,
            Mode::Tubelet => i,
        };
        let keyframe = start + cfg.frames / 2;
        let stages = (cfg.min_stage()..=MAX_STAGE)
            .map(|s| paint_stage(cfg, &actors, start, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let space = build_from_hierarchy(&stages, &lateral)?;
        let gt = match cfg.mode {
            Mode::Keyframe => GroundTruthSet::Keyframe {
                boxes: actors.iter().map(|a| a.boxes[keyframe]).collect(),
                actions: actors.iter().map(|a| a.actions.clone()).collect(),
            },
            Mode::Tubelet => GroundTruthSet::Tubelet {
                boxes: actors.iter().map(|a| a.boxes[start..start + cfg.frames].to_vec()).collect(),
                classes: actors.iter().map(|a| a.class).collect(),
            },
        };
        clips.push(Clip { start, keyframe, stages, space, gt });
    }
    Ok(Scenario { config: cfg.clone(), seed, video: format!("synthetic-{seed}"), actors, clips, lateral })
}

impl Scenario {
    /// Ground-truth keyframe boxes, one record per (box, action).
    pub fn frame_ground_truth(&self) -> Vec<FrameBox> {
        let mut out = Vec::new();
        for clip in &self.clips {
            let frame = match self.config.mode {
                Mode::Keyframe => clip.keyframe,
                Mode::Tubelet => clip.start,
            };
            for a in &self.actors {
                let labels: Vec<usize> = match self.config.mode {
                    Mode::Keyframe => (0..a.actions.len()).filter(|&k| a.actions[k]).collect(),
                    Mode::Tubelet => vec![a.class],
                };
                for class in labels {
                    out.push(FrameBox { video: self.video.clone(), frame, bbox: a.boxes[frame], class, score: 1.0 });
                }
            }
        }
        out
    }

    /// Ground-truth tubes over the whole video.
    pub fn tube_ground_truth(&self) -> Vec<ActionTube> {
        self.actors
            .iter()
            .map(|a| ActionTube { video: self.video.clone(), start: 0, boxes: a.boxes.clone(), class: a.class, score: 1.0 })
            .collect()
    }

    /// Perfect per-frame detections, minus each actor's dropout frames.
    pub fn oracle_frame_detections(&self) -> Vec<Tubelet> {
        let mut out = Vec::new();
        for a in &self.actors {
            for (f, b) in a.boxes.iter().enumerate() {
                if !a.dropout.contains(&f) {
                    out.push(Tubelet { video: self.video.clone(), clip_start: f, boxes: vec![*b], class: a.class, score: 1.0 });
                }
            }
        }
        out
    }

    /// Perfect per-clip tubelets of `frames` boxes at stride 1.
    pub fn oracle_tubelets(&self) -> Vec<Tubelet> {
        let t = self.config.frames;
        let len = self.config.video_frames();
        let mut out = Vec::new();
        for a in &self.actors {
            for s in 0..=len.saturating_sub(t) {
                out.push(Tubelet { video: self.video.clone(), clip_start: s, boxes: a.boxes[s..s + t].to_vec(), class: a.class, score: 1.0 });
            }
        }
        out
    }
}
