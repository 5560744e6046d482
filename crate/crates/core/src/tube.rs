//! Tubelet and keyframe-box linking, 2D/3D IoU, frame and video mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;

/// Default overlap threshold for linking.
pub const LINK_IOU: f64 = 0.5;

/// Per-clip detection: `T` consecutive boxes starting at `clip_start`. A
/// keyframe detection is a tubelet of one box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tubelet {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub video: String,
    pub clip_start: usize,
    pub boxes: Vec<BoxXyxy>,
    pub class: usize,
    #[serde(default = "one")]
    pub score: f64,
}

/// A video-level tube: contiguous per-frame boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub video: String,
    pub start: usize,
    pub boxes: Vec<BoxXyxy>,
    pub class: usize,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl Tubelet {
    pub fn end(&self) -> usize {
        self.clip_start + self.boxes.len()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoxXyxy> {
        frame.checked_sub(self.clip_start).and_then(|i| self.boxes.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Input("tubelet without boxes".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Input(format!("score {} outside [0, 1]", self.score)));
        }
        if self.boxes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite box coordinate".into()));
        }
        Ok(())
    }
}

impl ActionTube {
    pub fn end(&self) -> usize {
        self.start + self.boxes.len()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoxXyxy> {
        frame.checked_sub(self.start).and_then(|i| self.boxes.get(i))
    }
}

impl From<Tubelet> for ActionTube {
    fn from(t: Tubelet) -> Self {
        Self { video: t.video, start: t.clip_start, boxes: t.boxes, class: t.class, score: t.score }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou_2d(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: &BoxXyxy| (x[2] - x[0]).max(0.0) * (x[3] - x[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Temporal IoU times the mean spatial IoU over overlapping frames.
pub fn iou_3d(a: &ActionTube, b: &ActionTube) -> f64 {
    let (s, e) = (a.start.max(b.start), a.end().min(b.end()));
    if s >= e {
        return 0.0;
    }
    let union = a.end().max(b.end()) - a.start.min(b.start);
    let t_iou = (e - s) as f64 / union as f64;
    let spatial: f64 = (s..e).map(|f| iou_2d(&a.boxes[f - a.start], &b.boxes[f - b.start])).sum::<f64>() / (e - s) as f64;
    t_iou * spatial
}

/// Linking affinity: mean IoU over shared frames, or the IoU of `a`'s
/// last box with `b`'s first when they do not overlap.
fn affinity(a: &Tubelet, b: &Tubelet) -> f64 {
    let (s, e) = (a.clip_start.max(b.clip_start), a.end().min(b.end()));
    if s < e {
        (s..e).map(|f| iou_2d(a.box_at(f).expect("in range"), b.box_at(f).expect("in range"))).sum::<f64>() / (e - s) as f64
    } else if a.end() <= b.clip_start {
        iou_2d(a.boxes.last().expect("non-empty"), &b.boxes[0])
    } else {
        iou_2d(&a.boxes[0], b.boxes.last().expect("non-empty"))
    }
}

/// Greedy linking over items whose neighbours start one frame later or
/// earlier. Returns member indices per tube.
fn greedy_link(items: &[Tubelet], tau: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].score.total_cmp(&items[a].score).then(a.cmp(&b)));
    let mut used = vec![false; items.len()];
    let mut tubes = Vec::new();
    let best_next = |used: &[bool], anchor: usize, start: Option<usize>| -> Option<usize> {
        let start = start?;
        let a = &items[anchor];
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in items.iter().enumerate() {
            if used[j] || c.clip_start != start || c.class != a.class || c.video != a.video {
                continue;
            }
            let s = affinity(a, c);
            if s >= tau && best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        best.map(|(j, _)| j)
    };
    for &seed in &order {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let mut members = std::collections::VecDeque::from([seed]);
        loop {
            let last = *members.back().expect("non-empty");
            match best_next(&used, last, Some(items[last].clip_start + 1)) {
                Some(j) => {
                    used[j] = true;
                    members.push_back(j);
                }
                None => break,
            }
        }
        loop {
            let first = *members.front().expect("non-empty");
            match best_next(&used, first, items[first].clip_start.checked_sub(1)) {
                Some(j) => {
                    used[j] = true;
                    members.push_front(j);
                }
                None => break,
            }
        }
        tubes.push(members.into_iter().collect());
    }
    tubes
}

fn assemble(items: &[Tubelet], members: &[usize]) -> ActionTube {
    let start = members.iter().map(|&i| items[i].clip_start).min().expect("non-empty");
    let end = members.iter().map(|&i| items[i].end()).max().expect("non-empty");
    let boxes = (start..end)
        .map(|f| {
            let mut acc = [0.0; 4];
            let mut n = 0.0;
            for &i in members {
                if let Some(b) = items[i].box_at(f) {
                    for (a, v) in acc.iter_mut().zip(b) {
                        *a += v;
                    }
                    n += 1.0;
                }
            }
            acc.map(|a| a / n)
        })
        .collect();
    let score = members.iter().map(|&i| items[i].score).sum::<f64>() / members.len() as f64;
    let first = &items[members[0]];
    ActionTube { video: first.video.clone(), start, boxes, class: first.class, score }
}

/// Links stride-1 clip tubelets into tubes. Affinity between tubelets of
/// adjacent clips is their mean IoU over the shared frames.
pub fn link_tubelets(tubelets: &[Tubelet], tau: f64) -> Result<Vec<ActionTube>> {
    Ok(link_members(tubelets, tau)?.iter().map(|m| assemble(tubelets, m)).collect())
}

/// Indices of the input tubelets making up each tube of [`link_tubelets`],
/// in temporal order.
pub fn link_members(tubelets: &[Tubelet], tau: f64) -> Result<Vec<Vec<usize>>> {
    tubelets.iter().try_for_each(Tubelet::validate)?;
    Ok(greedy_link(tubelets, tau))
}

/// Links per-frame boxes (one-box tubelets) by adjacent-frame IoU.
pub fn link_keyframe_boxes(detections: &[Tubelet], tau: f64) -> Result<Vec<ActionTube>> {
    if let Some(bad) = detections.iter().find(|d| d.boxes.len() != 1) {
        return Err(Error::Input(format!("keyframe detection with {} boxes", bad.boxes.len())));
    }
    link_tubelets(detections, tau)
}

/// All-point interpolated AP of a score-ranked TP/FP list.
pub fn average_precision(tp: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / positives as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Per class, rank detections by score and greedily match each to the
/// best-overlapping ground truth of the same `key`; return the mean AP over
/// classes with at least one ground truth.
fn mean_ap<D, G>(dets: &[D], gts: &[G], det_key: impl Fn(&D) -> (usize, f64), gt_class: impl Fn(&G) -> usize, overlap: impl Fn(&D, &G) -> Option<f64>, thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(&gt_class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let gidx: Vec<usize> = (0..gts.len()).filter(|&g| gt_class(&gts[g]) == c).collect();
        let mut didx: Vec<usize> = (0..dets.len()).filter(|&d| det_key(&dets[d]).0 == c).collect();
        didx.sort_by(|&a, &b| det_key(&dets[b]).1.total_cmp(&det_key(&dets[a]).1).then(a.cmp(&b)));
        let mut taken = vec![false; gidx.len()];
        let tp: Vec<bool> = didx
            .iter()
            .map(|&d| {
                let mut best: Option<(usize, f64)> = None;
                for (slot, &g) in gidx.iter().enumerate() {
                    if let Some(o) = overlap(&dets[d], &gts[g]) {
                        if best.is_none_or(|(_, b)| o > b) {
                            best = Some((slot, o));
                        }
                    }
                }
                match best {
                    Some((slot, o)) if o >= thr && !taken[slot] => {
                        taken[slot] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        total += average_precision(&tp, gidx.len());
    }
    total / classes.len() as f64
}

/// One labelled box on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBox {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub video: String,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXyxy,
    pub class: usize,
    #[serde(default = "one")]
    pub score: f64,
}

impl FrameBox {
    /// Every box of a tubelet as its own frame box.
    pub fn from_tubelet(t: &Tubelet) -> Vec<FrameBox> {
        t.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| FrameBox { video: t.video.clone(), frame: t.clip_start + i, bbox: *b, class: t.class, score: t.score })
            .collect()
    }
}

/// Frame mAP at a 2D IoU threshold.
pub fn frame_map(dets: &[FrameBox], gts: &[FrameBox], iou_thr: f64) -> f64 {
    mean_ap(
        dets,
        gts,
        |d| (d.class, d.score),
        |g| g.class,
        |d, g| (d.video == g.video && d.frame == g.frame).then(|| iou_2d(&d.bbox, &g.bbox)),
        iou_thr,
    )
}

/// Video mAP at a 3D IoU threshold.
pub fn video_map(tubes: &[ActionTube], gts: &[ActionTube], iou_thr: f64) -> f64 {
    mean_ap(tubes, gts, |d| (d.class, d.score), |g| g.class, |d, g| (d.video == g.video).then(|| iou_3d(d, g)), iou_thr)
}
