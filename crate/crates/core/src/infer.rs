//! Background-threshold filtering of decoder outputs into detection
//! records, plus the frame and video evaluation used by the harness.

use crate::bank::QueryBank;
use crate::error::{Error, Result};
use crate::geometry::Mode;
use crate::io::{ClipInput, ClipSet};
use crate::scenario::Scenario;
use crate::train::Model;
use crate::tube::{frame_map, link_tubelets, video_map, FrameBox, Tubelet};

/// Whether a query with background probability `p_bg` survives `threshold`.
/// A threshold of 1 keeps everything, even a saturated `p_bg == 1`.
pub fn keep(p_bg: f64, threshold: f64) -> bool {
    threshold >= 1.0 || p_bg < threshold
}

/// Detections for one clip.
///
/// Keyframe mode emits, for every kept query, one single-box record per
/// action class scored `p_human * p_action`. Tubelet mode emits one record
/// per kept query with its arg-max class.
pub fn detect_clip(model: &Model, clip: &ClipInput, video: &str, index: usize, bank: Option<&QueryBank>, threshold: f64) -> Result<Vec<Tubelet>> {
    let window = model.window(bank, index)?;
    let (det, _) = model.decoder.infer(&model.store, &clip.space, window.as_ref())?;
    let n = model.config.model.queries;
    let mut out = Vec::new();
    match model.config.mode() {
        Mode::Keyframe => {
            let human = det.human.as_ref().ok_or_else(|| Error::Input("keyframe output without human scores".into()))?;
            let actions = det.actions.as_ref().ok_or_else(|| Error::Input("keyframe output without action scores".into()))?;
            for q in 0..n {
                let (p_h, p_bg) = (human.at(&[q, 0]), human.at(&[q, 1]));
                if !keep(p_bg, threshold) {
                    continue;
                }
                let b = det.boxes.row(q);
                for (class, &p_a) in actions.row(q).iter().enumerate() {
                    out.push(Tubelet { video: video.into(), clip_start: clip.keyframe, boxes: vec![[b[0], b[1], b[2], b[3]]], class, score: p_h * p_a });
                }
            }
        }
        Mode::Tubelet => {
            let probs = det.classes.as_ref().ok_or_else(|| Error::Input("tubelet output without class scores".into()))?;
            let c = model.config.model.classes;
            let t = model.config.model.frames;
            for q in 0..n {
                let row = probs.row(q);
                if !keep(row[c], threshold) {
                    continue;
                }
                let (class, score) = row[..c]
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
                let boxes = (0..t)
                    .map(|f| [0, 1, 2, 3].map(|k| det.boxes.at(&[q, f, k])))
                    .collect();
                out.push(Tubelet { video: video.into(), clip_start: clip.start, boxes, class, score });
            }
        }
    }
    Ok(out)
}

/// Detections over every clip of a clip set, in clip order.
pub fn detect_set(model: &Model, set: &ClipSet, bank: Option<&QueryBank>, threshold: f64) -> Result<Vec<Tubelet>> {
    if set.mode != model.config.mode() {
        return Err(Error::Config(format!("{} clips given to a {} model", set.mode.as_str(), model.config.mode().as_str())));
    }
    let mut out = Vec::new();
    for (i, clip) in set.clips.iter().enumerate() {
        out.extend(detect_clip(model, clip, &set.video, i, bank, threshold)?);
    }
    Ok(out)
}

/// Detections over every clip of `scenario`.
pub fn detect(model: &Model, scenario: &Scenario, bank: Option<&QueryBank>, threshold: f64) -> Result<Vec<Tubelet>> {
    detect_set(model, &ClipSet::from_scenario(scenario), bank, threshold)
}

/// Frame mAP of keyframe (or tubelet) detections against the scenario.
pub fn evaluate_frames(dets: &[Tubelet], scenario: &Scenario, iou: f64) -> f64 {
    let boxes: Vec<FrameBox> = dets.iter().flat_map(FrameBox::from_tubelet).collect();
    frame_map(&boxes, &scenario.frame_ground_truth(), iou)
}

/// Video mAP after linking tubelets at `link_iou`.
pub fn evaluate_video(dets: &[Tubelet], scenario: &Scenario, link_iou: f64, iou: f64) -> Result<f64> {
    let tubes = link_tubelets(dets, link_iou)?;
    Ok(video_map(&tubes, &scenario.tube_ground_truth(), iou))
}
