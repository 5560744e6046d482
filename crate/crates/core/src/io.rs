//! Files the harness exchanges: clip sets, detection and ground-truth
//! records (JSON), evaluation reports and per-run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature_space::FeatureSpace4D;
use crate::geometry::Mode;
use crate::scenario::Scenario;
use crate::tensor::Tensor;
use crate::tube::{frame_map, link_tubelets, video_map, ActionTube, FrameBox, Tubelet};

pub const CLIPS_FORMAT: &str = "stmixer-clips-1";
const CLIPS_MANIFEST: &str = "clips.txt";

/// One clip as the detector sees it.
#[derive(Debug, Clone)]
pub struct ClipInput {
    pub start: usize,
    pub keyframe: usize,
    pub space: FeatureSpace4D,
}

#[derive(Debug, Clone)]
pub struct ClipSet {
    pub mode: Mode,
    pub video: String,
    pub clips: Vec<ClipInput>,
}

/// Parsed `clips.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipManifest {
    pub mode: Mode,
    pub video: String,
    pub min_stage: usize,
    /// `(start, keyframe)` per clip.
    pub clips: Vec<(usize, usize)>,
}

fn clip_file(i: usize) -> String {
    format!("clip{i:05}.stmx")
}

impl ClipSet {
    pub fn from_scenario(sc: &Scenario) -> Self {
        let clips = sc.clips.iter().map(|c| ClipInput { start: c.start, keyframe: c.keyframe, space: c.space.clone() }).collect();
        Self { mode: sc.config.mode, video: sc.video.clone(), clips }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let min_stage = self.clips.first().map_or(2, |c| c.space.min_stage);
        let mut m = format!("format={CLIPS_FORMAT}\nmode={}\nvideo={}\nmin_stage={min_stage}\nclips={}\n", self.mode.as_str(), self.video, self.clips.len());
        for (i, c) in self.clips.iter().enumerate() {
            writeln!(m, "clip={} {}", c.start, c.keyframe).expect("string write");
            c.space.data.save(dir.join(clip_file(i)))?;
        }
        std::fs::write(dir.join(CLIPS_MANIFEST), m)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CLIPS_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let m = parse_clip_manifest(&text)?;
        let clips = m
            .clips
            .iter()
            .enumerate()
            .map(|(i, &(start, keyframe))| {
                let data = Tensor::load(dir.join(clip_file(i)))?;
                Ok(ClipInput { start, keyframe, space: FeatureSpace4D::new(data, m.min_stage)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mode: m.mode, video: m.video, clips })
    }
}

pub fn parse_clip_manifest(text: &str) -> Result<ClipManifest> {
    let bad = |m: String| Error::Load(format!("clip manifest: {m}"));
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key}=..., got {line:?}")))
    };
    if field("format")? != CLIPS_FORMAT {
        return Err(bad(format!("unknown format, expected {CLIPS_FORMAT}")));
    }
    let mode: Mode = field("mode")?.parse().map_err(|e| bad(format!("{e}")))?;
    let video = field("video")?;
    let min_stage: usize = field("min_stage")?.parse().map_err(|_| bad("min_stage is not a number".into()))?;
    let count: usize = field("clips")?.parse().map_err(|_| bad("clips is not a number".into()))?;
    let mut clips = Vec::new();
    for line in lines {
        let rest = line.strip_prefix("clip=").ok_or_else(|| bad(format!("unexpected line {line:?}")))?;
        let nums: Vec<usize> = rest.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(format!("bad clip entry {line:?}")))?;
        match nums[..] {
            [start, keyframe] => clips.push((start, keyframe)),
            _ => return Err(bad(format!("clip entry needs start and keyframe: {line:?}"))),
        }
    }
    if clips.len() != count {
        return Err(bad(format!("declares {count} clips, lists {}", clips.len())));
    }
    Ok(ClipManifest { mode, video, min_stage, clips })
}

// ---- records ---------------------------------------------------------------

/// Detection or ground-truth records: a JSON array of
/// `{clip_start, boxes, class, score}` objects (`video` optional).
pub fn parse_records(text: &str) -> Result<Vec<Tubelet>> {
    let records: Vec<Tubelet> = serde_json::from_str(text).map_err(|e| Error::Input(format!("records: {e}")))?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Input(format!("record {i}: {e}")))?;
    }
    Ok(records)
}

pub fn records_to_json(records: &[Tubelet]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

/// Linked tubes as a JSON array of `{start, boxes, class, score}`.
pub fn parse_tubes(text: &str) -> Result<Vec<ActionTube>> {
    let tubes: Vec<ActionTube> = serde_json::from_str(text).map_err(|e| Error::Input(format!("tubes: {e}")))?;
    if tubes.iter().any(|t| t.boxes.is_empty() || t.boxes.iter().flatten().any(|v| !v.is_finite())) {
        return Err(Error::Input("tube without boxes or with a non-finite coordinate".into()));
    }
    Ok(tubes)
}

/// Ground truth of a scenario as records: keyframe boxes (one per action)
/// in keyframe mode, whole-video tubes in tubelet mode.
pub fn ground_truth_records(sc: &Scenario) -> Vec<Tubelet> {
    match sc.config.mode {
        Mode::Keyframe => sc
            .frame_ground_truth()
            .into_iter()
            .map(|g| Tubelet { video: g.video, clip_start: g.frame, boxes: vec![g.bbox], class: g.class, score: 1.0 })
            .collect(),
        Mode::Tubelet => sc
            .tube_ground_truth()
            .into_iter()
            .map(|t| Tubelet { video: t.video, clip_start: t.start, boxes: t.boxes, class: t.class, score: 1.0 })
            .collect(),
    }
}

// ---- evaluation ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub iou: f64,
    pub detections: usize,
    pub ground_truths: usize,
    pub frame_map: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tubes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_map: Option<f64>,
}

/// Frame mAP over every box of the records and, in tubelet mode, video mAP
/// of the linked detections against the ground-truth tubes.
pub fn evaluate_records(mode: Mode, dets: &[Tubelet], gts: &[Tubelet], iou: f64, link_iou: f64) -> Result<EvalReport> {
    let frames = |r: &[Tubelet]| -> Vec<FrameBox> { r.iter().flat_map(FrameBox::from_tubelet).collect() };
    let mut report = EvalReport {
        mode,
        iou,
        detections: dets.len(),
        ground_truths: gts.len(),
        frame_map: frame_map(&frames(dets), &frames(gts), iou),
        link_iou: None,
        tubes: None,
        video_map: None,
    };
    if mode == Mode::Tubelet {
        let tubes = link_tubelets(dets, link_iou)?;
        let gt_tubes: Vec<ActionTube> = gts.iter().cloned().map(ActionTube::from).collect();
        report.link_iou = Some(link_iou);
        report.tubes = Some(tubes.len());
        report.video_map = Some(video_map(&tubes, &gt_tubes, iou));
    }
    Ok(report)
}

impl EvalReport {
    /// Two-column plain-text table.
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("mode", self.mode.as_str().to_string()),
            ("detections", self.detections.to_string()),
            ("ground truths", self.ground_truths.to_string()),
            ("iou threshold", format!("{}", self.iou)),
            ("frame mAP", format!("{:.4}", self.frame_map)),
        ];
        if let (Some(l), Some(t), Some(v)) = (self.link_iou, self.tubes, self.video_map) {
            rows.push(("link iou", format!("{l}")));
            rows.push(("linked tubes", t.to_string()));
            rows.push(("video mAP", format!("{v:.4}")));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}

// ---- run manifest ------------------------------------------------------------

/// Written as `run.json` next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let snapshot = config
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Self { command: command.into(), seed: config.seed, config: snapshot, metrics: BTreeMap::new(), outputs: Vec::new() }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_manifest_round_trip() {
        let text = format!("format={CLIPS_FORMAT}\nmode=tubelet\nvideo=v 1\nmin_stage=2\nclips=2\nclip=0 2\nclip=1 3\n");
        let m = parse_clip_manifest(&text).unwrap();
        assert_eq!(m.mode, Mode::Tubelet);
        assert_eq!(m.video, "v 1");
        assert_eq!(m.clips, vec![(0, 2), (1, 3)]);
        assert!(parse_clip_manifest(&text.replace("clips=2", "clips=3")).is_err());
        assert!(parse_clip_manifest(&text.replace("clip=1 3", "clip=1")).is_err());
        assert!(parse_clip_manifest("format=other\n").is_err());
    }

    #[test]
    fn records_validate() {
        let ok = r#"[{"clip_start": 3, "boxes": [[0, 0, 4, 4]], "class": 1, "score": 0.5}]"#;
        let r = parse_records(ok).unwrap();
        assert_eq!(r[0].clip_start, 3);
        assert_eq!(r[0].video, "");
        assert!(parse_records(&ok.replace("0.5", "1.5")).is_err());
        assert!(parse_records(r#"[{"clip_start": 0, "boxes": [], "class": 0}]"#).is_err());
        assert!(parse_records("{").is_err());
        let back = parse_records(&records_to_json(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_table_lists_video_rows_only_for_tubelets() {
        let gt = vec![Tubelet { video: String::new(), clip_start: 0, boxes: vec![[0.0, 0.0, 4.0, 4.0]; 4], class: 0, score: 1.0 }];
        let k = evaluate_records(Mode::Keyframe, &gt, &gt, 0.5, 0.5).unwrap();
        assert_eq!(k.frame_map, 1.0);
        assert!(!k.table().contains("video mAP"));
        let t = evaluate_records(Mode::Tubelet, &gt, &gt, 0.5, 0.5).unwrap();
        assert_eq!((t.tubes, t.video_map), (Some(1), Some(1.0)));
        assert!(t.table().contains("video mAP"));
    }
}
