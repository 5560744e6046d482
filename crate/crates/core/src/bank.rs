//! Query bank for the long-term classifier: the top-`k` final queries of
//! every clip of a video, and fixed-length windows over them.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::Decoder;
use crate::error::{shape_err, Error, Result};
use crate::feature_space::FeatureSpace4D;
use crate::geometry::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MANIFEST: &str = "bank.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank {
    pub k: usize,
    /// Row width, `2·D`.
    pub d: usize,
    /// One `[k, d]` matrix per clip.
    pub clips: Vec<Tensor>,
}

/// The `k` rows of `rows ∈ [N, d]` with the highest `scores`, ties to the
/// lower index, zero-padded when `N < k`.
pub fn select_top_k(scores: &[f64], rows: &Tensor, k: usize) -> Result<Tensor> {
    if rows.ndim() != 2 || rows.dims()[0] != scores.len() {
        return Err(shape_err!("{} scores for rows {:?}", scores.len(), rows.dims()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("query bank scores".into()));
    }
    let d = rows.dims()[1];
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = Tensor::zeros([k, d]);
    for (slot, &i) in order.iter().take(k).enumerate() {
        out.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(rows.row(i));
    }
    Ok(out)
}

impl QueryBank {
    pub fn new(k: usize, d: usize, clips: Vec<Tensor>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config("query bank needs k > 0 and d > 0".into()));
        }
        if let Some(bad) = clips.iter().find(|c| c.dims() != [k, d]) {
            return Err(shape_err!("bank entry {:?}, expected [{}, {}]", bad.dims(), k, d));
        }
        Ok(Self { k, d, clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `L̃_t`: clips `t − w/2 .. t + w/2 − 1` stacked to `[w·k, d]`, with zero
    /// rows for clips outside the video.
    pub fn window(&self, t: usize, w: usize) -> Result<Tensor> {
        if w == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        if t >= self.clips.len() {
            return Err(Error::Config(format!("clip {t} outside a bank of {} clips", self.clips.len())));
        }
        let block = self.k * self.d;
        let mut out = Tensor::zeros([w * self.k, self.d]);
        let first = t as isize - (w / 2) as isize;
        for slot in 0..w {
            let c = first + slot as isize;
            if c >= 0 && (c as usize) < self.clips.len() {
                out.data_mut()[slot * block..(slot + 1) * block].copy_from_slice(self.clips[c as usize].data());
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        writeln!(manifest, "format=stmixer-bank-1").expect("string write");
        writeln!(manifest, "k={}", self.k).expect("string write");
        writeln!(manifest, "d={}", self.d).expect("string write");
        writeln!(manifest, "clips={}", self.clips.len()).expect("string write");
        std::fs::write(dir.join(MANIFEST), manifest)?;
        for (i, c) in self.clips.iter().enumerate() {
            c.save(dir.join(format!("clip{i:05}.stmx")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| Error::Load(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let (k, d, n) = parse_manifest(&text)?;
        let clips = (0..n)
            .map(|i| Tensor::load(dir.join(format!("clip{i:05}.stmx"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(k, d, clips).map_err(|e| Error::Load(e.to_string()))
    }
}

/// Parses the bank manifest into `(k, d, clips)`.
pub fn parse_manifest(text: &str) -> Result<(usize, usize, usize)> {
    let (mut k, mut d, mut n, mut fmt) = (None, None, None, false);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Load(format!("bank manifest line {line:?}")))?;
        let num = || value.parse::<usize>().map_err(|_| Error::Load(format!("bank manifest value {value:?} for {key}")));
        match key {
            "format" if value == "stmixer-bank-1" => fmt = true,
            "k" => k = Some(num()?),
            "d" => d = Some(num()?),
            "clips" => n = Some(num()?),
            _ => return Err(Error::Load(format!("unexpected bank manifest entry {line:?}"))),
        }
    }
    match (fmt, k, d, n) {
        (true, Some(k), Some(d), Some(n)) => Ok((k, d, n)),
        _ => Err(Error::Load("bank manifest is missing format, k, d or clips".into())),
    }
}

/// Runs the (short-term) keyframe model over every clip of a video and keeps
/// the top-`k` `Q_s ‖ Q_t` rows by human score.
pub fn build_query_bank(decoder: &Decoder, store: &ParamStore, clips: &[FeatureSpace4D], k: usize) -> Result<QueryBank> {
    if decoder.config.mode != Mode::Keyframe {
        return Err(Error::Config("query banks are built from keyframe models".into()));
    }
    let mut entries = Vec::with_capacity(clips.len());
    for space in clips {
        let (det, rows) = decoder.infer(store, space, None)?;
        let human = det.human.ok_or_else(|| Error::Config("keyframe model without human scores".into()))?;
        let scores: Vec<f64> = (0..human.dims()[0]).map(|i| human.at(&[i, 0])).collect();
        entries.push(select_top_k(&scores, &rows, k)?);
    }
    QueryBank::new(k, 2 * decoder.config.dim, entries)
}
