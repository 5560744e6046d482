//! Query containers, the `(x, y, z, r)` box parameterisation and
//! sampling-point generation.
//!
//! A positional query `(x, y, z, r)` is a box centred at `(x, y)` pixels
//! with width `2^(z-r)` and height `2^(z+r)`; `z` doubles as the scale index
//! of the feature volume. Sampling offsets are scaled by the box extent:
//! `x̃ = x + Δx·w`, `ỹ = y + Δy·h`, `z̃ = z + Δz`.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::feature_space::FeatureSpace4D;
use crate::nn::Ffn;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `[x1, y1, x2, y2]` in pixels.
pub type BoxXyxy = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One box per query on the clip keyframe.
    Keyframe,
    /// One box per query on every frame of the clip.
    Tubelet,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Keyframe => "keyframe",
            Mode::Tubelet => "tubelet",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyframe" => Ok(Mode::Keyframe),
            "tubelet" => Ok(Mode::Tubelet),
            other => Err(Error::Config(format!("unknown mode {other:?} (keyframe|tubelet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalQuery {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl PositionalQuery {
    /// The query whose box is exactly the `width × height` frame.
    pub fn whole_frame(width: f64, height: f64) -> Self {
        Self {
            x: width / 2.0,
            y: height / 2.0,
            z: 0.5 * (width * height).log2(),
            r: 0.5 * (height / width).log2(),
        }
    }

    pub fn width(&self) -> f64 {
        (self.z - self.r).exp2()
    }

    pub fn height(&self) -> f64 {
        (self.z + self.r).exp2()
    }

    pub fn decode(&self) -> BoxXyxy {
        let (w, h) = (self.width(), self.height());
        [self.x - w / 2.0, self.y - h / 2.0, self.x + w / 2.0, self.y + h / 2.0]
    }

    pub fn encode(b: BoxXyxy) -> Result<Self> {
        let (w, h) = (b[2] - b[0], b[3] - b[1]);
        if !(w > 0.0 && h > 0.0) || !b.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("box {b:?} has no positive area")));
        }
        Ok(Self {
            x: (b[0] + b[2]) / 2.0,
            y: (b[1] + b[3]) / 2.0,
            z: 0.5 * (w * h).log2(),
            r: 0.5 * (h / w).log2(),
        })
    }

    /// Refinement step: `x += δx·w`, `y += δy·h`, `z += δz`, `r += δr`.
    pub fn apply_delta(&self, delta: [f64; 4]) -> Self {
        Self {
            x: self.x + delta[0] * self.width(),
            y: self.y + delta[1] * self.height(),
            z: self.z + delta[2],
            r: self.r + delta[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.r]
    }
}

pub fn decode_box(q: &PositionalQuery) -> BoxXyxy {
    q.decode()
}

/// Spatial, positional and temporal queries for `N` instances.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `[N, L, D]`.
    pub spatial: Tensor,
    /// `N × L`, row-major.
    pub positional: Vec<PositionalQuery>,
    /// `[N, D]`.
    pub temporal: Tensor,
    pub mode: Mode,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.temporal.dims()[0]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn frames(&self) -> usize {
        self.spatial.dims()[1]
    }
    pub fn dim(&self) -> usize {
        self.spatial.dims()[2]
    }
    /// `[N, L, 4]` tensor of `(x, y, z, r)`.
    pub fn positional_tensor(&self) -> Tensor {
        let (n, l) = (self.len(), self.frames());
        Tensor::new([n, l, 4], self.positional.iter().flat_map(|q| q.as_array()).collect())
            .expect("N·L positional queries")
    }
}

/// Whole-frame positional queries and standard-normal content queries. In
/// tubelet mode the `frames` spatial queries of one instance share a
/// single draw.
pub fn init_queries(n: usize, mode: Mode, frames: usize, width: f64, height: f64, d: usize, rng: &mut Rng) -> Result<QuerySet> {
    if n == 0 {
        return Err(Error::Config("at least one query is required".into()));
    }
    let l = match mode {
        Mode::Keyframe => 1,
        Mode::Tubelet => frames.max(1),
    };
    let base: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let mut spatial = Vec::with_capacity(n * l * d);
    for i in 0..n {
        for _ in 0..l {
            spatial.extend_from_slice(&base[i * d..(i + 1) * d]);
        }
    }
    let temporal: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    Ok(QuerySet {
        spatial: Tensor::new([n, l, d], spatial)?,
        positional: vec![PositionalQuery::whole_frame(width, height); n * l],
        temporal: Tensor::new([n, d], temporal)?,
        mode,
    })
}

/// Sampling coordinates (and, once read, features) of one query.
#[derive(Debug, Clone)]
pub struct SamplingPointSet {
    /// `[T_in, P, G, 3]` of `(x_px, y_px, z)`.
    pub coords: Tensor,
    pub groups: usize,
    /// `[T_in, P, D]` after [`SamplingPointSet::read`].
    pub features: Option<Tensor>,
}

impl SamplingPointSet {
    pub fn points_per_frame(&self) -> usize {
        self.coords.dims()[1]
    }

    pub fn total_points(&self) -> usize {
        self.coords.dims()[0] * self.coords.dims()[1]
    }

    pub fn point(&self, t: usize, p: usize, g: usize) -> [f64; 3] {
        let d = self.coords.dims();
        let base = ((t * d[1] + p) * d[2] + g) * 3;
        let c = self.coords.data();
        [c[base], c[base + 1], c[base + 2]]
    }

    /// Reads `F ∈ [T_in, P, D]`: group `g` of each point reads its own
    /// `D/G` channel slice.
    pub fn read(&mut self, space: &FeatureSpace4D) -> Result<&Tensor> {
        let (t_in, p, g) = (self.coords.dims()[0], self.coords.dims()[1], self.groups);
        if t_in != space.frames() {
            return Err(shape_err!("{} point frames for a {}-frame space", t_in, space.frames()));
        }
        let d = space.channels();
        let mut out = Vec::with_capacity(t_in * p * d);
        for t in 0..t_in {
            for pi in 0..p {
                for gi in 0..g {
                    let [x, y, z] = self.point(t, pi, gi);
                    out.extend(space.read_point_group(t, x, y, z, gi, g)?);
                }
            }
        }
        self.features = Some(Tensor::new([t_in, p, d], out)?);
        Ok(self.features.as_ref().expect("just set"))
    }
}

/// Offset regression for one query: `q_s ∈ [L, D]` (one row per frame in
/// tubelet mode, a single row in keyframe mode), with an offset head
/// `w ∈ [D, P·G·3]`, `b ∈ [P·G·3]`. Output layout of the head is
/// `(point, group, axis)`.
pub fn generate_points(
    q_s: &Tensor,
    q_p: &[PositionalQuery],
    offset_w: &Tensor,
    offset_b: &Tensor,
    points: usize,
    groups: usize,
    mode: Mode,
    frames: usize,
) -> Result<SamplingPointSet> {
    let d = *q_s.dims().last().ok_or_else(|| shape_err!("empty spatial query"))?;
    let rows = q_s.len() / d.max(1);
    let width = points * groups * 3;
    if offset_w.dims() != [d, width] || offset_b.dims() != [width] {
        return Err(shape_err!("offset head {:?}/{:?} for D={} P={} G={}", offset_w.dims(), offset_b.dims(), d, points, groups));
    }
    let expected_rows = match mode {
        Mode::Keyframe => 1,
        Mode::Tubelet => frames,
    };
    if rows != expected_rows || q_p.len() != expected_rows {
        return Err(shape_err!("{} spatial / {} positional rows, {:?} mode needs {}", rows, q_p.len(), mode, expected_rows));
    }
    let mut per_row = Vec::with_capacity(rows);
    for row in 0..rows {
        let q = &q_s.data()[row * d..(row + 1) * d];
        let mut off = offset_b.data().to_vec();
        for (k, &qv) in q.iter().enumerate() {
            let wr = &offset_w.data()[k * width..(k + 1) * width];
            for (o, &wv) in off.iter_mut().zip(wr) {
                *o += qv * wv;
            }
        }
        let qp = q_p[row];
        let (w, h) = (qp.width(), qp.height());
        let coords: Vec<f64> = off
            .chunks(3)
            .flat_map(|o| [qp.x + o[0] * w, qp.y + o[1] * h, qp.z + o[2]])
            .collect();
        per_row.push(coords);
    }
    let data: Vec<f64> = (0..frames)
        .flat_map(|t| match mode {
            Mode::Keyframe => per_row[0].clone(),
            Mode::Tubelet => per_row[t].clone(),
        })
        .collect();
    Ok(SamplingPointSet {
        coords: Tensor::new([frames, points, groups, 3], data)?,
        groups,
        features: None,
    })
}

/// Runs the box FFN on `q_s'` and applies the resulting deltas.
pub fn update_positional(q_p: &PositionalQuery, q_s: &[f64], box_head: &Ffn, store: &ParamStore) -> Result<PositionalQuery> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(q_s.to_vec()));
    let delta = box_head.forward(&mut tape, store, x)?;
    let d = tape.value(delta);
    if d.len() != 4 {
        return Err(shape_err!("box head emits {:?}, expected 4 values", d.dims()));
    }
    Ok(q_p.apply_delta([d.data()[0], d.data()[1], d.data()[2], d.data()[3]]))
}

// ---- tape versions ---------------------------------------------------------

fn split_last4(tape: &mut Tape, v: Var) -> Result<[Var; 4]> {
    let axis = tape.dims(v).len() - 1;
    if tape.dims(v)[axis] != 4 {
        return Err(shape_err!("expected (.., 4), got {:?}", tape.dims(v)));
    }
    Ok([
        tape.slice(v, axis, 0, 1)?,
        tape.slice(v, axis, 1, 1)?,
        tape.slice(v, axis, 2, 1)?,
        tape.slice(v, axis, 3, 1)?,
    ])
}

/// Box width and height, each `[..., 1]`.
pub fn box_extent_var(tape: &mut Tape, qp: Var) -> Result<(Var, Var, [Var; 4])> {
    let cols = split_last4(tape, qp)?;
    let [_, _, z, r] = cols;
    let zmr = tape.sub(z, r)?;
    let zpr = tape.add(z, r)?;
    let w = tape.exp2(zmr);
    let h = tape.exp2(zpr);
    Ok((w, h, cols))
}

/// `[..., 4]` positional queries to `[..., 4]` `xyxy` boxes.
pub fn decode_boxes_var(tape: &mut Tape, qp: Var) -> Result<Var> {
    let (w, h, [x, y, _, _]) = box_extent_var(tape, qp)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(x, hw)?;
    let y1 = tape.sub(y, hh)?;
    let x2 = tape.add(x, hw)?;
    let y2 = tape.add(y, hh)?;
    let axis = tape.dims(qp).len() - 1;
    tape.concat(&[x1, y1, x2, y2], axis)
}

/// Sampling coordinates from `qp ∈ [N, L, 4]` and offsets
/// `[N, L, P, G, 3]` (or a constant `[1, 1, P, G, 3]` grid).
pub fn points_var(tape: &mut Tape, qp: Var, offsets: Var) -> Result<Var> {
    let qd = tape.dims(qp).to_vec();
    if qd.len() != 3 {
        return Err(shape_err!("positional queries must be [N, L, 4], got {:?}", qd));
    }
    let (n, l) = (qd[0], qd[1]);
    let (w, h, [x, y, z, _]) = box_extent_var(tape, qp)?;
    let anchor = tape.concat(&[x, y, z], 2)?;
    let anchor = tape.reshape(anchor, &[n, l, 1, 1, 3])?;
    let ones = tape.constant(Tensor::full([n, l, 1], 1.0));
    let scale = tape.concat(&[w, h, ones], 2)?;
    let scale = tape.reshape(scale, &[n, l, 1, 1, 3])?;
    let spread = tape.mul(offsets, scale)?;
    tape.add(anchor, spread)
}

/// Applies `[..., 4]` deltas to `[..., 4]` positional queries.
pub fn update_positional_var(tape: &mut Tape, qp: Var, delta: Var) -> Result<Var> {
    let (w, h, _) = box_extent_var(tape, qp)?;
    let lead = tape.dims(qp)[..tape.dims(qp).len() - 1].to_vec();
    let mut one_dims = lead.clone();
    one_dims.push(2);
    let ones = tape.constant(Tensor::full(one_dims, 1.0));
    let axis = lead.len();
    let scale = tape.concat(&[w, h, ones], axis)?;
    let step = tape.mul(delta, scale)?;
    tape.add(qp, step)
}

/// Constant `[1, 1, m·m, G, 3]` offsets of an `m × m` grid inside the box
/// (cell centres), at the box's own scale.
pub fn grid_offsets(side: usize, groups: usize) -> Tensor {
    let p = side * side;
    let mut data = Vec::with_capacity(p * groups * 3);
    for iy in 0..side {
        for ix in 0..side {
            let ox = (ix as f64 + 0.5) / side as f64 - 0.5;
            let oy = (iy as f64 + 0.5) / side as f64 - 0.5;
            for _ in 0..groups {
                data.extend_from_slice(&[ox, oy, 0.0]);
            }
        }
    }
    Tensor::new([1, 1, p, groups, 3], data).expect("grid dims")
}
