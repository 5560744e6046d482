//! The aligned multi-scale spatio-temporal feature volume and continuous
//! reads from it.
//!
//! Stage `z` of a feature pyramid has spatial stride `2^z`. Every stage is
//! projected to a common width `D`, rescaled to the stride-4 grid
//! `H_2 × W_2` with nearest-neighbour interpolation, and stacked along a
//! scale axis, giving a `[D, T, S, H_2, W_2]` tensor indexed by
//! `(channel, t, scale, y, x)`.
//!
//! Point reads take pixel coordinates. They map to the stride-4 grid with
//! pixel-centre alignment (`g = px / 4 - 0.5`) and interpolate trilinearly
//! over `(x, y, scale)` with border clamping on all three axes. Time is
//! discrete.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Spatial stride of the finest (stage-2) grid, in pixels.
pub const GRID_STRIDE: f64 = 4.0;
/// Index of the coarsest stage.
pub const MAX_STAGE: usize = 5;

#[derive(Debug, Clone)]
pub struct StageFeatureMap {
    /// Stage index `z`; spatial stride is `2^z`.
    pub stage: usize,
    /// `[C_z, T_in, H_z, W_z]`.
    pub data: Tensor,
}

impl StageFeatureMap {
    pub fn new(stage: usize, data: Tensor) -> Result<Self> {
        if !(2..=MAX_STAGE).contains(&stage) {
            return Err(shape_err!("stage {} outside 2..=5", stage));
        }
        if data.ndim() != 4 {
            return Err(shape_err!("stage map must be [C, T, H, W], got {:?}", data.dims()));
        }
        Ok(Self { stage, data })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }
    pub fn frames(&self) -> usize {
        self.data.dims()[1]
    }
    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }
    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace4D {
    /// `[D, T_in, S, H_2, W_2]`.
    pub data: Tensor,
    /// Stage index of scale slice 0; slices cover `min_stage..=5`.
    pub min_stage: usize,
}

impl FeatureSpace4D {
    pub fn new(data: Tensor, min_stage: usize) -> Result<Self> {
        if data.ndim() != 5 {
            return Err(shape_err!("feature space must be [D, T, S, H, W], got {:?}", data.dims()));
        }
        let s = data.dims()[2];
        if !(2..=MAX_STAGE).contains(&min_stage) || min_stage + s != MAX_STAGE + 1 {
            return Err(shape_err!("{} scale slices cannot start at stage {}", s, min_stage));
        }
        Ok(Self { data, min_stage })
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }
    pub fn frames(&self) -> usize {
        self.data.dims()[1]
    }
    pub fn scales(&self) -> usize {
        self.data.dims()[2]
    }
    pub fn grid_height(&self) -> usize {
        self.data.dims()[3]
    }
    pub fn grid_width(&self) -> usize {
        self.data.dims()[4]
    }
    /// Frame size in pixels, `(width, height)`.
    pub fn frame_size(&self) -> (f64, f64) {
        (self.grid_width() as f64 * GRID_STRIDE, self.grid_height() as f64 * GRID_STRIDE)
    }

    pub fn layout(&self, groups: usize) -> SampleLayout {
        SampleLayout { groups, min_stage: self.min_stage }
    }

    /// Feature vector at pixel coordinates `(x, y)`, scale index `z`, frame `t`.
    pub fn read_point(&self, t: usize, x: f64, y: f64, z: f64) -> Result<Vec<f64>> {
        self.read_point_channels(t, x, y, z, 0, self.channels())
    }

    /// Channel slice `[group * D/G, (group + 1) * D/G)` of [`Self::read_point`].
    pub fn read_point_group(&self, t: usize, x: f64, y: f64, z: f64, group: usize, groups: usize) -> Result<Vec<f64>> {
        let d = self.channels();
        if groups == 0 || !d.is_multiple_of(groups) || group >= groups {
            return Err(Error::Config(format!("group {group} of {groups} over {d} channels")));
        }
        let dg = d / groups;
        self.read_point_channels(t, x, y, z, group * dg, dg)
    }

    fn read_point_channels(&self, t: usize, x: f64, y: f64, z: f64, c0: usize, nc: usize) -> Result<Vec<f64>> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Input(format!("non-finite sampling coordinate ({x}, {y}, {z})")));
        }
        if t >= self.frames() {
            return Err(Error::Input(format!("frame {t} outside [0, {})", self.frames())));
        }
        let corners = Corners::new(self.data.dims(), self.min_stage, x, y, z);
        let dims = self.data.dims();
        let (tt, s, h, w) = (dims[1], dims[2], dims[3], dims[4]);
        let data = self.data.data();
        Ok((c0..c0 + nc)
            .map(|c| {
                let base = (c * tt + t) * s * h * w;
                corners.iter().map(|(off, wt, _)| wt * data[base + off]).sum()
            })
            .collect())
    }
}

/// Interpolation along one axis: lower/upper lattice index, weight of the
/// upper index and its derivative with respect to the grid coordinate.
#[derive(Debug, Clone, Copy)]
struct AxisInterp {
    i0: usize,
    i1: usize,
    frac: f64,
    dfrac: f64,
}

/// Piece of the clamped linear interpolant along one axis: the lower lattice
/// index, or [`CLAMP_LOW`] / [`CLAMP_HIGH`] outside the lattice.
fn axis_piece(u: f64, n: usize) -> i64 {
    if n <= 1 {
        return 0;
    }
    let hi = (n - 1) as f64;
    if u < 0.0 {
        CLAMP_LOW
    } else if u > hi {
        CLAMP_HIGH
    } else {
        (u.floor() as i64).min(n as i64 - 2)
    }
}

const CLAMP_LOW: i64 = -1;
const CLAMP_HIGH: i64 = -2;

/// Interpolation along one axis on a given piece. Off its own piece the
/// weights extend linearly, which keeps the read smooth in `u`.
fn axis_at(u: f64, n: usize, piece: i64) -> AxisInterp {
    if n <= 1 {
        return AxisInterp { i0: 0, i1: 0, frac: 0.0, dfrac: 0.0 };
    }
    match piece {
        CLAMP_LOW => AxisInterp { i0: 0, i1: 1, frac: 0.0, dfrac: 0.0 },
        CLAMP_HIGH => AxisInterp { i0: n - 2, i1: n - 1, frac: 1.0, dfrac: 0.0 },
        p => {
            let i0 = (p.max(0) as usize).min(n - 2);
            AxisInterp { i0, i1: i0 + 1, frac: u - i0 as f64, dfrac: 1.0 }
        }
    }
}

fn lattice_coords(min_stage: usize, x: f64, y: f64, z: f64) -> [f64; 3] {
    [x / GRID_STRIDE - 0.5, y / GRID_STRIDE - 0.5, z - min_stage as f64]
}

/// Pieces `(x, y, z)` of every point in a `[.., 3]` coordinate tensor.
pub(crate) fn sample_pieces(space: &[usize], coords: &Tensor, layout: &SampleLayout) -> Vec<i64> {
    let ns = [space[4], space[3], space[2]];
    coords
        .data()
        .chunks(3)
        .flat_map(|c| {
            let u = lattice_coords(layout.min_stage, c[0], c[1], c[2]);
            [axis_piece(u[0], ns[0]), axis_piece(u[1], ns[1]), axis_piece(u[2], ns[2])]
        })
        .collect()
}

/// The eight lattice corners around a point: (offset within one
/// `[S, H, W]` slab, weight, d weight / d (x_px, y_px, z)).
struct Corners {
    items: [(usize, f64, [f64; 3]); 8],
}

impl Corners {
    fn new(dims: &[usize], min_stage: usize, x: f64, y: f64, z: f64) -> Self {
        let u = lattice_coords(min_stage, x, y, z);
        let (s, h, w) = (dims[2], dims[3], dims[4]);
        let piece = [axis_piece(u[0], w), axis_piece(u[1], h), axis_piece(u[2], s)];
        Self::on_piece(dims, min_stage, x, y, z, piece)
    }

    fn on_piece(dims: &[usize], min_stage: usize, x: f64, y: f64, z: f64, piece: [i64; 3]) -> Self {
        let u = lattice_coords(min_stage, x, y, z);
        let (s, h, w) = (dims[2], dims[3], dims[4]);
        let ax = axis_at(u[0], w, piece[0]);
        let ay = axis_at(u[1], h, piece[1]);
        let az = axis_at(u[2], s, piece[2]);
        let mut items = [(0usize, 0.0f64, [0.0f64; 3]); 8];
        let mut n = 0;
        for (kz, iz) in [(1.0 - az.frac, az.i0), (az.frac, az.i1)].into_iter().enumerate() {
            for (ky, iy) in [(1.0 - ay.frac, ay.i0), (ay.frac, ay.i1)].into_iter().enumerate() {
                for (kx, ix) in [(1.0 - ax.frac, ax.i0), (ax.frac, ax.i1)].into_iter().enumerate() {
                    let sgn = |k: usize| if k == 0 { -1.0 } else { 1.0 };
                    let (wz, wy, wx) = (iz.0, iy.0, ix.0);
                    let d = [
                        sgn(kx) * ax.dfrac / GRID_STRIDE * wy * wz,
                        sgn(ky) * ay.dfrac / GRID_STRIDE * wx * wz,
                        sgn(kz) * az.dfrac * wx * wy,
                    ];
                    items[n] = ((iz.1 * h + iy.1) * w + ix.1, wx * wy * wz, d);
                    n += 1;
                }
            }
        }
        Corners { items }
    }

    fn iter(&self) -> impl Iterator<Item = &(usize, f64, [f64; 3])> {
        self.items.iter()
    }
}

/// Conventions of the tape's sampling op.
///
/// * space: `[D, T, S, H, W]`
/// * coords: `[B, L, P, G, 3]` holding `(x_px, y_px, z)`; `L` is either 1
///   (the same points are read in every frame) or `T` (row `t` is read in
///   frame `t`)
/// * output: `[B, T, P, G, D/G]`; group `g` reads channels
///   `[g·D/G, (g+1)·D/G)`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLayout {
    pub groups: usize,
    pub min_stage: usize,
}

fn check_layout(space: &[usize], coords: &[usize], layout: &SampleLayout) -> Result<(usize, usize, usize, usize)> {
    if space.len() != 5 || coords.len() != 5 || coords[4] != 3 {
        return Err(shape_err!("sample: space {:?}, coords {:?}", space, coords));
    }
    let (d, t) = (space[0], space[1]);
    let (b, l, p, g) = (coords[0], coords[1], coords[2], coords[3]);
    if g != layout.groups || g == 0 || d % g != 0 {
        return Err(shape_err!("sample: {} groups over {} channels (coords {:?})", layout.groups, d, coords));
    }
    if l != 1 && l != t {
        return Err(shape_err!("sample: coords carry {} frames, space has {}", l, t));
    }
    Ok((b, l, p, d / g))
}

/// `pieces` holds one [`sample_pieces`] entry per coordinate.
pub(crate) fn sample_forward(space: &Tensor, coords: &Tensor, layout: &SampleLayout, pieces: &[i64]) -> Result<Tensor> {
    let (b, l, p, dg) = check_layout(space.dims(), coords.dims(), layout)?;
    if pieces.len() != coords.len() {
        return Err(shape_err!("sample: {} pieces for {} coordinates", pieces.len(), coords.len()));
    }
    if !coords.is_finite() {
        return Err(Error::Input("non-finite sampling coordinate".into()));
    }
    let sd = space.dims();
    let (t_len, slab) = (sd[1], sd[2] * sd[3] * sd[4]);
    let g = layout.groups;
    let mut out = Tensor::zeros([b, t_len, p, g, dg]);
    let od = out.data_mut();
    let sv = space.data();
    let cv = coords.data();
    for bi in 0..b {
        for t in 0..t_len {
            let lt = if l == 1 { 0 } else { t };
            for pi in 0..p {
                for gi in 0..g {
                    let cbase = (((bi * l + lt) * p + pi) * g + gi) * 3;
                    let piece = [pieces[cbase], pieces[cbase + 1], pieces[cbase + 2]];
                    let corners = Corners::on_piece(sd, layout.min_stage, cv[cbase], cv[cbase + 1], cv[cbase + 2], piece);
                    let obase = (((bi * t_len + t) * p + pi) * g + gi) * dg;
                    for c in 0..dg {
                        let sbase = ((gi * dg + c) * t_len + t) * slab;
                        od[obase + c] = corners.iter().map(|(off, wt, _)| wt * sv[sbase + off]).sum();
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn sample_backward(
    space: &Tensor,
    coords: &Tensor,
    layout: &SampleLayout,
    pieces: &[i64],
    grad: &Tensor,
    want_space: bool,
    want_coords: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, l, p, dg) = check_layout(space.dims(), coords.dims(), layout).expect("checked in forward");
    let sd = space.dims();
    let (t_len, slab) = (sd[1], sd[2] * sd[3] * sd[4]);
    let g = layout.groups;
    let mut gs = want_space.then(|| Tensor::zeros(sd.to_vec()));
    let mut gc = want_coords.then(|| Tensor::zeros(coords.dims().to_vec()));
    let sv = space.data();
    let cv = coords.data();
    let gv = grad.data();
    for bi in 0..b {
        for t in 0..t_len {
            let lt = if l == 1 { 0 } else { t };
            for pi in 0..p {
                for gi in 0..g {
                    let cbase = (((bi * l + lt) * p + pi) * g + gi) * 3;
                    let piece = [pieces[cbase], pieces[cbase + 1], pieces[cbase + 2]];
                    let corners = Corners::on_piece(sd, layout.min_stage, cv[cbase], cv[cbase + 1], cv[cbase + 2], piece);
                    let obase = (((bi * t_len + t) * p + pi) * g + gi) * dg;
                    for c in 0..dg {
                        let go = gv[obase + c];
                        if go == 0.0 {
                            continue;
                        }
                        let sbase = ((gi * dg + c) * t_len + t) * slab;
                        for (off, wt, dw) in corners.iter() {
                            if let Some(gs) = gs.as_mut() {
                                gs.data_mut()[sbase + off] += go * wt;
                            }
                            if let Some(gc) = gc.as_mut() {
                                let f = sv[sbase + off];
                                let gcd = gc.data_mut();
                                gcd[cbase] += go * dw[0] * f;
                                gcd[cbase + 1] += go * dw[1] * f;
                                gcd[cbase + 2] += go * dw[2] * f;
                            }
                        }
                    }
                }
            }
        }
    }
    (gs, gc)
}

// ---- construction --------------------------------------------------------

/// Per-position channel projection of a `[C, T, H, W]` map: `[D, T, H, W]`.
fn project(map: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let md = map.dims();
    let (c, t, h, wd) = (md[0], md[1], md[2], md[3]);
    if w.ndim() != 2 || w.dims()[0] != c || b.dims() != [w.dims()[1]] {
        return Err(shape_err!("lateral projection {:?}/{:?} for {} channels", w.dims(), b.dims(), c));
    }
    let d = w.dims()[1];
    let plane = t * h * wd;
    let mut out = Tensor::zeros([d, t, h, wd]);
    let od = out.data_mut();
    for o in 0..d {
        let dst = &mut od[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b.data()[o]);
        for i in 0..c {
            let wv = w.data()[i * d + o];
            if wv == 0.0 {
                continue;
            }
            let src = &map.data()[i * plane..(i + 1) * plane];
            for (dv, sv) in dst.iter_mut().zip(src) {
                *dv += wv * sv;
            }
        }
    }
    Ok(out)
}

/// Source index for nearest-neighbour resampling with pixel-centre
/// alignment; exact half-way ties go to the lower index.
pub fn nearest_source_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let r = pos.floor();
    let idx = if pos - r > 0.5 { r + 1.0 } else { r };
    (idx.max(0.0) as usize).min(src_len - 1)
}

/// Nearest-neighbour resize of `[D, T, h, w]` to `[D, T, H, W]`.
fn resize_nearest(map: &Tensor, h_out: usize, w_out: usize) -> Tensor {
    let md = map.dims();
    let (d, t, h, w) = (md[0], md[1], md[2], md[3]);
    let ys: Vec<usize> = (0..h_out).map(|y| nearest_source_index(y, h, h_out)).collect();
    let xs: Vec<usize> = (0..w_out).map(|x| nearest_source_index(x, w, w_out)).collect();
    let mut out = Tensor::zeros([d, t, h_out, w_out]);
    let od = out.data_mut();
    let src = map.data();
    for dt in 0..d * t {
        for (yo, &ys_) in ys.iter().enumerate() {
            for (xo, &xs_) in xs.iter().enumerate() {
                od[(dt * h_out + yo) * w_out + xo] = src[(dt * h + ys_) * w + xs_];
            }
        }
    }
    out
}

fn stack_scales(maps: &[Tensor], min_stage: usize) -> Result<FeatureSpace4D> {
    let d0 = maps[0].dims();
    let (d, t, h, w) = (d0[0], d0[1], d0[2], d0[3]);
    let s = maps.len();
    let mut data = Tensor::zeros([d, t, s, h, w]);
    let plane = h * w;
    {
        let dd = data.data_mut();
        for (k, m) in maps.iter().enumerate() {
            for c in 0..d {
                for ti in 0..t {
                    let dst = ((c * t + ti) * s + k) * plane;
                    let src = (c * t + ti) * plane;
                    dd[dst..dst + plane].copy_from_slice(&m.data()[src..src + plane]);
                }
            }
        }
    }
    FeatureSpace4D::new(data, min_stage)
}

/// Lateral projection per stage followed by nearest-neighbour rescaling to
/// the stage-2 grid. `stages` must be consecutive and end at stage 5; the
/// usual input is all four stages 2..=5.
pub fn build_from_hierarchy(stages: &[StageFeatureMap], lateral: &[(Tensor, Tensor)]) -> Result<FeatureSpace4D> {
    if stages.is_empty() || stages.len() != lateral.len() {
        return Err(shape_err!("{} stages with {} lateral projections", stages.len(), lateral.len()));
    }
    let min_stage = stages[0].stage;
    for (k, s) in stages.iter().enumerate() {
        if s.stage != min_stage + k {
            return Err(shape_err!("stages must be consecutive, got {} at position {}", s.stage, k));
        }
    }
    if stages.last().expect("non-empty").stage != MAX_STAGE {
        return Err(shape_err!("stages must end at stage {}", MAX_STAGE));
    }
    let first = &stages[0];
    let scale0 = 1usize << (first.stage - 2);
    let (h2, w2) = (first.height() * scale0, first.width() * scale0);
    let t = first.frames();
    let mut maps = Vec::with_capacity(stages.len());
    for (s, (w, b)) in stages.iter().zip(lateral) {
        let f = 1usize << (s.stage - 2);
        if s.frames() != t || s.height() * f != h2 || s.width() * f != w2 {
            return Err(shape_err!(
                "stage {} has extent [T={}, {}x{}], pyramid needs [T={}, {}x{}]",
                s.stage,
                s.frames(),
                s.height(),
                s.width(),
                t,
                h2 / f,
                w2 / f
            ));
        }
        let p = project(&s.data, w, b)?;
        maps.push(resize_nearest(&p, h2, w2));
    }
    stack_scales(&maps, min_stage)
}

/// Spatial stride of one plain-backbone head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadStride {
    /// Stride 1/4: 4×4 transposed convolution.
    Quarter,
    /// Stride 1/2: 2×2 transposed convolution.
    Half,
    /// Stride 1: per-position projection.
    One,
    /// Stride 2: 2×2 convolution with stride 2.
    Two,
}

impl HeadStride {
    pub const ALL: [HeadStride; 4] = [HeadStride::Quarter, HeadStride::Half, HeadStride::One, HeadStride::Two];

    pub fn kernel(self) -> usize {
        match self {
            HeadStride::Quarter => 4,
            HeadStride::Half | HeadStride::Two => 2,
            HeadStride::One => 1,
        }
    }

    /// Stage index produced from a stride-16 input.
    pub fn stage(self) -> usize {
        match self {
            HeadStride::Quarter => 2,
            HeadStride::Half => 3,
            HeadStride::One => 4,
            HeadStride::Two => 5,
        }
    }
}

/// One (de)convolution head of the plain-backbone path.
#[derive(Debug, Clone)]
pub struct PlainHead {
    pub stride: HeadStride,
    /// `[C, D, k, k]`.
    pub weight: Tensor,
    /// `[D]`.
    pub bias: Tensor,
}

impl PlainHead {
    pub fn apply(&self, map: &Tensor) -> Result<Tensor> {
        let md = map.dims();
        if md.len() != 4 {
            return Err(shape_err!("plain map must be [C, T, H, W], got {:?}", md));
        }
        let (c, t, h, w) = (md[0], md[1], md[2], md[3]);
        let k = self.stride.kernel();
        let wd = self.weight.dims();
        if wd.len() != 4 || wd[0] != c || wd[2] != k || wd[3] != k || self.bias.dims() != [wd[1]] {
            return Err(shape_err!("head {:?} weight {:?} for {} channels", self.stride, wd, c));
        }
        let d = wd[1];
        let wt = |ci: usize, o: usize, a: usize, b: usize| self.weight.data()[((ci * d + o) * k + a) * k + b];
        let src = |ci: usize, ti: usize, y: usize, x: usize| map.data()[((ci * t + ti) * h + y) * w + x];
        match self.stride {
            HeadStride::Quarter | HeadStride::Half | HeadStride::One => {
                let (ho, wo) = (h * k, w * k);
                let mut out = Tensor::zeros([d, t, ho, wo]);
                let od = out.data_mut();
                for o in 0..d {
                    for ti in 0..t {
                        for y in 0..ho {
                            for x in 0..wo {
                                let (iy, a, ix, b) = (y / k, y % k, x / k, x % k);
                                let mut v = self.bias.data()[o];
                                for ci in 0..c {
                                    v += src(ci, ti, iy, ix) * wt(ci, o, a, b);
                                }
                                od[((o * t + ti) * ho + y) * wo + x] = v;
                            }
                        }
                    }
                }
                Ok(out)
            }
            HeadStride::Two => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(shape_err!("stride-2 head needs even extents, got {}x{}", h, w));
                }
                let (ho, wo) = (h / 2, w / 2);
                let mut out = Tensor::zeros([d, t, ho, wo]);
                let od = out.data_mut();
                for o in 0..d {
                    for ti in 0..t {
                        for y in 0..ho {
                            for x in 0..wo {
                                let mut v = self.bias.data()[o];
                                for ci in 0..c {
                                    for a in 0..2 {
                                        for b in 0..2 {
                                            v += src(ci, ti, 2 * y + a, 2 * x + b) * wt(ci, o, a, b);
                                        }
                                    }
                                }
                                od[((o * t + ti) * ho + y) * wo + x] = v;
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Builds the volume from a single stride-16 map with four heads of
/// strides 1/4, 1/2, 1 and 2 (in that order).
pub fn build_from_plain(last_map: &Tensor, heads: &[PlainHead]) -> Result<FeatureSpace4D> {
    if heads.len() != 4 || heads.iter().zip(HeadStride::ALL).any(|(h, s)| h.stride != s) {
        return Err(shape_err!("plain path needs heads with strides 1/4, 1/2, 1, 2 in order"));
    }
    let md = last_map.dims();
    if md.len() != 4 {
        return Err(shape_err!("plain map must be [C, T, H, W], got {:?}", md));
    }
    let (h2, w2) = (md[2] * 4, md[3] * 4);
    let mut maps = Vec::with_capacity(4);
    for head in heads {
        let m = head.apply(last_map)?;
        maps.push(resize_nearest(&m, h2, w2));
    }
    stack_scales(&maps, 2)
}
