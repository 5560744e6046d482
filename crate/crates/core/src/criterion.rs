//! Bipartite matching and the set-prediction training losses.

use crate::autograd::{Tape, Var};
use crate::decoder::{softmax_rows, DecoderOutput, ModuleOutput};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{BoxXyxy, Mode};
use crate::tensor::Tensor;

/// Floor for probabilities inside logarithms of value-level losses.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Action BCE weight (keyframe only).
    pub action: f64,
}

impl LossWeights {
    pub fn default_for(mode: Mode) -> Self {
        match mode {
            Mode::Keyframe => Self { cls: 2.0, l1: 2.0, giou: 2.0, action: 24.0 },
            Mode::Tubelet => Self { cls: 2.0, l1: 2.0, giou: 2.0, action: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.l1, self.giou, self.action].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Focal {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Ground truth of one clip.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruthSet {
    /// Keyframe boxes with multi-hot action labels.
    Keyframe { boxes: Vec<BoxXyxy>, actions: Vec<Vec<bool>> },
    /// Per-frame boxes `[K][T]` with one class each.
    Tubelet { boxes: Vec<Vec<BoxXyxy>>, classes: Vec<usize> },
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        match self {
            GroundTruthSet::Keyframe { boxes, .. } => boxes.len(),
            GroundTruthSet::Tubelet { boxes, .. } => boxes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> Mode {
        match self {
            GroundTruthSet::Keyframe { .. } => Mode::Keyframe,
            GroundTruthSet::Tubelet { .. } => Mode::Tubelet,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let check_box = |b: &BoxXyxy| -> Result<()> {
            if b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1] {
                Ok(())
            } else {
                Err(Error::Input(format!("ground-truth box {b:?} has no positive area")))
            }
        };
        match self {
            GroundTruthSet::Keyframe { boxes, actions } => {
                if actions.len() != boxes.len() || actions.iter().any(|a| a.len() != classes) {
                    return Err(shape_err!("{} boxes with action rows of {:?} (C={})", boxes.len(), actions.iter().map(Vec::len).collect::<Vec<_>>(), classes));
                }
                boxes.iter().try_for_each(check_box)
            }
            GroundTruthSet::Tubelet { boxes, classes: labels } => {
                if labels.len() != boxes.len() || labels.iter().any(|&c| c >= classes) {
                    return Err(Error::Input(format!("{} tubelets with classes {:?} (C={})", boxes.len(), labels, classes)));
                }
                let t = boxes.first().map_or(0, Vec::len);
                if boxes.iter().any(|b| b.len() != t) {
                    return Err(shape_err!("ground-truth tubelets of unequal length"));
                }
                boxes.iter().flatten().try_for_each(check_box)
            }
        }
    }
}

// ---- value-level terms -----------------------------------------------------

fn area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Generalised IoU of two positive-area boxes.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    for x in [a, b] {
        if !(x[2] > x[0] && x[3] > x[1]) || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!("degenerate box {x:?}")));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(inter / union - (hull - union) / hull)
}

/// `1 − GIoU ∈ [0, 2]`.
pub fn giou_loss(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    Ok(1.0 - giou(a, b)?)
}

/// Pixel `xyxy` to `(cx, cy, w, h)` divided by the frame size.
pub fn normalized_cxcywh(b: &BoxXyxy, frame: (f64, f64)) -> [f64; 4] {
    let (fw, fh) = frame;
    [(b[0] + b[2]) / 2.0 / fw, (b[1] + b[3]) / 2.0 / fh, (b[2] - b[0]) / fw, (b[3] - b[1]) / fh]
}

/// Mean absolute difference of two normalised `(cx, cy, w, h)` boxes.
pub fn l1_box_loss(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// `−α (1 − p_t)^γ ln p_t` with `p_t = p[target]`.
pub fn focal_loss(p: &[f64], target: usize, focal: Focal) -> Result<f64> {
    let pt = *p.get(target).ok_or_else(|| Error::Input(format!("target {target} outside {} classes", p.len())))?;
    Ok(-focal.alpha * (1.0 - pt).powf(focal.gamma) * pt.max(PROB_EPS).ln())
}

// ---- matching --------------------------------------------------------------

/// `σ`: prediction index to ground-truth index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pred_to_gt: Vec<Option<usize>>,
    /// Sum of matched cost entries, accumulated in prediction order.
    pub cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pred_to_gt.iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g)))
    }
}

/// Minimum-cost assignment of the selected ground-truth columns `cols` to
/// distinct prediction rows `rows` of the row-major `[N, k]` cost, by
/// shortest augmenting paths. Returns, per column, an index into `rows`.
fn hungarian_core(cost: &[f64], k: usize, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let kk = cols.len();
    let nn = rows.len();
    let c = |g: usize, p: usize| cost[rows[p] * k + cols[g]];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; kk + 1];
    let mut v = vec![0.0; nn + 1];
    let mut way = vec![0usize; nn + 1];
    // owner[p] = 1-based gt index matched to prediction p (1-based), 0 = free
    let mut owner = vec![0usize; nn + 1];
    for g in 1..=kk {
        owner[0] = g;
        let mut j0 = 0usize;
        let mut minv = vec![inf; nn + 1];
        let mut used = vec![false; nn + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=nn {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=nn {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut gt_to_pred = vec![0; kk];
    for p in 1..=nn {
        if owner[p] != 0 {
            gt_to_pred[owner[p] - 1] = p - 1;
        }
    }
    gt_to_pred
}

fn restricted_optimum(cost: &[f64], k: usize, rows: &[usize], cols: &[usize]) -> f64 {
    if cols.is_empty() {
        return 0.0;
    }
    hungarian_core(cost, k, rows, cols)
        .iter()
        .zip(cols)
        .map(|(&p, &g)| cost[rows[p] * k + g])
        .sum()
}

fn check_cost(cost: &Tensor) -> Result<(usize, usize)> {
    if cost.ndim() != 2 {
        return Err(shape_err!("cost matrix must be [N, K], got {:?}", cost.dims()));
    }
    let (n, k) = (cost.dims()[0], cost.dims()[1]);
    if k > n {
        return Err(Error::Input(format!("{k} ground truths for {n} predictions")));
    }
    if !cost.is_finite() {
        return Err(Error::Input("non-finite matching cost".into()));
    }
    Ok((n, k))
}

/// Greedy fixing of `(prediction, gt)` edges in `order`, keeping only edges
/// that still admit an optimal completion. With `close_rows` a prediction
/// that passes its edges unmatched stays unmatched (valid only for
/// prediction-major orders).
fn fix_in_order(c: &[f64], n: usize, k: usize, order: &[(usize, usize)], close_rows: bool) -> Vec<Option<usize>> {
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..k).collect();
    let best = restricted_optimum(c, k, &all_rows, &all_cols);
    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * (k.max(1) as f64);

    let mut pred_to_gt = vec![None; n];
    let mut row_open = vec![true; n];
    let mut col_free = vec![true; k];
    let mut remaining = k;
    let mut fixed = 0.0;
    for &(i, g) in order {
        if remaining == 0 {
            break;
        }
        if close_rows {
            for r in row_open.iter_mut().take(i) {
                *r = false;
            }
        }
        if !row_open[i] || !col_free[g] {
            continue;
        }
        let rows: Vec<usize> = (0..n).filter(|&r| r != i && row_open[r]).collect();
        let cols: Vec<usize> = (0..k).filter(|&q| q != g && col_free[q]).collect();
        if cols.len() > rows.len() {
            continue;
        }
        if fixed + c[i * k + g] + restricted_optimum(c, k, &rows, &cols) <= best + tol {
            fixed += c[i * k + g];
            pred_to_gt[i] = Some(g);
            row_open[i] = false;
            col_free[g] = false;
            remaining -= 1;
        }
    }
    if remaining > 0 {
        // tolerance starved the greedy pass; fall back to the plain optimum
        pred_to_gt = vec![None; n];
        for (g, p) in hungarian_core(c, k, &all_rows, &all_cols).into_iter().enumerate() {
            pred_to_gt[p] = Some(g);
        }
    }
    pred_to_gt
}

fn assignment(c: &[f64], k: usize, pred_to_gt: Vec<Option<usize>>) -> Assignment {
    let cost = pred_to_gt.iter().enumerate().filter_map(|(i, g)| g.map(|g| c[i * k + g])).sum();
    Assignment { pred_to_gt, cost }
}

/// Optimal bipartite matching of `cost ∈ [N, K]` with `K ≤ N`. Among
/// optimal assignments the lexicographically smallest list of
/// `(prediction, gt)` pairs is returned.
pub fn match_predictions(cost: &Tensor) -> Result<Assignment> {
    let (n, k) = check_cost(cost)?;
    let order: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |g| (i, g))).collect();
    Ok(assignment(cost.data(), k, fix_in_order(cost.data(), n, k, &order, true)))
}

/// Like [`match_predictions`], but ties between optimal assignments are
/// broken by fixing edges in increasing `secondary` order first and by
/// index only after that. Unlike the index rule this commutes with
/// reordering the predictions whenever `secondary` has no ties.
pub fn match_predictions_tiebreak(cost: &Tensor, secondary: &Tensor) -> Result<Assignment> {
    let (n, k) = check_cost(cost)?;
    if secondary.dims() != cost.dims() {
        return Err(shape_err!("secondary cost {:?} for cost {:?}", secondary.dims(), cost.dims()));
    }
    if !secondary.is_finite() {
        return Err(Error::Input("non-finite secondary cost".into()));
    }
    let s = secondary.data();
    let mut order: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |g| (i, g))).collect();
    order.sort_by(|a, b| s[a.0 * k + a.1].total_cmp(&s[b.0 * k + b.1]).then(a.cmp(b)));
    Ok(assignment(cost.data(), k, fix_in_order(cost.data(), n, k, &order, false)))
}

/// Values of one module's predictions needed by the matcher.
#[derive(Debug, Clone)]
pub struct PredictionValues {
    /// `[N, L, 4]` pixel boxes.
    pub boxes: Tensor,
    /// Keyframe: `[N, 2]` softmax probabilities.
    pub human: Option<Tensor>,
    /// Tubelet: `[N, C + 1]` softmax probabilities.
    pub classes: Option<Tensor>,
}

fn box_at(t: &Tensor, i: usize, l: usize) -> BoxXyxy {
    let d = t.dims();
    let base = (i * d[1] + l) * 4;
    let v = t.data();
    [v[base], v[base + 1], v[base + 2], v[base + 3]]
}

/// Keyframe matching cost `λ1·CE + λ2·L1 + λ3·(1 − GIoU)`.
pub fn matching_cost_keyframe(pred: &PredictionValues, gt: &GroundTruthSet, frame: (f64, f64), w: &LossWeights) -> Result<Tensor> {
    let GroundTruthSet::Keyframe { boxes, .. } = gt else {
        return Err(Error::Config("keyframe matching needs keyframe ground truth".into()));
    };
    let human = pred.human.as_ref().ok_or_else(|| Error::Config("missing human scores".into()))?;
    let n = pred.boxes.dims()[0];
    let mut out = Tensor::zeros([n, boxes.len()]);
    for i in 0..n {
        let pb = box_at(&pred.boxes, i, 0);
        let cls = -human.at(&[i, 0]).max(PROB_EPS).ln();
        for (j, gb) in boxes.iter().enumerate() {
            let l1 = l1_box_loss(&normalized_cxcywh(&pb, frame), &normalized_cxcywh(gb, frame));
            let v = w.cls * cls + w.l1 * l1 + w.giou * giou_loss(&pb, gb)?;
            out.set(&[i, j], v);
        }
    }
    Ok(out)
}

/// Tubelet matching cost: focal classification plus frame-averaged box terms.
pub fn matching_cost_tubelet(pred: &PredictionValues, gt: &GroundTruthSet, frame: (f64, f64), w: &LossWeights, focal: Focal) -> Result<Tensor> {
    let GroundTruthSet::Tubelet { boxes, classes } = gt else {
        return Err(Error::Config("tubelet matching needs tubelet ground truth".into()));
    };
    let probs = pred.classes.as_ref().ok_or_else(|| Error::Config("missing class scores".into()))?;
    let (n, t) = (pred.boxes.dims()[0], pred.boxes.dims()[1]);
    let mut out = Tensor::zeros([n, boxes.len()]);
    for i in 0..n {
        for (j, (gtube, &c)) in boxes.iter().zip(classes).enumerate() {
            if gtube.len() != t {
                return Err(shape_err!("ground-truth tubelet of {} frames for {}-frame predictions", gtube.len(), t));
            }
            let (mut l1, mut gl) = (0.0, 0.0);
            for (f, gb) in gtube.iter().enumerate() {
                let pb = box_at(&pred.boxes, i, f);
                l1 += l1_box_loss(&normalized_cxcywh(&pb, frame), &normalized_cxcywh(gb, frame));
                gl += giou_loss(&pb, gb)?;
            }
            let cls = focal_loss(probs.row(i), c, focal)?;
            out.set(&[i, j], w.cls * cls + w.l1 * l1 / t as f64 + w.giou * gl / t as f64);
        }
    }
    Ok(out)
}

// ---- tape losses -----------------------------------------------------------

/// Tape handles of one set of predictions.
#[derive(Debug, Clone, Copy)]
pub struct Predictions {
    /// `[N, L, 4]` (or `[N, 4]` for keyframes) pixel boxes.
    pub boxes: Var,
    pub human_logits: Option<Var>,
    pub action_logits: Option<Var>,
    pub class_logits: Option<Var>,
}

impl From<&ModuleOutput> for Predictions {
    fn from(m: &ModuleOutput) -> Self {
        Self { boxes: m.boxes, human_logits: m.human_logits, action_logits: m.action_logits, class_logits: m.class_logits }
    }
}

impl Predictions {
    pub fn values(&self, tape: &Tape) -> Result<PredictionValues> {
        let b = tape.value(self.boxes);
        let boxes = match b.ndim() {
            2 => b.clone().reshape([b.dims()[0], 1, 4])?,
            3 => b.clone(),
            _ => return Err(shape_err!("prediction boxes {:?}", b.dims())),
        };
        Ok(PredictionValues {
            boxes,
            human: self.human_logits.map(|v| softmax_rows(tape.value(v))),
            classes: self.class_logits.map(|v| softmax_rows(tape.value(v))),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub action: f64,
    /// Total per decoder module.
    pub per_module: Vec<f64>,
    pub matched: usize,
}

impl LossBreakdown {
    fn absorb(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.cls += other.cls;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.action += other.action;
        self.per_module.push(other.total);
        self.matched += other.matched;
    }
}

fn one_hot(rows: usize, width: usize, hot: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros([rows, width]);
    for r in 0..rows {
        t.set(&[r, hot(r)], 1.0);
    }
    t
}

/// `−Σ onehot · log_softmax`, per row `[N]`.
fn target_log_prob(tape: &mut Tape, logits: Var, target: Tensor) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let t = tape.constant(target);
    let picked = tape.mul(lp, t)?;
    tape.sum_axis(picked, 1)
}

fn column(tape: &mut Tape, v: Var, c: usize) -> Result<Var> {
    tape.slice(v, 1, c, 1)
}

/// Per-row `1 − GIoU` of `[M, 4]` predicted boxes against constant targets.
pub fn giou_loss_var(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let tv = tape.constant(target.clone());
    let (p, t) = (
        [column(tape, pred, 0)?, column(tape, pred, 1)?, column(tape, pred, 2)?, column(tape, pred, 3)?],
        [column(tape, tv, 0)?, column(tape, tv, 1)?, column(tape, tv, 2)?, column(tape, tv, 3)?],
    );
    let ix1 = tape.maximum(p[0], t[0])?;
    let iy1 = tape.maximum(p[1], t[1])?;
    let ix2 = tape.minimum(p[2], t[2])?;
    let iy2 = tape.minimum(p[3], t[3])?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let area = |tape: &mut Tape, b: &[Var; 4]| -> Result<Var> {
        let w = tape.sub(b[2], b[0])?;
        let h = tape.sub(b[3], b[1])?;
        tape.mul(w, h)
    };
    let ap = area(tape, &p)?;
    let at = area(tape, &t)?;
    let sum = tape.add(ap, at)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;
    let hx1 = tape.minimum(p[0], t[0])?;
    let hy1 = tape.minimum(p[1], t[1])?;
    let hx2 = tape.maximum(p[2], t[2])?;
    let hy2 = tape.maximum(p[3], t[3])?;
    let hull = area(tape, &[hx1, hy1, hx2, hy2])?;
    let gap = tape.sub(hull, union)?;
    let frac = tape.div(gap, hull)?;
    let g = tape.sub(iou, frac)?;
    let loss = tape.rsub_scalar(1.0, g);
    let m = tape.dims(loss)[0];
    tape.reshape(loss, &[m])
}

/// Per-row mean |Δ| of normalised `(cx, cy, w, h)`, `[M]`.
pub fn l1_loss_var(tape: &mut Tape, pred: Var, target: &Tensor, frame: (f64, f64)) -> Result<Var> {
    let m = tape.dims(pred)[0];
    let (fw, fh) = frame;
    // xyxy → normalised cxcywh as a constant linear map
    let map = Tensor::new(
        [4, 4],
        vec![
            0.5 / fw, 0.0, -1.0 / fw, 0.0, //
            0.0, 0.5 / fh, 0.0, -1.0 / fh, //
            0.5 / fw, 0.0, 1.0 / fw, 0.0, //
            0.0, 0.5 / fh, 0.0, 1.0 / fh,
        ],
    )?;
    let mv = tape.constant(map);
    let pn = tape.matmul(pred, mv)?;
    let tn: Vec<f64> = (0..m)
        .flat_map(|r| normalized_cxcywh(&[target.at(&[r, 0]), target.at(&[r, 1]), target.at(&[r, 2]), target.at(&[r, 3])], frame))
        .collect();
    let tv = tape.constant(Tensor::new([m, 4], tn)?);
    let d = tape.sub(pn, tv)?;
    let d = tape.abs(d);
    tape.mean_axis(d, 1)
}

/// Mean over classes of `BCE(sigmoid(x), y)`, per row.
fn bce_with_logits(tape: &mut Tape, logits: Var, targets: Tensor) -> Result<Var> {
    let y = tape.constant(targets);
    let pos = tape.relu(logits);
    let a = tape.abs(logits);
    let na = tape.scale(a, -1.0);
    let e = tape.exp(na);
    let e1 = tape.add_scalar(e, 1.0);
    let lg = tape.ln(e1);
    let sp = tape.add(pos, lg)?;
    let xy = tape.mul(logits, y)?;
    let l = tape.sub(sp, xy)?;
    tape.mean_axis(l, 1)
}

/// Value of [`bce_with_logits`] for one row.
fn bce_value(logits: &[f64], targets: &[bool]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(0.0) + (-x.abs()).exp().ln_1p() - if y { x } else { 0.0 })
        .sum();
    total / logits.len().max(1) as f64
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => v,
        Some(a) => tape.add(a, v)?,
    }))
}

/// Optimal matching of one set of predictions against the ground truth.
pub fn match_set(tape: &Tape, pred: &Predictions, gt: &GroundTruthSet, frame: (f64, f64), w: &LossWeights, focal: Focal) -> Result<Assignment> {
    let values = pred.values(tape)?;
    let n = values.boxes.dims()[0];
    let cost = match gt.mode() {
        Mode::Keyframe => matching_cost_keyframe(&values, gt, frame, w)?,
        Mode::Tubelet => matching_cost_tubelet(&values, gt, frame, w, focal)?,
    };
    // the action term is not part of the cost, but it decides between
    // equally cheap assignments so the loss does not depend on query order
    match (gt, pred.action_logits) {
        (GroundTruthSet::Keyframe { actions, .. }, Some(logits)) if w.action > 0.0 => {
            let z = tape.value(logits);
            let secondary = Tensor::from_fn([n, actions.len()], |idx| {
                let (i, g) = (idx / actions.len(), idx % actions.len());
                w.action * bce_value(z.row(i), &actions[g])
            });
            match_predictions_tiebreak(&cost, &secondary)
        }
        _ => match_predictions(&cost),
    }
}

/// Loss of one set of predictions under a fresh matching.
pub fn set_loss(
    tape: &mut Tape,
    pred: &Predictions,
    gt: &GroundTruthSet,
    frame: (f64, f64),
    w: &LossWeights,
    focal: Focal,
) -> Result<(Var, LossBreakdown, Assignment)> {
    let sigma = match_set(tape, pred, gt, frame, w, focal)?;
    let (l, br) = set_loss_given(tape, pred, gt, frame, w, focal, &sigma)?;
    Ok((l, br, sigma))
}

/// Loss of one set of predictions under a given matching. The matching is
/// treated as a constant, so this is the function the gradients belong to.
pub fn set_loss_given(
    tape: &mut Tape,
    pred: &Predictions,
    gt: &GroundTruthSet,
    frame: (f64, f64),
    w: &LossWeights,
    focal: Focal,
    sigma: &Assignment,
) -> Result<(Var, LossBreakdown)> {
    let dims = tape.dims(pred.boxes);
    let (n, l) = (dims[0], if dims.len() == 3 { dims[1] } else { 1 });
    if sigma.pred_to_gt.len() != n || sigma.pairs().any(|(_, g)| g >= gt.len()) {
        return Err(Error::Shape(format!("assignment over {} predictions does not fit {n} predictions and {} targets", sigma.pred_to_gt.len(), gt.len())));
    }
    let pairs: Vec<(usize, usize)> = sigma.pairs().collect();
    let pred_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut br = LossBreakdown { matched: pairs.len(), ..Default::default() };
    let mut total: Option<Var>;

    // classification over every prediction
    match gt {
        GroundTruthSet::Keyframe { .. } => {
            let logits = pred.human_logits.ok_or_else(|| Error::Config("missing human logits".into()))?;
            let target = one_hot(n, 2, |i| if sigma.pred_to_gt[i].is_some() { 0 } else { 1 });
            let lp = target_log_prob(tape, logits, target)?;
            let s = tape.sum(lp);
            let cls = tape.scale(s, -w.cls);
            br.cls = tape.value(cls).item();
            total = Some(cls);
        }
        GroundTruthSet::Tubelet { classes, .. } => {
            let logits = pred.class_logits.ok_or_else(|| Error::Config("missing class logits".into()))?;
            let c1 = tape.dims(logits)[1];
            let target = one_hot(n, c1, |i| sigma.pred_to_gt[i].map_or(c1 - 1, |g| classes[g]));
            let lp = target_log_prob(tape, logits, target)?;
            let pt = tape.exp(lp);
            let q = tape.rsub_scalar(1.0, pt);
            let q = tape.powf(q, focal.gamma);
            let f = tape.mul(q, lp)?;
            let s = tape.sum(f);
            let cls = tape.scale(s, -focal.alpha * w.cls);
            br.cls = tape.value(cls).item();
            total = Some(cls);
        }
    }

    if !pairs.is_empty() {
        let m = pairs.len();
        let boxes = if tape.dims(pred.boxes).len() == 2 { tape.reshape(pred.boxes, &[n, 1, 4])? } else { pred.boxes };
        let matched = tape.index_select(boxes, 0, &pred_idx)?;
        let flat = tape.reshape(matched, &[m * l, 4])?;
        let target: Vec<f64> = match gt {
            GroundTruthSet::Keyframe { boxes, .. } => pairs.iter().flat_map(|&(_, g)| boxes[g]).collect(),
            GroundTruthSet::Tubelet { boxes, .. } => pairs.iter().flat_map(|&(_, g)| boxes[g].iter().flatten().copied()).collect(),
        };
        let target = Tensor::new([m * l, 4], target)?;
        let l1 = l1_loss_var(tape, flat, &target, frame)?;
        let l1 = tape.sum(l1);
        let l1 = tape.scale(l1, w.l1 / l as f64);
        let gl = giou_loss_var(tape, flat, &target)?;
        let gl = tape.sum(gl);
        let gl = tape.scale(gl, w.giou / l as f64);
        br.l1 = tape.value(l1).item();
        br.giou = tape.value(gl).item();
        total = add_opt(tape, total, l1)?;
        total = add_opt(tape, total, gl)?;

        if let (GroundTruthSet::Keyframe { actions, .. }, Some(logits)) = (gt, pred.action_logits) {
            if w.action > 0.0 {
                let c = tape.dims(logits)[1];
                let sel = tape.index_select(logits, 0, &pred_idx)?;
                let y = Tensor::new([m, c], pairs.iter().flat_map(|&(_, g)| actions[g].iter().map(|&a| if a { 1.0 } else { 0.0 })).collect())?;
                let b = bce_with_logits(tape, sel, y)?;
                let b = tape.sum(b);
                let b = tape.scale(b, w.action);
                br.action = tape.value(b).item();
                total = add_opt(tape, total, b)?;
            }
        }
    }
    let total = total.expect("classification term always present");
    br.total = tape.value(total).item();
    br.per_module.push(br.total);
    Ok((total, br))
}

/// Sum of [`set_loss`] over every module output (intermediate supervision).
pub fn training_loss(
    tape: &mut Tape,
    out: &DecoderOutput,
    gt: &GroundTruthSet,
    frame: (f64, f64),
    w: &LossWeights,
    focal: Focal,
) -> Result<(Var, LossBreakdown)> {
    let sigmas = training_matchings(tape, out, gt, frame, w, focal)?;
    training_loss_given(tape, out, gt, frame, w, focal, &sigmas)
}

/// One matching per module output.
pub fn training_matchings(tape: &Tape, out: &DecoderOutput, gt: &GroundTruthSet, frame: (f64, f64), w: &LossWeights, focal: Focal) -> Result<Vec<Assignment>> {
    out.modules.iter().map(|m| match_set(tape, &Predictions::from(m), gt, frame, w, focal)).collect()
}

/// [`training_loss`] with the matchings held fixed.
pub fn training_loss_given(
    tape: &mut Tape,
    out: &DecoderOutput,
    gt: &GroundTruthSet,
    frame: (f64, f64),
    w: &LossWeights,
    focal: Focal,
    sigmas: &[Assignment],
) -> Result<(Var, LossBreakdown)> {
    if sigmas.len() != out.modules.len() {
        return Err(Error::Shape(format!("{} matchings for {} module outputs", sigmas.len(), out.modules.len())));
    }
    let mut acc: Option<Var> = None;
    let mut br = LossBreakdown::default();
    for (m, sigma) in out.modules.iter().zip(sigmas) {
        let (l, b) = set_loss_given(tape, &Predictions::from(m), gt, frame, w, focal, sigma)?;
        br.absorb(&b);
        acc = add_opt(tape, acc, l)?;
    }
    let total = acc.ok_or_else(|| Error::Config("decoder produced no outputs".into()))?;
    Ok((total, br))
}
