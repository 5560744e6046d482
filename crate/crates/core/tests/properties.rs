use proptest::prelude::*;

use stmixer::autograd::Tape;
use stmixer::criterion::{
    focal_loss, giou_loss, l1_box_loss, match_predictions, match_predictions_tiebreak, normalized_cxcywh, set_loss, Focal, GroundTruthSet,
    LossWeights, Predictions,
};
use stmixer::feature_space::FeatureSpace4D;
use stmixer::geometry::{generate_points, BoxXyxy, Mode, PositionalQuery};
use stmixer::rng::Rng;
use stmixer::tube::{frame_map, iou_3d, link_members, video_map, ActionTube, FrameBox, Tubelet};
use stmixer::Tensor;

const FRAME: (f64, f64) = (64.0, 48.0);

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.softmax(v);
    tape.value(s).clone()
}

fn random_box(rng: &mut Rng) -> BoxXyxy {
    let (w, h) = (rng.uniform_range(4.0, 30.0), rng.uniform_range(4.0, 24.0));
    let (x, y) = (rng.uniform_range(0.0, FRAME.0 - w), rng.uniform_range(0.0, FRAME.1 - h));
    [x, y, x + w, y + h]
}

fn brute_min(cost: &Tensor) -> f64 {
    let (n, k) = (cost.dims()[0], cost.dims()[1]);
    fn rec(c: &Tensor, n: usize, k: usize, g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if g == k {
            *best = best.min(acc);
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                rec(c, n, k, g + 1, used, acc + c.at(&[i, g]), best);
                used[i] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, k, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

fn injective(pred_to_gt: &[Option<usize>], k: usize) -> bool {
    let mut seen = vec![false; k];
    for g in pred_to_gt.iter().flatten() {
        if seen[*g] {
            return false;
        }
        seen[*g] = true;
    }
    seen.iter().all(|&s| s)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::stack(&perm.iter().map(|&i| t.select0(i)).collect::<Vec<_>>()).unwrap()
}

fn sizes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=6).prop_flat_map(|n| (Just(n), 0..=n))
}

// ---- numerics ----------------------------------------------------------

proptest! {
    #[test]
    fn softmax_rows_lie_on_the_simplex(rows in 1usize..5, width in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn([rows, width], |_| rng.normal() * scale);
        let p = softmax_rows(&x);
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_before_affine(rows in 1usize..4, width in 2usize..12, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn([rows, width], |_| shift + rng.normal() * 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full([width], 1.0));
        let b = tape.constant(Tensor::zeros([width]));
        let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
        let (x, y) = (tape.value(xv), tape.value(y));
        let stats = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / width as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64)
        };
        for r in 0..rows {
            let (_, v_in) = stats(x.row(r));
            let (mean, var) = stats(y.row(r));
            prop_assert!(mean.abs() <= 1e-9);
            // eps shrinks the output variance to v/(v+eps)
            prop_assert!((var - v_in / (v_in + 1e-5)).abs() < 1e-9, "var {} for input var {}", var, v_in);
            if v_in > 0.1 {
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn tape_ops_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = Rng::new(seed);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::from_fn([3, 5], |_| rng.normal()), true);
            let w = tape.leaf(Tensor::from_fn([5, 4], |_| rng.normal()), true);
            let h = tape.matmul(a, w).unwrap();
            let h = tape.relu(h);
            let s = tape.softmax(h);
            let l = tape.sum(s);
            let l = tape.ln(l);
            let grads = tape.backward(l);
            (tape.value(l).clone(), grads.get(a).cloned(), grads.get(w).cloned())
        };
        prop_assert_eq!(run(), run());
    }
}

// ---- piece replay ------------------------------------------------------

fn space(seed: u64) -> FeatureSpace4D {
    let mut rng = Rng::new(seed);
    FeatureSpace4D::new(Tensor::from_fn([4, 1, 4, 6, 8], |_| rng.normal()), 2).unwrap()
}

/// Sample at `x` while holding the pieces recorded at `base`.
fn replayed_read(sp: &FeatureSpace4D, base: [f64; 3], x: f64) -> (Vec<f64>, bool) {
    let layout = sp.layout(1);
    let mut rec = Tape::new();
    let s = rec.constant(sp.data.clone());
    let c = rec.constant(Tensor::new([1, 1, 1, 1, 3], base.to_vec()).unwrap());
    rec.sample(s, c, layout).unwrap();
    let mut tape = Tape::replaying(rec.branches());
    let s = tape.constant(sp.data.clone());
    let c = tape.constant(Tensor::new([1, 1, 1, 1, 3], vec![x, base[1], base[2]]).unwrap());
    let v = tape.sample(s, c, layout).unwrap();
    assert!(!tape.replay_diverged());
    (tape.value(v).data().to_vec(), tape.left_branch())
}

proptest! {
    #[test]
    fn replayed_pieces_extend_linearly_past_their_knots(
        seed in any::<u64>(),
        cell in 1usize..6,
        frac in 0.2f64..0.8,
        y in 4.0f64..20.0,
        z in 2.1f64..4.9,
        reach in prop::sample::select(vec![-3.0, -1.5, -0.6, 0.7, 1.6, 2.5]),
    ) {
        let sp = space(seed);
        // grid x of a pixel coordinate is x/4 - 0.5
        let px = |g: f64| (g + 0.5) * 4.0;
        let x0 = px(cell as f64 + frac);
        let base = [x0, y, z];
        // along one axis the held piece is affine: two reads inside the
        // cell fix it everywhere
        let (v0, off0) = replayed_read(&sp, base, x0);
        let (v1, _) = replayed_read(&sp, base, x0 + 0.4);
        prop_assert!(!off0);
        let target = x0 + reach * 4.0;
        let (vt, off) = replayed_read(&sp, base, target);
        let g = cell as f64 + frac + reach;
        prop_assert_eq!(off, g.floor() as i64 != cell as i64);
        for d in 0..v0.len() {
            let slope = (v1[d] - v0[d]) / 0.4;
            let lin = v0[d] + slope * (target - x0);
            prop_assert!((vt[d] - lin).abs() < 1e-9 * (1.0 + lin.abs()), "channel {}: {} vs {}", d, vt[d], lin);
        }
    }
}

// ---- feature space -----------------------------------------------------

proptest! {
    #[test]
    fn read_point_is_linear_in_features(
        s1 in any::<u64>(), s2 in any::<u64>(),
        a in -3.0f64..3.0, b in -3.0f64..3.0,
        x in -40.0f64..80.0, y in -40.0f64..70.0, z in 0.0f64..7.0,
    ) {
        let (p, q) = (space(s1), space(s2));
        let mix = Tensor::new(p.data.dims().to_vec(), p.data.data().iter().zip(q.data.data()).map(|(u, v)| a * u + b * v).collect()).unwrap();
        let m = FeatureSpace4D::new(mix, 2).unwrap();
        let (rp, rq, rm) = (p.read_point(0, x, y, z).unwrap(), q.read_point(0, x, y, z).unwrap(), m.read_point(0, x, y, z).unwrap());
        for d in 0..rm.len() {
            prop_assert!((rm[d] - (a * rp[d] + b * rq[d])).abs() < 1e-9);
        }
    }

    #[test]
    fn far_outside_reads_the_border(seed in any::<u64>(), dx in 50.0f64..1e6, y in 0.0f64..24.0, z in 2.0f64..5.0) {
        let sp = space(seed);
        let edge = sp.read_point(0, 30.0, y, z).unwrap();
        let far = sp.read_point(0, 30.0 + dx, y, z).unwrap();
        for (e, f) in edge.iter().zip(&far) {
            prop_assert!(f.is_finite());
            prop_assert!((e - f).abs() < 1e-12);
        }
    }
}

// ---- sampling geometry -------------------------------------------------

fn head(seed: u64, d: usize, p: usize, g: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let w = Tensor::from_fn([d, p * g * 3], |_| rng.normal() * 0.1);
    let b = Tensor::from_fn([p * g * 3], |_| rng.uniform_range(-0.5, 0.5));
    let q = Tensor::from_fn([2, d], |_| rng.normal());
    (q, w, b)
}

proptest! {
    #[test]
    fn points_follow_query_translation(seed in any::<u64>(), dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
        let (q, w, b) = head(seed, 6, 3, 2);
        let q = Tensor::new([1, 6], q.row(0).to_vec()).unwrap();
        let qp = PositionalQuery { x: 30.0, y: 20.0, z: 4.0, r: 0.3 };
        let moved = PositionalQuery { x: qp.x + dx, y: qp.y + dy, ..qp };
        let a = generate_points(&q, &[qp], &w, &b, 3, 2, Mode::Keyframe, 2).unwrap();
        let m = generate_points(&q, &[moved], &w, &b, 3, 2, Mode::Keyframe, 2).unwrap();
        for t in 0..2 { for p in 0..3 { for g in 0..2 {
            let (u, v) = (a.point(t, p, g), m.point(t, p, g));
            prop_assert!((v[0] - u[0] - dx).abs() < 1e-9);
            prop_assert!((v[1] - u[1] - dy).abs() < 1e-9);
            prop_assert_eq!(u[2], v[2]);
        }}}
    }

    #[test]
    fn wider_box_spreads_points_in_x(seed in any::<u64>()) {
        let (q, w, b) = head(seed, 6, 4, 1);
        let q = Tensor::new([1, 6], q.row(0).to_vec()).unwrap();
        let qp = PositionalQuery { x: 30.0, y: 20.0, z: 4.0, r: 0.0 };
        let wide = PositionalQuery { z: qp.z + 0.5, r: qp.r - 0.5, ..qp };
        prop_assert!((wide.width() - 2.0 * qp.width()).abs() < 1e-12);
        let a = generate_points(&q, &[qp], &w, &b, 4, 1, Mode::Keyframe, 1).unwrap();
        let m = generate_points(&q, &[wide], &w, &b, 4, 1, Mode::Keyframe, 1).unwrap();
        for p in 0..4 {
            let (u, v) = (a.point(0, p, 0), m.point(0, p, 0));
            prop_assert!((v[0] - qp.x - 2.0 * (u[0] - qp.x)).abs() < 1e-9);
            prop_assert!((v[1] - u[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn tubelet_frames_use_only_their_own_query(seed in any::<u64>(), dx in 1.0f64..10.0) {
        let (q, w, b) = head(seed, 6, 2, 2);
        let qp = PositionalQuery { x: 30.0, y: 20.0, z: 4.0, r: 0.0 };
        let a = generate_points(&q, &[qp, qp], &w, &b, 2, 2, Mode::Tubelet, 2).unwrap();
        let mut q2 = q.clone();
        for v in &mut q2.data_mut()[6..] {
            *v += dx;
        }
        let moved = PositionalQuery { x: qp.x + dx, ..qp };
        let m = generate_points(&q2, &[qp, moved], &w, &b, 2, 2, Mode::Tubelet, 2).unwrap();
        for p in 0..2 { for g in 0..2 {
            prop_assert_eq!(a.point(0, p, g), m.point(0, p, g));
        }}
    }
}

// ---- matching and losses -----------------------------------------------

proptest! {
    #[test]
    fn matching_reaches_the_exhaustive_minimum((n, k) in sizes(), seed in any::<u64>(), integer in any::<bool>()) {
        let mut rng = Rng::new(seed);
        // integer costs force many optimal ties
        let cost = Tensor::from_fn([n, k], |_| if integer { rng.below(3) as f64 } else { rng.uniform_range(-2.0, 5.0) });
        let a = match_predictions(&cost).unwrap();
        prop_assert!(injective(&a.pred_to_gt, k));
        prop_assert!((a.cost - brute_min(&cost)).abs() < 1e-9);
        let secondary = Tensor::from_fn([n, k], |_| rng.uniform());
        let b = match_predictions_tiebreak(&cost, &secondary).unwrap();
        prop_assert!(injective(&b.pred_to_gt, k));
        prop_assert!((b.cost - brute_min(&cost)).abs() < 1e-9);
    }

    #[test]
    fn tiebreak_matching_commutes_with_row_order((n, k) in sizes(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let cost = Tensor::from_fn([n, k], |_| rng.below(2) as f64);
        let secondary = Tensor::from_fn([n, k], |_| rng.uniform());
        let perm = rng.permutation(n);
        let a = match_predictions_tiebreak(&cost, &secondary).unwrap();
        let b = match_predictions_tiebreak(&permute_rows(&cost, &perm), &permute_rows(&secondary, &perm)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(b.pred_to_gt[new], a.pred_to_gt[old]);
        }
    }

    #[test]
    fn giou_and_focal_ranges(seed in any::<u64>(), c in 1usize..6, gamma in 0.0f64..4.0, alpha in 0.01f64..1.0) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let g = giou_loss(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&g));
        prop_assert_eq!(g, giou_loss(&b, &a).unwrap());
        let p = softmax_rows(&Tensor::from_fn([1, c + 1], |_| rng.normal() * 3.0));
        let focal = Focal { gamma, alpha };
        prop_assert!(focal_loss(p.row(0), rng.below(c + 1), focal).unwrap() >= 0.0);
    }
}

struct Keyframe {
    boxes: Tensor,
    human: Tensor,
    actions: Tensor,
}

fn keyframe_preds(rng: &mut Rng, n: usize, classes: usize) -> Keyframe {
    let rows: Vec<f64> = (0..n).flat_map(|_| random_box(rng)).collect();
    Keyframe {
        boxes: Tensor::new([n, 4], rows).unwrap(),
        human: Tensor::from_fn([n, 2], |_| rng.normal()),
        actions: Tensor::from_fn([n, classes], |_| rng.normal()),
    }
}

fn keyframe_loss(p: &Keyframe, gt: &GroundTruthSet) -> f64 {
    let mut tape = Tape::new();
    let pred = Predictions {
        boxes: tape.leaf(p.boxes.clone(), true),
        human_logits: Some(tape.leaf(p.human.clone(), true)),
        action_logits: Some(tape.leaf(p.actions.clone(), true)),
        class_logits: None,
    };
    let (l, _, _) = set_loss(&mut tape, &pred, gt, FRAME, &LossWeights::default_for(Mode::Keyframe), Focal::default()).unwrap();
    tape.value(l).item()
}

fn tubelet_loss(boxes: &Tensor, logits: &Tensor, gt: &GroundTruthSet) -> f64 {
    let mut tape = Tape::new();
    let pred = Predictions {
        boxes: tape.leaf(boxes.clone(), true),
        human_logits: None,
        action_logits: None,
        class_logits: Some(tape.leaf(logits.clone(), true)),
    };
    let (l, _, _) = set_loss(&mut tape, &pred, gt, FRAME, &LossWeights::default_for(Mode::Tubelet), Focal::default()).unwrap();
    tape.value(l).item()
}

fn keyframe_gt(rng: &mut Rng, k: usize, classes: usize) -> GroundTruthSet {
    GroundTruthSet::Keyframe {
        boxes: (0..k).map(|_| random_box(rng)).collect(),
        actions: (0..k).map(|_| (0..classes).map(|_| rng.uniform() < 0.4).collect()).collect(),
    }
}

proptest! {
    #[test]
    fn keyframe_loss_ignores_prediction_and_target_order((n, k) in sizes(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = keyframe_preds(&mut rng, n, 3);
        let gt = keyframe_gt(&mut rng, k, 3);
        let base = keyframe_loss(&p, &gt);
        let pp = rng.permutation(n);
        let moved = Keyframe { boxes: permute_rows(&p.boxes, &pp), human: permute_rows(&p.human, &pp), actions: permute_rows(&p.actions, &pp) };
        let gp = rng.permutation(k);
        let GroundTruthSet::Keyframe { boxes, actions } = &gt else { unreachable!() };
        let gt2 = GroundTruthSet::Keyframe { boxes: gp.iter().map(|&i| boxes[i]).collect(), actions: gp.iter().map(|&i| actions[i].clone()).collect() };
        let other = keyframe_loss(&moved, &gt2);
        prop_assert!((base - other).abs() < 1e-10, "{} vs {}", base, other);
    }

    #[test]
    fn tubelet_loss_ignores_prediction_and_target_order((n, k) in sizes(), seed in any::<u64>(), t in 1usize..4) {
        let mut rng = Rng::new(seed);
        let boxes = Tensor::new([n, t, 4], (0..n * t).flat_map(|_| random_box(&mut rng)).collect()).unwrap();
        let logits = Tensor::from_fn([n, 4], |_| rng.normal());
        let gt_boxes: Vec<Vec<BoxXyxy>> = (0..k).map(|_| (0..t).map(|_| random_box(&mut rng)).collect()).collect();
        let classes: Vec<usize> = (0..k).map(|_| rng.below(3)).collect();
        let gt = GroundTruthSet::Tubelet { boxes: gt_boxes.clone(), classes: classes.clone() };
        let base = tubelet_loss(&boxes, &logits, &gt);
        let pp = rng.permutation(n);
        let gp = rng.permutation(k);
        let gt2 = GroundTruthSet::Tubelet { boxes: gp.iter().map(|&i| gt_boxes[i].clone()).collect(), classes: gp.iter().map(|&i| classes[i]).collect() };
        let other = tubelet_loss(&permute_rows(&boxes, &pp), &permute_rows(&logits, &pp), &gt2);
        prop_assert!((base - other).abs() < 1e-10, "{} vs {}", base, other);
    }

    #[test]
    fn moving_the_matched_box_closer_lowers_the_loss(seed in any::<u64>(), step in 0.05f64..0.95) {
        let mut rng = Rng::new(seed);
        let p = keyframe_preds(&mut rng, 1, 2);
        let gt = keyframe_gt(&mut rng, 1, 2);
        let GroundTruthSet::Keyframe { boxes, .. } = &gt else { unreachable!() };
        let g = boxes[0];
        let far: BoxXyxy = p.boxes.row(0).try_into().unwrap();
        let near: BoxXyxy = std::array::from_fn(|i| far[i] + step * (g[i] - far[i]));
        let l1 = |b: &BoxXyxy| l1_box_loss(&normalized_cxcywh(b, FRAME), &normalized_cxcywh(&g, FRAME));
        let closer = l1(&near) < l1(&far) && giou_loss(&near, &g).unwrap() < giou_loss(&far, &g).unwrap();
        prop_assume!(closer);
        let moved = Keyframe { boxes: Tensor::new([1, 4], near.to_vec()).unwrap(), ..p };
        let p = Keyframe { boxes: Tensor::new([1, 4], far.to_vec()).unwrap(), human: moved.human.clone(), actions: moved.actions.clone() };
        prop_assert!(keyframe_loss(&moved, &gt) < keyframe_loss(&p, &gt));
    }
}

// ---- tubes and metrics -------------------------------------------------

fn random_tube(rng: &mut Rng, class: usize) -> ActionTube {
    let len = 1 + rng.below(6);
    let mut b = random_box(rng);
    let boxes = (0..len)
        .map(|_| {
            let dx = rng.uniform_range(-2.0, 2.0);
            b = [b[0] + dx, b[1], b[2] + dx, b[3]];
            b
        })
        .collect();
    ActionTube { video: String::new(), start: rng.below(5), boxes, class, score: rng.uniform() }
}

fn relabel<T: Clone>(items: &[T], perm: &[usize], class: impl Fn(&mut T) -> &mut usize) -> Vec<T> {
    items
        .iter()
        .cloned()
        .map(|mut t| {
            let c = class(&mut t);
            *c = perm[*c];
            t
        })
        .collect()
}

proptest! {
    #[test]
    fn iou_3d_is_a_symmetric_overlap(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random_tube(&mut rng, 0), random_tube(&mut rng, 0));
        let v = iou_3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou_3d(&b, &a));
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        if a.start != b.start || a.boxes != b.boxes {
            prop_assert!(v < 1.0);
        }
    }

    #[test]
    fn linking_partitions_the_tubelets(seed in any::<u64>(), count in 0usize..24, tau in 0.0f64..0.9) {
        let mut rng = Rng::new(seed);
        let items: Vec<Tubelet> = (0..count)
            .map(|_| {
                let b = random_box(&mut rng);
                let len = 1 + rng.below(3);
                Tubelet { video: ["a", "b"][rng.below(2)].into(), clip_start: rng.below(6), boxes: vec![b; len], class: rng.below(2), score: rng.uniform() }
            })
            .collect();
        let members = link_members(&items, tau).unwrap();
        let mut seen = vec![0usize; count];
        for tube in &members {
            prop_assert!(!tube.is_empty());
            for w in tube.windows(2) {
                prop_assert_eq!(items[w[1]].clip_start, items[w[0]].clip_start + 1);
            }
            for &i in tube {
                seen[i] += 1;
                prop_assert_eq!(items[i].class, items[tube[0]].class);
                prop_assert_eq!(&items[i].video, &items[tube[0]].video);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn map_ignores_class_names_and_falls_with_the_threshold(seed in any::<u64>(), lo in 0.05f64..0.5, gap in 0.0f64..0.45) {
        let mut rng = Rng::new(seed);
        let classes = 3;
        let gts: Vec<ActionTube> = (0..5).map(|_| { let c = rng.below(classes); random_tube(&mut rng, c) }).collect();
        let mut dets: Vec<ActionTube> = gts
            .iter()
            .map(|g| {
                let mut d = g.clone();
                for b in &mut d.boxes {
                    let j = rng.uniform_range(-4.0, 4.0);
                    *b = [b[0] + j, b[1], b[2] + j, b[3]];
                }
                d.score = rng.uniform();
                d
            })
            .collect();
        for _ in 0..4 {
            let c = rng.below(classes);
            dets.push(random_tube(&mut rng, c));
        }
        let perm = rng.permutation(classes);
        let v = video_map(&dets, &gts, lo);
        let relabelled = video_map(&relabel(&dets, &perm, |t| &mut t.class), &relabel(&gts, &perm, |t| &mut t.class), lo);
        prop_assert!((v - relabelled).abs() < 1e-12);
        prop_assert!(video_map(&dets, &gts, lo + gap) <= v + 1e-12);

        let fd: Vec<FrameBox> = dets.iter().flat_map(|t| FrameBox::from_tubelet(&Tubelet { video: t.video.clone(), clip_start: t.start, boxes: t.boxes.clone(), class: t.class, score: t.score })).collect();
        let fg: Vec<FrameBox> = gts.iter().flat_map(|t| FrameBox::from_tubelet(&Tubelet { video: t.video.clone(), clip_start: t.start, boxes: t.boxes.clone(), class: t.class, score: 1.0 })).collect();
        let f = frame_map(&fd, &fg, lo);
        prop_assert!((f - frame_map(&relabel(&fd, &perm, |b| &mut b.class), &relabel(&fg, &perm, |b| &mut b.class), lo)).abs() < 1e-12);
        prop_assert!(frame_map(&fd, &fg, lo + gap) <= f + 1e-12);
    }
}
