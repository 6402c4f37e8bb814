use proptest::prelude::*;
use unihead_core::geometry::{BoxXYXY, Point2, Polygon};
use unihead_core::head::Task;
use unihead_core::metrics::{
    ap_from_hits, average_precision, box_iou, evaluate, giou, oks, polygon_iou, GroundTruth, GtGeometry, PredGeometry,
    Prediction,
};

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Q(u128, u128);

impl Q {
    fn new(n: u128, d: u128) -> Q {
        let g = gcd(n, d).max(1);
        Q(n / g, d / g)
    }
    fn add(self, o: Q) -> Q {
        Q::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn mul(self, o: Q) -> Q {
        Q::new(self.0 * o.0, self.1 * o.1)
    }
    fn ge(self, o: Q) -> bool {
        self.0 * o.1 >= o.0 * self.1
    }
    fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// AP by enumerating every cutoff of the ranked list in exact arithmetic:
/// each recall step is weighted by the best precision at any cutoff with at
/// least that recall.
fn brute_force_ap(hits: &[bool], n_gt: u128) -> Q {
    let cut: Vec<(Q, Q)> = (1..=hits.len())
        .map(|k| {
            let tp = hits[..k].iter().filter(|&&h| h).count() as u128;
            (Q::new(tp, k as u128), Q::new(tp, n_gt))
        })
        .collect();
    let mut ap = Q(0, 1);
    let mut prev = Q(0, 1);
    for &(_, r) in &cut {
        if r == prev {
            continue;
        }
        let best = cut
            .iter()
            .filter(|(_, r2)| r2.ge(r))
            .map(|(p, _)| *p)
            .fold(Q(0, 1), |a, p| if p.ge(a) { p } else { a });
        ap = ap.add(Q::new(r.0 * prev.1 - prev.0 * r.1, r.1 * prev.1).mul(best));
        prev = r;
    }
    ap
}

fn close_ulps(a: f64, b: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs())
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
    BoxXYXY::new(x1, y1, x2, y2).unwrap()
}

fn gt_box(scene: usize, b: BoxXYXY) -> GroundTruth {
    GroundTruth {
        scene,
        class: 0,
        geometry: GtGeometry::Box(b),
    }
}

fn pred_box(scene: usize, score: f64, b: BoxXYXY) -> Prediction {
    Prediction {
        scene,
        class: 0,
        score,
        geometry: PredGeometry::Box(b),
        assigned_gt: None,
    }
}

#[test]
fn three_gt_four_prediction_fixture_matches_brute_force() {
    let gts = vec![
        gt_box(0, bx(0.0, 0.0, 10.0, 10.0)),
        gt_box(0, bx(20.0, 0.0, 30.0, 10.0)),
        gt_box(0, bx(0.0, 20.0, 10.0, 30.0)),
    ];
    let preds = vec![
        pred_box(0, 0.9, bx(0.0, 0.0, 10.0, 9.0)),     // hit gt 0
        pred_box(0, 0.8, bx(40.0, 40.0, 50.0, 50.0)),  // miss
        pred_box(0, 0.7, bx(21.0, 0.0, 30.0, 10.0)),   // hit gt 1
        pred_box(0, 0.6, bx(0.0, 0.0, 10.0, 10.0)),    // duplicate of gt 0
    ];
    let oracle = brute_force_ap(&[true, false, true, false], 3);
    assert_eq!(oracle, Q(5, 9));
    let ap = average_precision(&preds, &gts, &[0.5]).unwrap();
    assert!(close_ulps(ap, oracle.f()), "{ap} vs {}", oracle.f());
}

#[test]
fn empty_gt_flags_ap_undefined_and_no_predictions_score_zero() {
    let r = evaluate(Task::Detection, &[pred_box(0, 0.5, bx(0.0, 0.0, 1.0, 1.0))], &[], &[0.5]).unwrap();
    assert_eq!(r.ap, None);
    let r = evaluate(Task::Detection, &[], &[gt_box(0, bx(0.0, 0.0, 1.0, 1.0))], &[0.5]).unwrap();
    assert_eq!(r.ap, Some(0.0));
}

fn arb_box() -> impl Strategy<Value = BoxXYXY> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
}

fn star_polygon(c: (f64, f64), radii: &[f64], phase: f64) -> Polygon {
    let n = radii.len();
    Polygon::new(
        radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let t = phase + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Point2::new(c.0 + r * t.cos(), c.1 + r * t.sin())
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_from_hits_matches_brute_force(hits in prop::collection::vec(any::<bool>(), 1..12), extra in 0usize..4) {
        let tp = hits.iter().filter(|&&h| h).count();
        let n_gt = (tp + extra).max(1);
        let oracle = brute_force_ap(&hits, n_gt as u128);
        prop_assert!(close_ulps(ap_from_hits(&hits, n_gt), oracle.f()) || oracle.0 == 0 && ap_from_hits(&hits, n_gt) == 0.0);
    }

    #[test]
    fn box_iou_symmetric_and_scale_invariant(a in arb_box(), b in arb_box(), e in -4i32..5, f in 0.25..4.0f64) {
        prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        prop_assert_eq!(giou(&a, &b), giou(&b, &a));
        let s = 2f64.powi(e);
        prop_assert_eq!(box_iou(&a.scaled(s), &b.scaled(s)), box_iou(&a, &b));
        prop_assert!((box_iou(&a.scaled(f), &b.scaled(f)) - box_iou(&a, &b)).abs() < 1e-12);
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((-1.0..=1.0).contains(&giou(&a, &b)));
    }

    #[test]
    fn polygon_iou_converges_with_resolution(
        ra in prop::collection::vec(2.0..6.0f64, 5..9),
        rb in prop::collection::vec(2.0..6.0f64, 5..9),
        dx in -4.0..4.0f64,
        dy in -4.0..4.0f64,
        phase in 0.0..1.0f64,
    ) {
        let a = star_polygon((0.0, 0.0), &ra, 0.0);
        let b = star_polygon((dx, dy), &rb, phase);
        let lo = polygon_iou(&a, &b, 256).unwrap();
        let hi = polygon_iou(&a, &b, 512).unwrap();
        prop_assert!((lo - hi).abs() < 0.02, "{} vs {}", lo, hi);
        prop_assert!((polygon_iou(&b, &a, 256).unwrap() - lo).abs() < 1e-12);
    }

    #[test]
    fn oks_monotone_in_distance(
        pts in prop::collection::vec((0.0..20.0f64, 0.0..20.0f64, any::<bool>()), 1..8),
        which in 0usize..8,
        d1 in 0.0..10.0f64,
        extra in 0.0..10.0f64,
        dir in 0.0..6.28f64,
        area in 10.0..500.0f64,
    ) {
        let mut gt: Vec<(Point2, bool)> = pts.iter().map(|&(x, y, v)| (Point2::new(x, y), v)).collect();
        let i = which % gt.len();
        gt[i].1 = true;
        let at = |d: f64| -> Vec<Point2> {
            gt.iter().enumerate().map(|(j, &(p, _))| if j == i { Point2::new(p.x + d * dir.cos(), p.y + d * dir.sin()) } else { p }).collect()
        };
        let near = oks(&at(d1), &gt, area, 0.1).unwrap();
        let far = oks(&at(d1 + extra), &gt, area, 0.1).unwrap();
        prop_assert!(far <= near);
        prop_assert!((0.0..=1.0).contains(&far));

        // corrupting invisible keypoints changes nothing
        let mut bad = at(d1);
        for (j, g) in gt.iter().enumerate() {
            if !g.1 {
                bad[j] = Point2::new(1e3, -1e3);
            }
        }
        prop_assert_eq!(oks(&bad, &gt, area, 0.1).unwrap(), near);
    }

    #[test]
    fn evaluation_is_input_order_invariant(
        boxes in prop::collection::vec((arb_box(), 0usize..3, 0usize..2), 1..10),
        gts in prop::collection::vec((arb_box(), 0usize..2), 1..5),
        perm_seed in any::<u64>(),
    ) {
        // coarse scores force ties
        let preds: Vec<Prediction> = boxes.iter().map(|&(b, s, scene)| pred_box(scene, 0.25 * (s + 1) as f64, b)).collect();
        let gts: Vec<GroundTruth> = gts.iter().map(|&(b, scene)| gt_box(scene, b)).collect();
        let base = evaluate(Task::Detection, &preds, &gts, &[0.1, 0.5]).unwrap();
        let mut shuffled = preds.clone();
        let mut state = perm_seed | 1;
        for i in (1..shuffled.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            shuffled.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(evaluate(Task::Detection, &shuffled, &gts, &[0.1, 0.5]).unwrap(), base);
    }
}
