//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 2 5`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unihead_cli::config::{HeadOverrides, OptimizerConfig, RunConfig};
use unihead_cli::dataset::write_dataset;
use unihead_cli::run::{run_gradcheck, run_train};
use unihead_core::autodiff::{Graph, Init, ParameterStore};
use unihead_core::encoder::{attach_task_token, declare_encoder, encode, EncoderConfig, TokenKind};
use unihead_core::geometry::{contour_targets, resample_contour, AnchorContext, BoxXYXY, Point2, Polygon};
use unihead_core::head::{self, Candidates, HeadConfig, Task};
use unihead_core::metrics::{average_precision, box_iou, oks, polygon_iou, GroundTruth, GtGeometry, PredGeometry, Prediction};
use unihead_core::synth::{generate_dataset, DatasetSpec};
use unihead_core::train::{train, TrainConfig};
use unihead_core::Tensor;

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-3;
const GRAD_MIN_COORDS: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const INIT_TOL: f64 = 1e-9;
const EQUIV_TOL: f64 = 1e-9;
const EQUIV_DRAWS: u64 = 100;
const CONTOUR_POLYGONS: usize = 1000;
const BOUNDARY_TOL: f64 = 1e-9;
const POLY_IOU_TOL: f64 = 0.01;
const OKS_TOL: f64 = 1e-12;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_BAND: f64 = 0.02;

// Desk-scale overfit protocol shared by criteria 6 and 7.
const SCENES: usize = 32;
const EPOCHS: u64 = 500;
const DATA_SEED: u64 = 1;
const RUN_SEED: u64 = 0;
const LR: f64 = 1e-3;
/// Keypoint regression keeps improving after the first decay at 1e-3.
const POSE_LR: f64 = 2e-3;
const WIDTH: usize = 32;
const CHANNELS: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_gradcheck() -> Outcome {
    let t = Instant::now();
    let res = match run_gradcheck(0) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let secs = t.elapsed();
    let mut pass = secs < GRAD_BUDGET;
    let mut parts = Vec::new();
    for o in &res {
        let ok = o.report.max_rel_error < GRAD_TOL && o.report.checked >= GRAD_MIN_COORDS;
        pass &= ok;
        parts.push(format!("{} {:.2e}/{}", o.task.name(), o.report.max_rel_error, o.report.checked));
    }
    outcome(pass, format!("{} in {:.1}s", parts.join(", "), secs.as_secs_f64()))
}

fn single(anchor: Point2, s: f64) -> Candidates {
    Candidates {
        contexts: vec![AnchorContext::new(anchor, (s, s), vec![anchor]).unwrap()],
        image_index: vec![0],
    }
}

fn init_points(task: Task, anchor: Point2, s: f64) -> Vec<Point2> {
    let cfg = HeadConfig::new(task, 4);
    let store = head::declare_head(&cfg, None).unwrap();
    assert!(store.get("offset.fc2.w").unwrap().data().iter().all(|&v| v == 0.0));
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 64, 64, 3], 0.5));
    let n = head::forward(&mut g, &store, &cfg, x, &single(anchor, s)).unwrap();
    g.value(n.points).data().chunks(2).map(|c| Point2::new(c[0], c[1])).collect()
}

fn c2_init_geometry() -> Outcome {
    let (a, s) = (Point2::new(8.0, 8.0), 4.0);
    let det = init_points(Task::Detection, a, s);
    let quoted = [(-0.5, 0.0), (0.5, 0.0), (0.0, -0.5), (0.0, 0.5)];
    let det_ok = det.len() == 16
        && det.iter().enumerate().all(|(i, p)| {
            let (bx, by) = quoted[i / 4];
            *p == Point2::new(a.x + bx * s, a.y + by * s)
        });

    let k = 36;
    let seg = init_points(Task::Segmentation, a, s);
    let h = s / 2.0;
    // arc-length position along the box perimeter, clockwise from (a.x + h, a.y)
    let arc = |p: &Point2| -> Option<f64> {
        let (x, y) = (p.x - a.x, p.y - a.y);
        if (x - h).abs() < INIT_TOL && y >= -INIT_TOL {
            Some(y)
        } else if (y - h).abs() < INIT_TOL {
            Some(h + (h - x))
        } else if (x + h).abs() < INIT_TOL {
            Some(h + s + (h - y))
        } else if (y + h).abs() < INIT_TOL {
            Some(h + 2.0 * s + (x + h))
        } else if (x - h).abs() < INIT_TOL {
            Some(h + 3.0 * s + (y + h))
        } else {
            None
        }
    };
    let step = 4.0 * s / k as f64;
    let mut worst: f64 = 0.0;
    let mut on_perimeter = true;
    for (i, p) in seg.iter().enumerate() {
        match arc(p) {
            Some(t) => worst = worst.max((t - i as f64 * step).abs()),
            None => on_perimeter = false,
        }
    }
    let area: f64 = (0..k).map(|i| {
        let (p, q) = (seg[i], seg[(i + 1) % k]);
        p.x * q.y - q.x * p.y
    }).sum();
    let seg_ok = seg.len() == k && on_perimeter && worst < INIT_TOL && area > 0.0;
    outcome(
        det_ok && seg_ok,
        format!("detection groups exact: {det_ok}; segmentation on perimeter: {on_perimeter}, spacing error {worst:.1e}, clockwise: {}", area > 0.0),
    )
}

fn c3_equivariance() -> Outcome {
    let cfg = EncoderConfig {
        layers: 2,
        width: 16,
        heads: 4,
        mlp_ratio: 2,
    };
    let (k, d) = (9, cfg.width);
    let mut worst: f64 = 0.0;
    for draw in 0..EQUIV_DRAWS {
        let mut store = ParameterStore::new();
        declare_encoder(&mut store, "enc", &cfg, draw).unwrap();
        store.declare("token.cls", &[d], Init::Zero).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let paths: Vec<String> = store.paths().map(String::from).collect();
        for p in paths {
            store.value_mut(&p).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        let x: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut px = vec![0.0; k * d];
        for (dst, &src) in perm.iter().enumerate() {
            px[dst * d..(dst + 1) * d].copy_from_slice(&x[src * d..(src + 1) * d]);
        }
        let run = |tokens: Vec<f64>| {
            let mut g = Graph::new();
            let f = g.input(Tensor::new(&[1, k, d], tokens).unwrap());
            let z = attach_task_token(&mut g, &store, f, TokenKind::Class).unwrap();
            let out = encode(&mut g, &store, z, &cfg, "enc").unwrap();
            g.value(out).data().to_vec()
        };
        let (a, b) = (run(x), run(px));
        for c in 0..d {
            worst = worst.max((a[c] - b[c]).abs());
        }
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                worst = worst.max((a[(1 + src) * d + c] - b[(1 + dst) * d + c]).abs());
            }
        }
    }
    outcome(worst < EQUIV_TOL, format!("max deviation {worst:.1e} over {EQUIV_DRAWS} draws"))
}

fn random_polygon(rng: &mut ChaCha8Rng) -> Polygon {
    let n = rng.random_range(3..40);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    while angles.len() < 3 {
        angles.push(angles.last().unwrap() + 1.0);
    }
    let c = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
    let pts = angles
        .iter()
        .map(|t| {
            let r = rng.random_range(1.0..8.0);
            Point2::new(c.0 + r * t.cos(), c.1 + r * t.sin())
        })
        .collect();
    Polygon::new(pts).unwrap()
}

fn seg_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.x - a.x - t * dx).powi(2) + (p.y - a.y - t * dy).powi(2)).sqrt()
}

fn c4_contours() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut count_ok, mut subset_ok, mut boundary_ok, mut cyclic_ok) = (true, true, true, true);
    let (mut n_del, mut n_ins) = (0, 0);
    for _ in 0..CONTOUR_POLYGONS {
        let poly = random_polygon(&mut rng);
        let v = poly.vertices().to_vec();
        let k = rng.random_range(3..48);
        let out = match resample_contour(&poly, k) {
            Ok(p) => p,
            Err(_) => {
                count_ok = false;
                continue;
            }
        };
        count_ok &= out.vertices().len() == k;
        if k < v.len() {
            n_del += 1;
            subset_ok &= out.vertices().iter().all(|p| v.contains(p));
        } else if k > v.len() {
            n_ins += 1;
            boundary_ok &= out.vertices().iter().all(|p| {
                (0..v.len()).map(|i| seg_dist(*p, v[i], v[(i + 1) % v.len()])).fold(f64::INFINITY, f64::min) < BOUNDARY_TOL
            });
        }
        let anchor = poly.centroid();
        let shift = rng.random_range(0..v.len());
        let mut rolled = v.clone();
        rolled.rotate_left(shift);
        let a = contour_targets(&poly, k, anchor).unwrap().into_points();
        let b = contour_targets(&Polygon::new(rolled).unwrap(), k, anchor).unwrap().into_points();
        cyclic_ok &= a.iter().zip(&b).all(|(p, q)| p.dist(*q) < BOUNDARY_TOL);
    }
    outcome(
        count_ok && subset_ok && boundary_ok && cyclic_ok,
        format!(
            "count {count_ok}, subset {subset_ok} ({n_del}), boundary {boundary_ok} ({n_ins}), cyclic {cyclic_ok} over {CONTOUR_POLYGONS}"
        ),
    )
}

/// Exact AP by enumerating every cutoff, as a reduced fraction.
fn brute_force_ap(hits: &[bool], n_gt: u128) -> (u128, u128) {
    fn gcd(a: u128, b: u128) -> u128 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let red = |n: u128, d: u128| {
        let g = gcd(n, d).max(1);
        (n / g, d / g)
    };
    let cut: Vec<((u128, u128), (u128, u128))> = (1..=hits.len())
        .map(|k| {
            let tp = hits[..k].iter().filter(|&&h| h).count() as u128;
            (red(tp, k as u128), red(tp, n_gt))
        })
        .collect();
    let ge = |a: (u128, u128), b: (u128, u128)| a.0 * b.1 >= b.0 * a.1;
    let (mut ap, mut prev) = ((0u128, 1u128), (0u128, 1u128));
    for &(_, r) in &cut {
        if r == prev {
            continue;
        }
        let best = cut
            .iter()
            .filter(|(_, r2)| ge(*r2, r))
            .map(|(p, _)| *p)
            .fold((0, 1), |a, p| if ge(p, a) { p } else { a });
        let dr = red(r.0 * prev.1 - prev.0 * r.1, r.1 * prev.1);
        let term = red(dr.0 * best.0, dr.1 * best.1);
        ap = red(ap.0 * term.1 + term.0 * ap.1, ap.1 * term.1);
        prev = r;
    }
    ap
}

fn c5_metrics() -> Outcome {
    let a = BoxXYXY::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let b = BoxXYXY::new(0.5, 0.0, 1.5, 1.0).unwrap();
    let iou = box_iou(&a, &b);
    let iou_ok = iou == 1.0 / 3.0;

    let sq = |x: f64| {
        Polygon::new(vec![
            Point2::new(x, 0.0),
            Point2::new(x + 1.0, 0.0),
            Point2::new(x + 1.0, 1.0),
            Point2::new(x, 1.0),
        ])
        .unwrap()
    };
    let piou = polygon_iou(&sq(0.0), &sq(0.5), 512).unwrap();
    let piou_ok = (piou - 1.0 / 3.0).abs() <= POLY_IOU_TOL;

    let (s, kappa): (f64, f64) = (50.0, 0.1);
    let d = (2.0 * s * kappa * kappa).sqrt();
    let gt = [(Point2::new(3.0, 4.0), true)];
    let o = oks(&[Point2::new(3.0 + d, 4.0)], &gt, s, kappa).unwrap();
    let oks_ok = (o - (-1.0f64).exp()).abs() < OKS_TOL;

    let gbox = |x1, y1, x2, y2| BoxXYXY::new(x1, y1, x2, y2).unwrap();
    let gts: Vec<GroundTruth> = [gbox(0.0, 0.0, 10.0, 10.0), gbox(20.0, 0.0, 30.0, 10.0), gbox(0.0, 20.0, 10.0, 30.0)]
        .into_iter()
        .map(|b| GroundTruth {
            scene: 0,
            class: 0,
            geometry: GtGeometry::Box(b),
        })
        .collect();
    let preds: Vec<Prediction> = [
        (0.9, gbox(0.0, 0.0, 10.0, 9.0)),
        (0.8, gbox(40.0, 40.0, 50.0, 50.0)),
        (0.7, gbox(21.0, 0.0, 30.0, 10.0)),
        (0.6, gbox(0.0, 0.0, 10.0, 10.0)),
    ]
    .into_iter()
    .map(|(score, b)| Prediction {
        scene: 0,
        class: 0,
        score,
        geometry: PredGeometry::Box(b),
        assigned_gt: None,
    })
    .collect();
    let ap = average_precision(&preds, &gts, &[0.5]).unwrap();
    let (num, den) = brute_force_ap(&[true, false, true, false], 3);
    let want = num as f64 / den as f64;
    // exact as a rational; the float may differ by rounding of the division only
    let ap_ok = (ap - want).abs() <= 2.0 * f64::EPSILON;
    outcome(
        iou_ok && piou_ok && oks_ok && ap_ok,
        format!("box IoU {iou}, polygon IoU@512 {piou:.4}, OKS {o:.15}, AP {ap} vs oracle {num}/{den}"),
    )
}

fn overfit_config(task: Task) -> TrainConfig {
    let mut cfg = TrainConfig::new(task, 4, EPOCHS);
    cfg.optimizer.lr = if task == Task::Pose { POSE_LR } else { LR };
    cfg.head.width = WIDTH;
    cfg.head.offset_hidden = WIDTH;
    cfg.head.channels = CHANNELS;
    cfg.head.seed = RUN_SEED;
    cfg
}

fn dataset(task: Task) -> Vec<unihead_core::synth::Scene> {
    let spec = if task == Task::Classification {
        DatasetSpec::classification(SCENES, DATA_SEED)
    } else {
        DatasetSpec::instances(SCENES, DATA_SEED)
    };
    generate_dataset(&spec).unwrap()
}

struct Overfit {
    report: unihead_core::metrics::EvalReport,
    secs: f64,
}

fn overfit(cfg: TrainConfig) -> Result<Overfit, String> {
    let task = cfg.head.task;
    let t = Instant::now();
    let out = train(cfg, &dataset(task)).map_err(|e| e.to_string())?;
    Ok(Overfit {
        report: out.report,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn c6_overfit(det: &Result<Overfit, String>) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let budget = OVERFIT_BUDGET.as_secs_f64();
    for task in [Task::Classification, Task::Detection, Task::Segmentation, Task::Pose] {
        let run = if task == Task::Detection {
            det.as_ref().map_err(Clone::clone).map(|o| Overfit {
                report: o.report.clone(),
                secs: o.secs,
            })
        } else {
            overfit(overfit_config(task))
        };
        let o = match run {
            Ok(o) => o,
            Err(e) => {
                pass = false;
                parts.push(format!("{}: error {e}", task.name()));
                continue;
            }
        };
        let r = &o.report;
        let (ok, msg) = match task {
            Task::Classification => {
                let t1 = r.top1.unwrap_or(0.0);
                (t1 == 1.0, format!("top1 {t1:.3}"))
            }
            Task::Detection => {
                let (iou, ap) = (r.mean_iou.unwrap_or(0.0), r.ap.unwrap_or(0.0));
                (iou >= 0.8 && ap >= 0.9, format!("IoU {iou:.3} AP50 {ap:.3}"))
            }
            Task::Segmentation => {
                let iou = r.mean_iou.unwrap_or(0.0);
                (iou >= 0.6, format!("mask IoU {iou:.3}"))
            }
            Task::Pose => {
                let v = r.mean_oks.unwrap_or(0.0);
                (v >= 0.85, format!("OKS {v:.3}"))
            }
        };
        let in_time = o.secs < budget;
        pass &= ok && in_time;
        parts.push(format!("{} {msg} ({:.0}s)", task.name(), o.secs));
    }
    outcome(pass, parts.join("; "))
}

fn c7_ablation(base: &Result<Overfit, String>) -> Outcome {
    let ap = |r: &Result<Overfit, String>| r.as_ref().ok().and_then(|o| o.report.ap);
    let k8 = overfit({
        let mut c = overfit_config(Task::Detection);
        c.head.k = 8;
        c
    });
    let l1 = overfit({
        let mut c = overfit_config(Task::Detection);
        c.head.l_loc = 1;
        c
    });
    match (ap(base), ap(&k8), ap(&l1)) {
        (Some(b), Some(k), Some(l)) => outcome(
            b >= k - ABLATION_BAND && b >= l - ABLATION_BAND,
            format!("AP50 K=16/L=3 {b:.3}, K=8 {k:.3}, L_loc=1 {l:.3}"),
        ),
        _ => outcome(false, "a detection run failed"),
    }
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    write_dataset(&generate_dataset(&DatasetSpec::instances(6, 11)).unwrap(), &data).unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let cfg = RunConfig {
            task: Some("det".into()),
            epochs: 15,
            seed: 3,
            dataset: Some(data.clone()),
            output: Some(dir.path().join(format!("run{run}"))),
            head: HeadOverrides {
                width: Some(16),
                channels: Some(8),
                offset_hidden: Some(16),
                ..HeadOverrides::default()
            },
            optimizer: OptimizerConfig {
                lr: LR,
                ..OptimizerConfig::default()
            },
            ..RunConfig::default()
        };
        if let Err(e) = run_train(&cfg, None) {
            return outcome(false, format!("error: {e}"));
        }
        let out = cfg.output.unwrap();
        let read = |n: &str| std::fs::read(out.join(n)).unwrap();
        files.push((read("loss_curve.csv"), read("report.json"), read("report.csv")));
    }
    let same = files[0] == files[1];
    outcome(same, format!("loss curve and reports byte-identical: {same}"))
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("{} [{n}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    if on(1) {
        report(1, "gradient oracle", c1_gradcheck());
    }
    if on(2) {
        report(2, "initialization geometry", c2_init_geometry());
    }
    if on(3) {
        report(3, "encoder equivariance", c3_equivariance());
    }
    if on(4) {
        report(4, "contour machinery", c4_contours());
    }
    if on(5) {
        report(5, "metric oracles", c5_metrics());
    }
    let det = (on(6) || on(7)).then(|| overfit(overfit_config(Task::Detection)));
    if on(6) {
        report(6, "overfit experiments", c6_overfit(det.as_ref().unwrap()));
    }
    if on(7) {
        report(7, "ablation direction", c7_ablation(det.as_ref().unwrap()));
    }
    if on(8) {
        report(8, "determinism", c8_determinism());
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
