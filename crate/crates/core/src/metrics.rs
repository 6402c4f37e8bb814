//! Box/mask/keypoint similarities and a single-threshold AP evaluator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{BoxXYXY, Point2, Polygon};
use crate::head::Task;
use crate::math;

/// Per-keypoint constant for synthetic data.
pub const OKS_KAPPA: f64 = 0.1;

/// Resolution used for mask IoU during evaluation.
pub const EVAL_MASK_RESOLUTION: usize = 128;

fn inter_union(a: &BoxXYXY, b: &BoxXYXY) -> (f64, f64) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Intersection over union; 0 when the union is empty.
pub fn box_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `IoU − |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let (inter, union) = inter_union(a, b);
    let c = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if union <= 0.0 || c <= 0.0 {
        return 0.0;
    }
    inter / union - (c - union) / c
}

/// Even-odd test on a raw vertex loop.
fn inside(v: &[Point2], p: Point2) -> bool {
    let n = v.len();
    let mut c = false;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if (a.y > p.y) != (b.y > p.y) && p.x < a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x) {
            c = !c;
        }
    }
    c
}

/// Mask IoU of two polygons rasterized on an `r×r` grid over their joint
/// bounding box (a cell counts when its centre is inside).
pub fn polygon_iou(a: &Polygon, b: &Polygon, r: usize) -> Result<f64> {
    vertex_iou(a.vertices(), b.vertices(), r)
}

/// [`polygon_iou`] on raw vertex loops, which may self-intersect.
pub fn vertex_iou(a: &[Point2], b: &[Point2], r: usize) -> Result<f64> {
    if r < 64 {
        return Err(Error::contract(format!("mask resolution {r} below 64")));
    }
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::degenerate("polygon with fewer than 3 vertices"));
    }
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in a.iter().chain(b) {
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    let (cw, ch) = ((x2 - x1) / r as f64, (y2 - y1) / r as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    if cw > 0.0 && ch > 0.0 {
        for i in 0..r {
            let y = y1 + (i as f64 + 0.5) * ch;
            for j in 0..r {
                let p = Point2::new(x1 + (j as f64 + 0.5) * cw, y);
                let (ia, ib) = (inside(a, p), inside(b, p));
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
        }
    }
    if union == 0 {
        return Err(Error::degenerate("polygon union has zero area"));
    }
    Ok(inter as f64 / union as f64)
}

/// Object keypoint similarity with a uniform `kappa`; `area` is the gt box area.
pub fn oks(pred: &[Point2], gt: &[(Point2, bool)], area: f64, kappa: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("{} predicted keypoints for {} gt", pred.len(), gt.len())));
    }
    let visible = gt.iter().filter(|g| g.1).count();
    if visible == 0 {
        return Err(Error::degenerate("no visible gt keypoints"));
    }
    let denom = 2.0 * area * kappa * kappa;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| g.1)
        .map(|(p, (q, _))| {
            let (dx, dy) = (p.x - q.x, p.y - q.y);
            math::exp(-(dx * dx + dy * dy) / denom)
        })
        .sum();
    Ok(s / visible as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredGeometry {
    None,
    Box(BoxXYXY),
    Contour(Vec<Point2>),
    Keypoints(Vec<Point2>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GtGeometry {
    Label,
    Box(BoxXYXY),
    Contour(Polygon),
    Keypoints { points: Vec<(Point2, bool)>, area: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene: usize,
    pub class: usize,
    pub geometry: GtGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scene: usize,
    pub class: usize,
    pub score: f64,
    pub geometry: PredGeometry,
    /// The gt this candidate was trained against, if any (index into the gt
    /// list); drives the mean-quality scores.
    pub assigned_gt: Option<usize>,
}

/// Similarity of a prediction to a gt of the same task: IoU, mask IoU or OKS.
pub fn similarity(p: &PredGeometry, g: &GtGeometry) -> f64 {
    match (p, g) {
        (PredGeometry::Box(a), GtGeometry::Box(b)) => box_iou(a, b),
        (PredGeometry::Contour(a), GtGeometry::Contour(b)) => {
            vertex_iou(a, b.vertices(), EVAL_MASK_RESOLUTION).unwrap_or(0.0)
        }
        (PredGeometry::Keypoints(a), GtGeometry::Keypoints { points, area }) => {
            oks(a, points, *area, OKS_KAPPA).unwrap_or(0.0)
        }
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRow {
    pub scene: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Matches at the first AP threshold.
    pub true_positives: usize,
    /// Mean similarity of assigned predictions in this scene.
    pub mean_quality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub top1: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_oks: Option<f64>,
    /// `None` when there is no gt to match.
    pub ap: Option<f64>,
    pub rows: Vec<SceneRow>,
}

/// Predictions in matching order: score descending, then a content key so
/// the order does not depend on how the list was passed in.
fn ranked(preds: &[Prediction]) -> Vec<usize> {
    let key = |p: &Prediction| -> Vec<u64> {
        let mut k = vec![p.scene as u64, p.class as u64];
        match &p.geometry {
            PredGeometry::None => {}
            PredGeometry::Box(b) => k.extend(b.to_array().iter().map(|v| v.to_bits())),
            PredGeometry::Contour(v) | PredGeometry::Keypoints(v) => {
                k.extend(v.iter().flat_map(|q| [q.x.to_bits(), q.y.to_bits()]))
            }
        }
        k
    };
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then_with(|| key(&preds[a]).cmp(&key(&preds[b])))
    });
    idx
}

/// All-point interpolated AP for one class, or `None` without gts.
fn class_ap(preds: &[Prediction], gts: &[GroundTruth], class: usize, threshold: f64, matched: &mut [bool]) -> Option<f64> {
    let n_gt = gts.iter().filter(|g| g.class == class).count();
    if n_gt == 0 {
        return None;
    }
    let mut hits = Vec::new();
    for i in ranked(preds) {
        let p = &preds[i];
        if p.class != class {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.class != class || g.scene != p.scene || matched[j] {
                continue;
            }
            let s = similarity(&p.geometry, &g.geometry);
            if s >= threshold && best.is_none_or(|b| s > b.1) {
                best = Some((j, s));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
        }
        hits.push(best.is_some());
    }
    Some(ap_from_hits(&hits, n_gt))
}

/// Area under the precision envelope for a ranked hit list.
pub fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last) * p;
        last = *r;
    }
    ap
}

/// Mean over classes (with gts) and thresholds of the per-class AP.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> Option<f64> {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    if classes.is_empty() || thresholds.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &t in thresholds {
        let mut matched = vec![false; gts.len()];
        for &c in &classes {
            sum += class_ap(preds, gts, c, t, &mut matched).expect("class has gts");
        }
    }
    Some(sum / (classes.len() * thresholds.len()) as f64)
}

/// Full report. Classification fills `top1` from assigned predictions;
/// instance tasks fill AP and the mean quality of assigned predictions
/// (`mean_iou` for boxes and masks, `mean_oks` for keypoints).
pub fn evaluate(task: Task, preds: &[Prediction], gts: &[GroundTruth], thresholds: &[f64]) -> Result<EvalReport> {
    if preds.iter().any(|p| p.assigned_gt.is_some_and(|j| j >= gts.len())) {
        return Err(Error::contract("prediction assigned to a missing gt"));
    }
    if preds.iter().any(|p| !(0.0..=1.0).contains(&p.score)) {
        return Err(Error::contract("prediction score outside [0, 1]"));
    }
    let assigned: Vec<(&Prediction, &GroundTruth)> = preds
        .iter()
        .filter_map(|p| p.assigned_gt.map(|j| (p, &gts[j])))
        .collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let scenes: BTreeSet<usize> = gts.iter().map(|g| g.scene).chain(preds.iter().map(|p| p.scene)).collect();
    let first = thresholds.first().copied().unwrap_or(0.5);
    let mut rows = Vec::new();
    for &s in &scenes {
        let sp: Vec<Prediction> = preds.iter().filter(|p| p.scene == s).cloned().collect();
        let sg: Vec<&GroundTruth> = gts.iter().filter(|g| g.scene == s).collect();
        let q: Vec<f64> = assigned
            .iter()
            .filter(|(p, _)| p.scene == s)
            .map(|(p, g)| quality(task, p, g))
            .collect();
        let tp = if task == Task::Classification {
            q.iter().filter(|&&v| v == 1.0).count()
        } else {
            let owned: Vec<GroundTruth> = sg.iter().map(|g| (*g).clone()).collect();
            let mut matched = vec![false; owned.len()];
            let classes: BTreeSet<usize> = owned.iter().map(|g| g.class).collect();
            for c in classes {
                class_ap(&sp, &owned, c, first, &mut matched);
            }
            matched.iter().filter(|&&m| m).count()
        };
        rows.push(SceneRow {
            scene: s,
            num_gt: sg.len(),
            num_pred: sp.len(),
            true_positives: tp,
            mean_quality: mean(&q),
        });
    }

    let q: Vec<f64> = assigned.iter().map(|(p, g)| quality(task, p, g)).collect();
    let mut report = EvalReport {
        task,
        top1: None,
        mean_iou: None,
        mean_oks: None,
        ap: None,
        rows,
    };
    match task {
        Task::Classification => report.top1 = mean(&q),
        Task::Detection | Task::Segmentation => {
            report.mean_iou = mean(&q);
            report.ap = average_precision(preds, gts, thresholds);
        }
        Task::Pose => {
            report.mean_oks = mean(&q);
            report.ap = average_precision(preds, gts, thresholds);
        }
    }
    Ok(report)
}

fn quality(task: Task, p: &Prediction, g: &GroundTruth) -> f64 {
    if task == Task::Classification {
        f64::from(u8::from(p.class == g.class))
    } else {
        similarity(&p.geometry, &g.geometry)
    }
}
