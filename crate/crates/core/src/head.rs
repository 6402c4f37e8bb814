//! The head itself: stem backbone, offset generation, point features, the
//! classification and localization encoder branches, and per-task losses.
//!
//! Everything is batched over candidates. A forward pass takes `[b,h,w,c]`
//! images, one [`AnchorContext`] per candidate and the image each candidate
//! belongs to; geometry is in feature-map cells (pixels / [`STRIDE`]).
//!
//! Parameter paths:
//!
//! | path | shape | init |
//! |---|---|---|
//! | `stem.conv{1,2}.w` / `.b` | `[3,3,cin,c]` / `[c]` | uniform / zero |
//! | `offset.fc1.w` / `.b` | `[c,hidden]` / `[hidden]` | uniform / zero |
//! | `offset.fc2.w` / `.b` | `[hidden,2k]` / `[2k]` | zero / bias table |
//! | `point_proj.w` / `.b` | `[c,d]` / `[d]` | uniform / zero |
//! | `token.{cls,iou,vis}` | `[d]` | uniform ±0.1 |
//! | `enc_cls.*`, `enc_loc.*` | see [`encoder`] | |
//! | `cls_head.w` / `.b` | `[d,classes]` | uniform / zero |
//! | `iou_head.w` / `.b` | `[d,1]` | uniform / zero |
//! | `refine.w` / `.b` | `[d,2]` / `[2]` | zero |
//! | `vis_head.point_w`, `vis_head.token_w`, `vis_head.b` | `[d,1]`, `[d,1]`, `[1]` | uniform, uniform, zero |

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Init, NodeId, ParameterStore};
use crate::encoder::{self, attach_task_token, declare_dense, declare_encoder, dense, EncoderConfig, TokenKind};
use crate::error::{Error, Result};
use crate::geometry::{initial_bias_table, AnchorContext, BoxXYXY, Point2, PointSet};
use crate::math;
use crate::metrics::box_iou;
use crate::tensor::Tensor;

/// Total backbone stride.
pub const STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Classification,
    Detection,
    Segmentation,
    Pose,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "cls",
            Task::Detection => "det",
            Task::Segmentation => "segm",
            Task::Pose => "pose",
        }
    }

    /// Default number of dispersible points.
    pub fn default_k(self) -> usize {
        match self {
            Task::Classification | Task::Detection => 16,
            Task::Segmentation => 36,
            Task::Pose => 17,
        }
    }
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Task::Classification),
            "det" | "detection" => Ok(Task::Detection),
            "segm" | "segmentation" => Ok(Task::Segmentation),
            "pose" => Ok(Task::Pose),
            _ => Err(Error::config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetLoss {
    L1,
    Giou,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub task: Task,
    /// Number of dispersible points `K`.
    pub k: usize,
    pub l_cls: usize,
    pub l_loc: usize,
    /// Input image channels.
    pub in_channels: usize,
    /// Backbone output channels `C`.
    pub channels: usize,
    /// Encoder width `d`.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the offset generator.
    pub offset_hidden: usize,
    /// Foreground classes; instance tasks add one background logit.
    pub num_classes: usize,
    /// When off, task-level outputs read the mean of the point tokens.
    pub task_token: bool,
    pub det_loss: DetLoss,
    pub seed: u64,
}

impl HeadConfig {
    pub fn new(task: Task, num_classes: usize) -> Self {
        HeadConfig {
            task,
            k: task.default_k(),
            l_cls: 2,
            l_loc: 3,
            in_channels: 3,
            channels: 32,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            offset_hidden: 64,
            num_classes,
            task_token: true,
            det_loss: DetLoss::L1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.num_classes == 0 || self.channels == 0 || self.in_channels == 0 || self.offset_hidden == 0 {
            return Err(Error::config("k, classes, channels and offset_hidden must be positive"));
        }
        if self.task == Task::Detection && self.k % 4 != 0 {
            return Err(Error::config(format!("detection needs K divisible by 4, got {}", self.k)));
        }
        if self.task == Task::Segmentation && self.k < 3 {
            return Err(Error::config("segmentation needs K >= 3"));
        }
        self.encoder(0).validate()
    }

    pub fn encoder(&self, layers: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Width of the class logits.
    pub fn num_logits(&self) -> usize {
        match self.task {
            Task::Classification => self.num_classes,
            _ => self.num_classes + 1,
        }
    }

    /// Index of the background logit for instance tasks.
    pub fn background(&self) -> Option<usize> {
        (self.task != Task::Classification).then_some(self.num_classes)
    }

    fn loc_token(&self) -> TokenKind {
        match (self.task, self.task_token) {
            (_, false) | (Task::Classification | Task::Segmentation, _) => TokenKind::None,
            (Task::Detection, true) => TokenKind::Iou,
            (Task::Pose, true) => TokenKind::Visibility,
        }
    }

    fn cls_token(&self) -> TokenKind {
        if self.task_token {
            TokenKind::Class
        } else {
            TokenKind::None
        }
    }
}

fn uniform(bound: f64, seed: u64) -> Init {
    Init::Uniform {
        low: -bound,
        high: bound,
        seed,
    }
}

/// Declares every parameter of the head for `cfg`.
///
/// Pose needs `mean_keypoints`, the normalized mean keypoint layout (see
/// [`crate::geometry::mean_keypoint_layout`]).
pub fn declare_head(cfg: &HeadConfig, mean_keypoints: Option<&[Point2]>) -> Result<ParameterStore> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (cin, c, d) = (cfg.in_channels, cfg.channels, cfg.width);
    let mut s = ParameterStore::new();
    s.declare("stem.conv1.w", &[3, 3, cin, c], uniform(1.0 / math::sqrt(9.0 * cin as f64), seed))?;
    s.declare("stem.conv1.b", &[c], Init::Zero)?;
    s.declare("stem.conv2.w", &[3, 3, c, c], uniform(1.0 / math::sqrt(9.0 * c as f64), seed))?;
    s.declare("stem.conv2.b", &[c], Init::Zero)?;

    declare_dense(&mut s, "offset.fc1", c, cfg.offset_hidden, seed)?;
    s.declare("offset.fc2.w", &[cfg.offset_hidden, 2 * cfg.k], Init::Zero)?;
    let bias = initial_bias_table(cfg.task, cfg.k, mean_keypoints, seed)?;
    let flat: Vec<f64> = bias.iter().flat_map(|p| [p.x, p.y]).collect();
    s.insert(
        "offset.fc2.b",
        Tensor::new(&[2 * cfg.k], flat)?,
        Init::BiasTable(String::from(cfg.task.name())),
    )?;

    declare_dense(&mut s, "point_proj", c, d, seed)?;
    for kind in [cfg.cls_token(), cfg.loc_token()] {
        if let Some(path) = kind.path() {
            s.declare(path, &[d], uniform(0.1, seed))?;
        }
    }
    declare_encoder(&mut s, "enc_cls", &cfg.encoder(cfg.l_cls), seed)?;
    declare_dense(&mut s, "cls_head", d, cfg.num_logits(), seed)?;
    if cfg.task == Task::Classification {
        return Ok(s);
    }
    declare_encoder(&mut s, "enc_loc", &cfg.encoder(cfg.l_loc), seed)?;
    s.declare("refine.w", &[d, 2], Init::Zero)?;
    s.declare("refine.b", &[2], Init::Zero)?;
    let bound = 1.0 / math::sqrt(d as f64);
    match cfg.task {
        Task::Detection => declare_dense(&mut s, "iou_head", d, 1, seed)?,
        Task::Pose => {
            s.declare("vis_head.point_w", &[d, 1], uniform(bound, seed))?;
            if cfg.task_token {
                s.declare("vis_head.token_w", &[d, 1], uniform(bound, seed))?;
            }
            s.declare("vis_head.b", &[1], Init::Zero)?;
        }
        _ => {}
    }
    Ok(s)
}

/// Two 3×3 stride-2 conv + ReLU stages: `[b,h,w,cin]` → `[b,h/4,w/4,c]`.
pub fn backbone_forward(g: &mut Graph, store: &ParameterStore, images: NodeId) -> Result<NodeId> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] % STRIDE != 0 || s[2] % STRIDE != 0 {
        return Err(Error::shape(
            "backbone",
            format!("images {s:?} must be [b,h,w,c] with h, w divisible by {STRIDE}"),
        ));
    }
    let mut x = images;
    for stage in ["stem.conv1", "stem.conv2"] {
        let w = g.param(store, &format!("{stage}.w"))?;
        let b = g.param(store, &format!("{stage}.b"))?;
        x = g.conv2d(x, w, 2)?;
        x = g.add(x, b)?;
        x = g.relu(x)?;
    }
    Ok(x)
}

/// Per-candidate constants of a forward pass.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub contexts: Vec<AnchorContext>,
    /// Image of each candidate within the batch.
    pub image_index: Vec<usize>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    fn check(&self) -> Result<usize> {
        if self.contexts.is_empty() || self.image_index.len() != self.contexts.len() {
            return Err(Error::contract(format!(
                "{} contexts with {} image indices",
                self.contexts.len(),
                self.image_index.len()
            )));
        }
        let g = self.contexts[0].context_points.len();
        if self.contexts.iter().any(|c| c.context_points.len() != g) {
            return Err(Error::contract("every context needs the same number of sampling points"));
        }
        Ok(g)
    }

    /// `[n, k, 2]` tensor repeating `f(ctx)` for every point.
    fn per_point(&self, k: usize, f: impl Fn(&AnchorContext) -> (f64, f64)) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * k * 2);
        for c in &self.contexts {
            let (x, y) = f(c);
            for _ in 0..k {
                data.extend([x, y]);
            }
        }
        Tensor::from_raw(vec![self.len(), k, 2], data)
    }
}

/// Scattered points `P` (`[n,k,2]`) and projected point features `z0`
/// (`[n,k,d]`).
#[derive(Debug, Clone, Copy)]
pub struct PointFeatures {
    pub points: NodeId,
    pub features: NodeId,
}

/// Offsets from the context feature, scattering around the anchor, bilinear sampling and
/// projection to the encoder width.
pub fn generate_point_features(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &HeadConfig,
    fmap: NodeId,
    cands: &Candidates,
) -> Result<PointFeatures> {
    let gp = cands.check()?;
    let (n, k) = (cands.len(), cfg.k);
    let ctx_pts: Vec<f64> = cands
        .contexts
        .iter()
        .flat_map(|c| c.context_points.iter().flat_map(|p| [p.x, p.y]))
        .collect();
    let ctx_pts = g.input(Tensor::new(&[n, gp, 2], ctx_pts)?);
    let sampled = g.bilinear_sample(fmap, ctx_pts, &cands.image_index)?;
    let context = g.mean(sampled, Some(1))?;

    let h = dense(g, store, context, "offset.fc1")?;
    let h = g.relu(h)?;
    let deltas = dense(g, store, h, "offset.fc2")?;
    let deltas = g.reshape(deltas, &[n, k, 2])?;

    let anchor = g.input(cands.per_point(k, |c| (c.anchor.x, c.anchor.y)));
    let scale = g.input(cands.per_point(k, |c| c.scale));
    let moved = g.mul(deltas, scale)?;
    let points = g.add(anchor, moved)?;

    let feats = g.bilinear_sample(fmap, points, &cands.image_index)?;
    let features = dense(g, store, feats, "point_proj")?;
    Ok(PointFeatures { points, features })
}

/// Graph handles of one head forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub fmap: NodeId,
    pub points: NodeId,
    pub z0: NodeId,
    /// `[n, classes]`.
    pub cls_logits: NodeId,
    /// `[n,k,2]` refined points `P′`.
    pub refined: Option<NodeId>,
    /// `[n,4]` boxes from `P′`.
    pub boxes: Option<NodeId>,
    /// `[n,1]`.
    pub iou_logit: Option<NodeId>,
    /// `[n,k]`.
    pub vis_logits: Option<NodeId>,
}

/// Full forward pass for `cfg.task`.
pub fn forward(g: &mut Graph, store: &ParameterStore, cfg: &HeadConfig, images: NodeId, cands: &Candidates) -> Result<HeadNodes> {
    let fmap = backbone_forward(g, store, images)?;
    let pf = generate_point_features(g, store, cfg, fmap, cands)?;
    let (n, k, d) = (cands.len(), cfg.k, cfg.width);

    let z = attach_task_token(g, store, pf.features, cfg.cls_token())?;
    let z = encoder::encode(g, store, z, &cfg.encoder(cfg.l_cls), "enc_cls")?;
    let summary = task_summary(g, z, cfg.task_token, n, d)?;
    let cls_logits = dense(g, store, summary, "cls_head")?;

    let mut out = HeadNodes {
        fmap,
        points: pf.points,
        z0: pf.features,
        cls_logits,
        refined: None,
        boxes: None,
        iou_logit: None,
        vis_logits: None,
    };
    if cfg.task == Task::Classification {
        return Ok(out);
    }

    let loc_token = cfg.loc_token();
    let z = attach_task_token(g, store, pf.features, loc_token)?;
    let z = encoder::encode(g, store, z, &cfg.encoder(cfg.l_loc), "enc_loc")?;
    let offset_in = if loc_token == TokenKind::None { z } else { g.slice(z, 1, 1, k + 1)? };
    let offsets = dense(g, store, offset_in, "refine")?;
    let scale = g.input(cands.per_point(k, |c| c.scale));
    let moved = g.mul(offsets, scale)?;
    let refined = g.add(pf.points, moved)?;
    out.refined = Some(refined);

    match cfg.task {
        Task::Detection => {
            let lo = g.min(refined, 1)?;
            let hi = g.max(refined, 1)?;
            out.boxes = Some(g.concat(&[lo, hi], 1)?);
            let summary = if loc_token == TokenKind::None {
                g.mean(z, Some(1))?
            } else {
                task_summary(g, z, true, n, d)?
            };
            out.iou_logit = Some(dense(g, store, summary, "iou_head")?);
        }
        Task::Pose => {
            let pw = g.param(store, "vis_head.point_w")?;
            let flat = g.reshape(offset_in, &[n * k, d])?;
            let per_point = g.matmul(flat, pw)?;
            let mut logits = g.reshape(per_point, &[n, k])?;
            if loc_token != TokenKind::None {
                let tw = g.param(store, "vis_head.token_w")?;
                let tok = task_summary(g, z, true, n, d)?;
                let t = g.matmul(tok, tw)?;
                let t = g.expand(t, 1, k)?;
                logits = g.add(logits, t)?;
            }
            let b = g.param(store, "vis_head.b")?;
            let b = g.expand(b, 0, k)?;
            out.vis_logits = Some(g.add(logits, b)?);
        }
        _ => {}
    }
    Ok(out)
}

/// Token 0 of `[n,t,d]` when a task token is present, else the token mean.
fn task_summary(g: &mut Graph, z: NodeId, has_token: bool, n: usize, d: usize) -> Result<NodeId> {
    if has_token {
        let first = g.slice(z, 1, 0, 1)?;
        g.reshape(first, &[n, d])
    } else {
        g.mean(z, Some(1))
    }
}

fn check_task(cfg: &HeadConfig, task: Task) -> Result<()> {
    if cfg.task != task {
        return Err(Error::contract(format!("head configured for {:?}, called as {task:?}", cfg.task)));
    }
    Ok(())
}

pub fn forward_classification(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &HeadConfig,
    images: NodeId,
    cands: &Candidates,
) -> Result<HeadNodes> {
    check_task(cfg, Task::Classification)?;
    forward(g, store, cfg, images, cands)
}

pub fn forward_detection(g: &mut Graph, store: &ParameterStore, cfg: &HeadConfig, images: NodeId, cands: &Candidates) -> Result<HeadNodes> {
    check_task(cfg, Task::Detection)?;
    forward(g, store, cfg, images, cands)
}

pub fn forward_segmentation(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &HeadConfig,
    images: NodeId,
    cands: &Candidates,
) -> Result<HeadNodes> {
    check_task(cfg, Task::Segmentation)?;
    forward(g, store, cfg, images, cands)
}

pub fn forward_pose(g: &mut Graph, store: &ParameterStore, cfg: &HeadConfig, images: NodeId, cands: &Candidates) -> Result<HeadNodes> {
    check_task(cfg, Task::Pose)?;
    forward(g, store, cfg, images, cands)
}

/// Supervision for a positive candidate, in feature-map cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveTarget {
    pub bbox: BoxXYXY,
    /// Ordered contour targets (segmentation).
    pub contour: Option<Vec<Point2>>,
    /// Keypoints with visibility (pose).
    pub keypoints: Option<Vec<(Point2, bool)>>,
}

/// Labels for every candidate; the first `positives.len()` candidates are the
/// positives, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub labels: Vec<usize>,
    pub positives: Vec<PositiveTarget>,
    /// Frozen IoU-token targets for the positives. When `None` they are the
    /// IoUs of the current boxes, read off the forward pass.
    pub iou_targets: Option<Vec<f64>>,
}

/// Scalar loss and its named parts.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    pub parts: Vec<(&'static str, NodeId)>,
}

/// Task loss over one forward pass.
///
/// Detection adds a BCE term pulling `sigmoid(iou_logit)` toward the IoU of
/// the current box with its target; that IoU is a constant of the step.
pub fn loss(g: &mut Graph, cfg: &HeadConfig, nodes: &HeadNodes, targets: &Targets) -> Result<LossNodes> {
    let n = g.shape(nodes.cls_logits)[0];
    let npos = targets.positives.len();
    if targets.labels.len() != n || npos > n {
        return Err(Error::contract(format!(
            "{} labels and {npos} positives for {n} candidates",
            targets.labels.len()
        )));
    }
    let mut parts = vec![("cls", g.cross_entropy(nodes.cls_logits, &targets.labels)?)];
    if npos > 0 {
        let k = cfg.k;
        match cfg.task {
            Task::Classification => {}
            Task::Detection => {
                let boxes = nodes.boxes.ok_or_else(|| Error::contract("detection output missing boxes"))?;
                let pos = g.slice(boxes, 0, 0, npos)?;
                let gt: Vec<[f64; 4]> = targets.positives.iter().map(|t| t.bbox.to_array()).collect();
                let l = match cfg.det_loss {
                    DetLoss::L1 => {
                        let t = g.input(Tensor::new(&[npos, 4], gt.iter().flatten().copied().collect())?);
                        g.l1(pos, t, None)?
                    }
                    DetLoss::Giou => g.giou_loss(pos, &gt)?,
                };
                parts.push(("box", l));
                let ious = match &targets.iou_targets {
                    Some(v) if v.len() == npos => v.clone(),
                    Some(v) => return Err(Error::contract(format!("{} IoU targets for {npos} positives", v.len()))),
                    None => current_ious(g.value(pos), &gt),
                };
                let iou = nodes.iou_logit.ok_or_else(|| Error::contract("detection output missing IoU logit"))?;
                let iou = g.slice(iou, 0, 0, npos)?;
                parts.push(("iou", g.bce_with_logits(iou, &ious)?));
            }
            Task::Segmentation => {
                let mut t = Vec::with_capacity(npos * k * 2);
                for p in &targets.positives {
                    let c = p.contour.as_ref().ok_or_else(|| Error::contract("segmentation target without contour"))?;
                    if c.len() != k {
                        return Err(Error::contract(format!("{} contour targets for K = {k}", c.len())));
                    }
                    t.extend(c.iter().flat_map(|q| [q.x, q.y]));
                }
                let refined = nodes.refined.ok_or_else(|| Error::contract("segmentation output missing points"))?;
                let pos = g.slice(refined, 0, 0, npos)?;
                let t = g.input(Tensor::new(&[npos, k, 2], t)?);
                parts.push(("contour", g.l1(pos, t, None)?));
            }
            Task::Pose => {
                let mut t = Vec::with_capacity(npos * k * 2);
                let mut w = Vec::with_capacity(npos * k * 2);
                let mut vis = Vec::with_capacity(npos * k);
                for p in &targets.positives {
                    let kp = p.keypoints.as_ref().ok_or_else(|| Error::contract("pose target without keypoints"))?;
                    if kp.len() != k {
                        return Err(Error::contract(format!("{} keypoints for K = {k}", kp.len())));
                    }
                    for &(q, v) in kp {
                        t.extend([q.x, q.y]);
                        let m = if v { 1.0 } else { 0.0 };
                        w.extend([m, m]);
                        vis.push(m);
                    }
                }
                let refined = nodes.refined.ok_or_else(|| Error::contract("pose output missing points"))?;
                let pos = g.slice(refined, 0, 0, npos)?;
                if w.iter().any(|&m| m > 0.0) {
                    let t = g.input(Tensor::new(&[npos, k, 2], t)?);
                    parts.push(("keypoints", g.l1(pos, t, Some(w))?));
                }
                let logits = nodes.vis_logits.ok_or_else(|| Error::contract("pose output missing visibility"))?;
                let logits = g.slice(logits, 0, 0, npos)?;
                parts.push(("visibility", g.bce_with_logits(logits, &vis)?));
            }
        }
    }
    let mut total = parts[0].1;
    for &(_, p) in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(LossNodes { total, parts })
}

/// IoU of each `[n,4]` box row with its target.
pub fn current_ious(boxes: &Tensor, gt: &[[f64; 4]]) -> Vec<f64> {
    let b = |v: &[f64]| BoxXYXY {
        x1: v[0],
        y1: v[1],
        x2: v[2],
        y2: v[3],
    };
    boxes.data().chunks(4).zip(gt).map(|(p, t)| box_iou(&b(p), &b(t))).collect()
}

/// Final detection score: class probability times the predicted IoU.
pub fn fuse_detection_score(class_prob: f64, iou_logit: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&class_prob) {
        return Err(Error::contract(format!("class probability {class_prob} outside [0, 1]")));
    }
    Ok(class_prob * math::sigmoid(iou_logit))
}

/// Plain-value output of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Classification {
        logits: Vec<f64>,
    },
    Detection {
        logits: Vec<f64>,
        iou_logit: f64,
        points: PointSet,
        bbox: BoxXYXY,
    },
    Segmentation {
        logits: Vec<f64>,
        points: PointSet,
    },
    Pose {
        logits: Vec<f64>,
        points: PointSet,
        visibility_logits: Vec<f64>,
    },
}

impl HeadOutput {
    pub fn logits(&self) -> &[f64] {
        match self {
            HeadOutput::Classification { logits }
            | HeadOutput::Detection { logits, .. }
            | HeadOutput::Segmentation { logits, .. }
            | HeadOutput::Pose { logits, .. } => logits,
        }
    }

    pub fn points(&self) -> Option<&PointSet> {
        match self {
            HeadOutput::Classification { .. } => None,
            HeadOutput::Detection { points, .. } | HeadOutput::Segmentation { points, .. } | HeadOutput::Pose { points, .. } => Some(points),
        }
    }
}

impl HeadNodes {
    /// Reads every candidate's output from the recorded values.
    pub fn outputs(&self, g: &Graph, cfg: &HeadConfig) -> Result<Vec<HeadOutput>> {
        let logits = g.value(self.cls_logits);
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        let k = cfg.k;
        let row = |t: &Tensor, i: usize, w: usize| t.data()[i * w..(i + 1) * w].to_vec();
        let points = |i: usize| -> Result<PointSet> {
            let r = g.value(self.refined.expect("instance task has refined points"));
            PointSet::new(r.data()[i * k * 2..(i + 1) * k * 2].chunks(2).map(|p| Point2::new(p[0], p[1])).collect())
        };
        (0..n)
            .map(|i| {
                let logits = row(logits, i, c);
                Ok(match cfg.task {
                    Task::Classification => HeadOutput::Classification { logits },
                    Task::Detection => {
                        let b = row(g.value(self.boxes.expect("detection boxes")), i, 4);
                        HeadOutput::Detection {
                            logits,
                            iou_logit: g.value(self.iou_logit.expect("detection iou")).data()[i],
                            points: points(i)?,
                            bbox: BoxXYXY {
                                x1: b[0],
                                y1: b[1],
                                x2: b[2],
                                y2: b[3],
                            },
                        }
                    }
                    Task::Segmentation => HeadOutput::Segmentation {
                        logits,
                        points: points(i)?,
                    },
                    Task::Pose => HeadOutput::Pose {
                        logits,
                        points: points(i)?,
                        visibility_logits: row(g.value(self.vis_logits.expect("pose visibility")), i, k),
                    },
                })
            })
            .collect()
    }
}

/// Softmax probabilities of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| math::exp(l - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
