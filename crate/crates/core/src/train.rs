//! Training and evaluation loops over synthetic scenes, plus the end-to-end
//! gradient check.
//!
//! Scene annotations are in pixels. This module is the one place where they
//! are divided by [`STRIDE`] into feature-map cells for the head, and where
//! predictions are multiplied back into pixels for evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{finite_difference_check, FdOptions, FdReport, Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::frameworks::{
    assign_targets, build_anchor_contexts, classification_context, jitter_proposals, AssignPolicy, Candidate,
    FrameworkKind, Label, ProposalSpec, DEFAULT_POOL_GRID,
};
use crate::geometry::{contour_targets, mean_keypoint_layout, Point2, Polygon};
use crate::head::{self, Candidates, HeadConfig, HeadNodes, HeadOutput, PositiveTarget, Targets, Task, STRIDE};
use crate::metrics::{evaluate, EvalReport, GroundTruth, GtGeometry, PredGeometry, Prediction};
use crate::optim::{adamw_step, AdamW, OptimizerState, Schedule};
use crate::rng::{mix, rng_for};
use crate::synth::{raster_batch, DatasetSpec, Scene};
use crate::tensor::Tensor;

/// Matching thresholds of the reported AP.
pub const AP_THRESHOLDS: [f64; 1] = [0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    pub epochs: u64,
    /// Scenes per step; 0 means the whole dataset.
    pub batch_size: usize,
    pub proposals: ProposalSpec,
    pub pool_grid: usize,
    /// Raster noise standard deviation.
    pub noise: f64,
}

impl TrainConfig {
    /// Defaults for `task`: cosine decay for classification, step decay
    /// otherwise, full-batch steps.
    pub fn new(task: Task, num_classes: usize, epochs: u64) -> Self {
        let schedule = if task == Task::Classification {
            Schedule::Cosine { total: epochs }
        } else {
            Schedule::step_for(epochs)
        };
        TrainConfig {
            head: HeadConfig::new(task, num_classes),
            optimizer: AdamW::default(),
            schedule,
            epochs,
            batch_size: 0,
            proposals: ProposalSpec::default(),
            pool_grid: DEFAULT_POOL_GRID,
            noise: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.pool_grid == 0 || !(self.noise >= 0.0) {
            return Err(Error::config("pool grid must be positive and noise non-negative"));
        }
        Ok(())
    }
}

/// One step's worth of inputs and supervision.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub cands: Candidates,
    pub targets: Targets,
    /// Dataset-wide scene index of each candidate.
    pub scene_of: Vec<usize>,
    /// Dataset-wide gt index each candidate is trained against.
    pub assigned: Vec<Option<usize>>,
}

/// Batches plus the pixel-space ground truth of the whole dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub batches: Vec<Batch>,
    pub gts: Vec<GroundTruth>,
}

/// Mean keypoint layout of a dataset, for the pose bias table.
pub fn keypoint_statistics(scenes: &[Scene], k: usize) -> Result<Vec<Point2>> {
    let kps: Vec<(crate::geometry::BoxXYXY, Vec<Point2>)> = scenes
        .iter()
        .flat_map(|s| s.instances.iter())
        .map(|i| (i.bbox, i.keypoints.iter().map(|kp| kp.point).collect()))
        .collect();
    mean_keypoint_layout(kps.iter().map(|(b, p)| (*b, p.as_slice())), k)
}

/// Builds candidates and targets for every scene.
///
/// Classification uses one whole-map candidate per single-instance scene.
/// Instance tasks use two-stage contexts over jittered proposals that depend
/// only on the scene's seed and index, so every epoch and the final
/// evaluation see the same candidates. Positives come first in each batch.
pub fn prepare(cfg: &TrainConfig, scenes: &[Scene]) -> Result<Prepared> {
    cfg.validate()?;
    let first = scenes.first().ok_or_else(|| Error::contract("no scenes"))?;
    let (h, w) = first.extents;
    if h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::contract(format!("extents {h}×{w} not divisible by {STRIDE}")));
    }
    let map = (h / STRIDE, w / STRIDE);
    let task = cfg.head.task;
    let inv = 1.0 / STRIDE as f64;

    let mut gts = Vec::new();
    // per scene: (gt offset, positives, backgrounds)
    struct SceneCands {
        pos: Vec<(Candidate, usize, PositiveTarget)>,
        neg: Vec<Candidate>,
        ctx_cls: bool,
        label: usize,
    }
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (si, s) in scenes.iter().enumerate() {
        if s.extents != first.extents {
            return Err(Error::contract("scenes must share extents"));
        }
        for inst in &s.instances {
            inst.validate(cfg.head.num_classes)?;
            if task == Task::Pose && inst.keypoints.len() != cfg.head.k {
                return Err(Error::contract(format!("{} keypoints for K = {}", inst.keypoints.len(), cfg.head.k)));
            }
        }
        let offset = gts.len();
        for inst in &s.instances {
            let geometry = match task {
                Task::Classification => GtGeometry::Label,
                Task::Detection => GtGeometry::Box(inst.bbox),
                Task::Segmentation => GtGeometry::Contour(inst.contour.clone()),
                Task::Pose => GtGeometry::Keypoints {
                    points: inst.keypoints.iter().map(|k| (k.point, k.visible)).collect(),
                    area: inst.bbox.area(),
                },
            };
            gts.push(GroundTruth {
                scene: si,
                class: inst.class,
                geometry,
            });
        }
        if task == Task::Classification {
            if s.instances.len() != 1 {
                return Err(Error::contract(format!(
                    "classification scenes hold one instance, scene {si} has {}",
                    s.instances.len()
                )));
            }
            per_scene.push(SceneCands {
                pos: vec![],
                neg: vec![],
                ctx_cls: true,
                label: s.instances[0].class,
            });
            continue;
        }
        let fboxes: Vec<_> = s.instances.iter().map(|i| i.bbox.scaled(inv)).collect();
        let proposals = jitter_proposals(&fboxes, map, &cfg.proposals, mix(s.seed) ^ mix(s.index.wrapping_add(1)));
        let cands: Vec<Candidate> = proposals.into_iter().map(Candidate::Proposal).collect();
        let labels = assign_targets(&cands, &fboxes, AssignPolicy::default())?;
        let mut sc = SceneCands {
            pos: vec![],
            neg: vec![],
            ctx_cls: false,
            label: 0,
        };
        for (c, l) in cands.into_iter().zip(labels) {
            match l {
                Label::Positive(j) => {
                    let inst = &s.instances[j];
                    let anchor = match c {
                        Candidate::Proposal(p) => p.bbox.center(),
                        _ => unreachable!("proposals only"),
                    };
                    let contour = if task == Task::Segmentation {
                        let poly = Polygon::new(inst.contour.vertices().iter().map(|p| scale_point(*p, inv)).collect())?;
                        Some(contour_targets(&poly, cfg.head.k, anchor)?.into_points())
                    } else {
                        None
                    };
                    let keypoints = (task == Task::Pose)
                        .then(|| inst.keypoints.iter().map(|k| (scale_point(k.point, inv), k.visible)).collect());
                    sc.pos.push((
                        c,
                        offset + j,
                        PositiveTarget {
                            bbox: fboxes[j],
                            contour,
                            keypoints,
                        },
                    ));
                }
                Label::Background => sc.neg.push(c),
                Label::Ignored => {}
            }
        }
        per_scene.push(sc);
    }

    let chunk = if cfg.batch_size == 0 { scenes.len() } else { cfg.batch_size };
    let kind = FrameworkKind::TwoStage { grid: cfg.pool_grid };
    let mut batches = Vec::new();
    for start in (0..scenes.len()).step_by(chunk) {
        let end = (start + chunk).min(scenes.len());
        let images = raster_batch(&scenes[start..end], cfg.noise)?;
        let mut contexts = Vec::new();
        let mut image_index = Vec::new();
        let mut scene_of = Vec::new();
        let mut assigned = Vec::new();
        let mut labels = Vec::new();
        let mut positives = Vec::new();
        for (bi, si) in (start..end).enumerate() {
            let sc = &per_scene[si];
            if sc.ctx_cls {
                contexts.push(classification_context(map, cfg.pool_grid)?);
                image_index.push(bi);
                scene_of.push(si);
                assigned.push(Some(gts.iter().position(|g| g.scene == si).expect("one gt per scene")));
                labels.push(sc.label);
            }
            for (c, gi, t) in &sc.pos {
                contexts.extend(build_anchor_contexts(&kind, map, core::slice::from_ref(c))?);
                image_index.push(bi);
                scene_of.push(si);
                assigned.push(Some(*gi));
                labels.push(gts[*gi].class);
                positives.push(t.clone());
            }
        }
        let bg = cfg.head.background().unwrap_or(0);
        for (bi, si) in (start..end).enumerate() {
            for c in &per_scene[si].neg {
                contexts.extend(build_anchor_contexts(&kind, map, core::slice::from_ref(c))?);
                image_index.push(bi);
                scene_of.push(si);
                assigned.push(None);
                labels.push(bg);
            }
        }
        batches.push(Batch {
            images,
            cands: Candidates { contexts, image_index },
            targets: Targets {
                labels,
                positives,
                iou_targets: None,
            },
            scene_of,
            assigned,
        });
    }
    Ok(Prepared { batches, gts })
}

fn scale_point(p: Point2, f: f64) -> Point2 {
    Point2::new(p.x * f, p.y * f)
}

/// Records the forward pass and loss of one batch.
pub fn build_loss(g: &mut Graph, params: &ParameterStore, cfg: &HeadConfig, batch: &Batch) -> Result<(HeadNodes, head::LossNodes)> {
    let images = g.input(batch.images.clone());
    let nodes = head::forward(g, params, cfg, images, &batch.cands)?;
    let loss = head::loss(g, cfg, &nodes, &batch.targets)?;
    Ok((nodes, loss))
}

/// Predictions of one batch in pixel coordinates.
///
/// Instance tasks predict the best foreground class; its probability is the
/// score, multiplied by the predicted IoU for detection.
pub fn batch_predictions(g: &Graph, nodes: &HeadNodes, cfg: &HeadConfig, batch: &Batch) -> Result<Vec<Prediction>> {
    let outs = nodes.outputs(g, cfg)?;
    let px = |p: &Point2| scale_point(*p, STRIDE as f64);
    outs.iter()
        .enumerate()
        .map(|(i, o)| {
            let probs = head::softmax(o.logits());
            let fg = &probs[..cfg.num_classes];
            let class = crate::metrics::argmax(fg);
            let mut score = fg[class];
            let geometry = match o {
                HeadOutput::Classification { .. } => PredGeometry::None,
                HeadOutput::Detection { bbox, iou_logit, .. } => {
                    score = head::fuse_detection_score(score, *iou_logit)?;
                    PredGeometry::Box(bbox.scaled(STRIDE as f64))
                }
                HeadOutput::Segmentation { points, .. } => PredGeometry::Contour(points.points().iter().map(px).collect()),
                HeadOutput::Pose { points, .. } => PredGeometry::Keypoints(points.points().iter().map(px).collect()),
            };
            Ok(Prediction {
                scene: batch.scene_of[i],
                class,
                score,
                geometry,
                assigned_gt: batch.assigned[i],
            })
        })
        .collect()
}

/// Losses logged for one epoch: the mean over its steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub parts: Vec<(String, f64)>,
}

/// Parameters, optimizer state and prepared data of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ParameterStore,
    pub state: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    data: Prepared,
}

impl Trainer {
    /// Fresh parameters for `cfg.head`; pose statistics come from `scenes`.
    pub fn new(cfg: TrainConfig, scenes: &[Scene]) -> Result<Self> {
        let data = prepare(&cfg, scenes)?;
        let stats = if cfg.head.task == Task::Pose {
            Some(keypoint_statistics(scenes, cfg.head.k)?)
        } else {
            None
        };
        let params = head::declare_head(&cfg.head, stats.as_deref())?;
        let state = OptimizerState::new(&params);
        Ok(Trainer {
            cfg,
            params,
            state,
            epoch: 0,
            data,
        })
    }

    /// Resumes from saved parameters and optimizer state.
    pub fn resume(cfg: TrainConfig, scenes: &[Scene], params: ParameterStore, state: OptimizerState, epoch: u64) -> Result<Self> {
        let fresh = Trainer::new(cfg, scenes)?;
        check_compatible(&fresh.params, &params)?;
        state.check_against(&params)?;
        Ok(Trainer {
            params,
            state,
            epoch,
            ..fresh
        })
    }

    pub fn prepared(&self) -> &Prepared {
        &self.data
    }

    /// One pass over every batch at the epoch's learning rate.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.cfg.schedule.lr_at(self.cfg.optimizer.lr, self.epoch);
        let mut total = 0.0;
        let mut parts: Vec<(String, f64)> = Vec::new();
        for batch in &self.data.batches {
            let step = self.state.step;
            let at = |e: Error| match e {
                Error::Numeric { context } => {
                    Error::numeric(format!("{context} at epoch {}, step {step}", self.epoch))
                }
                other => other,
            };
            let mut g = Graph::new();
            let (_, loss) = build_loss(&mut g, &self.params, &self.cfg.head, batch).map_err(at)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                let detail: Vec<String> = loss.parts.iter().map(|(n, id)| format!("{n}={}", g.value(*id).item())).collect();
                return Err(Error::numeric(format!(
                    "loss {value} ({}) at epoch {}, step {step}",
                    detail.join(", "),
                    self.epoch
                )));
            }
            total += value;
            for (name, id) in &loss.parts {
                let v = g.value(*id).item();
                match parts.iter_mut().find(|p| p.0 == *name) {
                    Some(p) => p.1 += v,
                    None => parts.push((String::from(*name), v)),
                }
            }
            let grads = g.backward(loss.total, &self.params).map_err(at)?;
            adamw_step(&mut self.params, &grads, &mut self.state, &self.cfg.optimizer, lr)?;
        }
        let nb = self.data.batches.len() as f64;
        parts.iter_mut().for_each(|p| p.1 /= nb);
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            loss: total / nb,
            parts,
        };
        self.epoch += 1;
        Ok(log)
    }

    pub fn predictions(&self) -> Result<Vec<Prediction>> {
        predict(&self.params, &self.cfg.head, &self.data)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(self.cfg.head.task, &self.predictions()?, &self.data.gts, &AP_THRESHOLDS)
    }
}

/// Predictions of `params` over prepared data.
pub fn predict(params: &ParameterStore, cfg: &HeadConfig, data: &Prepared) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for batch in &data.batches {
        let mut g = Graph::new();
        let images = g.input(batch.images.clone());
        let nodes = head::forward(&mut g, params, cfg, images, &batch.cands)?;
        out.extend(batch_predictions(&g, &nodes, cfg, batch)?);
    }
    Ok(out)
}

/// Errors unless `loaded` has exactly the paths and shapes of `expected`.
pub fn check_compatible(expected: &ParameterStore, loaded: &ParameterStore) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} parameters, config expects {}",
            loaded.len(),
            expected.len()
        )));
    }
    for (path, e) in expected.iter() {
        match loaded.get(path) {
            Some(t) if t.shape() == e.value.shape() => {}
            Some(t) => {
                return Err(Error::contract(format!(
                    "`{path}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    e.value.shape()
                )))
            }
            None => return Err(Error::contract(format!("checkpoint lacks `{path}`"))),
        }
    }
    Ok(())
}

/// Loss curve, final state and train-set report of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpochLog>,
    pub report: EvalReport,
    pub trainer: Trainer,
}

/// Runs `cfg.epochs` epochs and evaluates on the training scenes.
pub fn train(cfg: TrainConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, scenes)?;
    let mut curve = Vec::with_capacity(trainer.cfg.epochs as usize);
    while trainer.epoch < trainer.cfg.epochs {
        curve.push(trainer.run_epoch()?);
    }
    let report = trainer.evaluate()?;
    Ok(TrainOutcome { curve, report, trainer })
}

/// Gradient-check settings for one task.
#[derive(Debug, Clone)]
pub struct GradcheckSpec {
    pub task: Task,
    pub seed: u64,
    pub sample: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Test hook forwarded to [`FdOptions::corrupt`].
    pub corrupt: Option<(String, f64)>,
}

impl GradcheckSpec {
    pub fn new(task: Task, seed: u64) -> Self {
        GradcheckSpec {
            task,
            seed,
            sample: 200,
            eps: 1e-6,
            tolerance: 1e-3,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub task: Task,
    pub report: FdReport,
    pub passed: bool,
}

/// Small head used by the gradient check.
pub fn gradcheck_head(task: Task, seed: u64) -> HeadConfig {
    HeadConfig {
        k: match task {
            Task::Classification => 4,
            Task::Detection => 8,
            Task::Segmentation => 6,
            Task::Pose => 5,
        },
        channels: 4,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        offset_hidden: 8,
        l_cls: 1,
        l_loc: 1,
        seed,
        ..HeadConfig::new(task, 3)
    }
}

/// One seeded scene through the full head and loss, checked against central
/// differences.
///
/// Parameters are the seeded initialization plus a small uniform
/// perturbation, so zero-initialized layers take generic values and every
/// branch carries gradient. The IoU-token targets are frozen at the
/// unperturbed parameters, matching the stop-gradient of the analytic pass.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckOutcome> {
    let head_cfg = gradcheck_head(spec.task, spec.seed);
    let data = DatasetSpec {
        scenes: 1,
        extents: (32, 32),
        classes: 3,
        instances: if spec.task == Task::Classification { (1, 1) } else { (2, 2) },
        size: (10.0, 14.0),
        keypoints: head_cfg.k,
        ..DatasetSpec::instances(1, spec.seed)
    };
    let scene = crate::synth::generate_scene(&data, 0)?;
    let cfg = TrainConfig {
        head: head_cfg,
        pool_grid: 3,
        ..TrainConfig::new(spec.task, 3, 1)
    };
    let scenes = [scene];
    let mut batch = prepare(&cfg, &scenes)?.batches.remove(0);
    let stats = if spec.task == Task::Pose {
        Some(keypoint_statistics(&scenes, cfg.head.k)?)
    } else {
        None
    };
    let mut params = head::declare_head(&cfg.head, stats.as_deref())?;
    let mut rng = rng_for(spec.seed, 0x6763);
    let paths: Vec<String> = params.paths().map(String::from).collect();
    for p in &paths {
        for v in params.value_mut(p).expect("own path").data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    if spec.task == Task::Detection {
        let mut g = Graph::new();
        let (nodes, _) = build_loss(&mut g, &params, &cfg.head, &batch)?;
        let npos = batch.targets.positives.len();
        let boxes = g.value(nodes.boxes.expect("detection boxes"));
        let pos = Tensor::new(&[npos, 4], boxes.data()[..npos * 4].to_vec())?;
        let gt: Vec<[f64; 4]> = batch.targets.positives.iter().map(|t| t.bbox.to_array()).collect();
        batch.targets.iou_targets = Some(head::current_ious(&pos, &gt));
    }
    let build = |g: &mut Graph, p: &ParameterStore| -> Result<NodeId> { Ok(build_loss(g, p, &cfg.head, &batch)?.1.total) };
    let report = finite_difference_check(
        build,
        &params,
        &FdOptions {
            eps: spec.eps,
            sample: spec.sample,
            seed: spec.seed,
            corrupt: spec.corrupt.clone(),
        },
    )?;
    Ok(GradcheckOutcome {
        task: spec.task,
        passed: report.max_rel_error < spec.tolerance && report.checked >= spec.sample.min(params.num_coordinates()),
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_orders_positives_first() {
        let spec = DatasetSpec::instances(3, 5);
        let scenes = crate::synth::generate_dataset(&spec).unwrap();
        let cfg = TrainConfig::new(Task::Detection, 4, 1);
        let data = prepare(&cfg, &scenes).unwrap();
        let b = &data.batches[0];
        let npos = b.targets.positives.len();
        assert!(npos >= scenes.iter().map(|s| s.instances.len()).sum::<usize>() / 2);
        assert!(b.assigned[..npos].iter().all(Option::is_some));
        assert!(b.assigned[npos..].iter().all(Option::is_none));
        assert!(b.targets.labels[npos..].iter().all(|&l| l == 4));
    }

    #[test]
    fn zero_epochs_only_evaluates() {
        let spec = DatasetSpec::classification(2, 1);
        let scenes = crate::synth::generate_dataset(&spec).unwrap();
        let mut cfg = TrainConfig::new(Task::Classification, 4, 0);
        cfg.head = gradcheck_head(Task::Classification, 0);
        cfg.head.num_classes = 4;
        let out = train(cfg, &scenes).unwrap();
        assert!(out.curve.is_empty());
        assert!(out.report.top1.is_some());
    }
}
