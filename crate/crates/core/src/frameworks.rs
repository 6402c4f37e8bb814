//! Anchor contexts for anchor-free, anchor-based and two-stage detectors,
//! label assignment, and the jittered-proposal stand-in for an RPN.
//!
//! Everything here is in feature-map cells.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, AnchorContext, BoxXYXY, Point2};
use crate::math;
use crate::metrics::box_iou;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Default pooling grid of the two-stage context.
pub const DEFAULT_POOL_GRID: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum FrameworkKind {
    AnchorFree { stride: usize },
    AnchorBased,
    TwoStage { grid: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSource {
    /// Jittered copy of the gt with this index.
    Jittered(usize),
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoxXYXY,
    pub source: ProposalSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Candidate {
    /// Feature-map cell `(x, y)`.
    Grid { x: usize, y: usize },
    Anchor { center: Point2, extents: (f64, f64) },
    Proposal(Proposal),
}

impl Candidate {
    fn region(&self) -> Option<BoxXYXY> {
        match self {
            Candidate::Grid { .. } => None,
            Candidate::Anchor { center, extents } => BoxXYXY::from_center(*center, extents.0, extents.1).ok(),
            Candidate::Proposal(p) => Some(p.bbox),
        }
    }
}

/// `g×g` cell-centre sampling points covering `b`.
pub fn pool_points(b: &BoxXYXY, g: usize) -> Result<Vec<Point2>> {
    if g == 0 {
        return Err(Error::contract("pool grid must be at least 1"));
    }
    if !(b.area() > 0.0) {
        return Err(Error::degenerate(format!("pooling over zero-area box {b:?}")));
    }
    let (cw, ch) = (b.width() / g as f64, b.height() / g as f64);
    Ok((0..g * g)
        .map(|i| Point2::new(b.x1 + ((i % g) as f64 + 0.5) * cw, b.y1 + ((i / g) as f64 + 0.5) * ch))
        .collect())
}

/// Mean of bilinear samples of an `[h,w,c]` map over a `g×g` grid in `b`.
pub fn pool_region_feature(fmap: &Tensor, b: &BoxXYXY, g: usize) -> Result<Vec<f64>> {
    let pts = pool_points(b, g)?;
    let mut acc: Vec<f64> = Vec::new();
    for p in &pts {
        let v = bilinear_sample(fmap, *p)?;
        if acc.is_empty() {
            acc = v;
        } else {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
    }
    let n = pts.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// One context per candidate, in order, for a map of `h×w` cells.
pub fn build_anchor_contexts(kind: &FrameworkKind, map: (usize, usize), candidates: &[Candidate]) -> Result<Vec<AnchorContext>> {
    let (h, w) = map;
    candidates
        .iter()
        .map(|c| match (kind, c) {
            (FrameworkKind::AnchorFree { stride }, Candidate::Grid { x, y }) => {
                if *x >= w || *y >= h {
                    return Err(Error::contract(format!("grid cell ({x}, {y}) outside {w}×{h} map")));
                }
                let a = Point2::new(*x as f64, *y as f64);
                AnchorContext::new(a, (*stride as f64, *stride as f64), alloc::vec![a])
            }
            (FrameworkKind::AnchorBased, Candidate::Anchor { center, extents }) => {
                let cell = Point2::new(math::round(center.x), math::round(center.y));
                if cell.x < 0.0 || cell.y < 0.0 || cell.x > (w - 1) as f64 || cell.y > (h - 1) as f64 {
                    return Err(Error::contract(format!("anchor centre {center:?} outside {w}×{h} map")));
                }
                AnchorContext::new(*center, *extents, alloc::vec![cell])
            }
            (FrameworkKind::TwoStage { grid }, Candidate::Proposal(p)) => {
                let b = p.bbox;
                if b.x2 < 0.0 || b.y2 < 0.0 || b.x1 > (w - 1) as f64 || b.y1 > (h - 1) as f64 {
                    return Err(Error::contract(format!("proposal {b:?} outside {w}×{h} map")));
                }
                AnchorContext::new(b.center(), (b.width(), b.height()), pool_points(&b, *grid)?)
            }
            _ => Err(Error::contract(format!("candidate {c:?} does not fit framework {kind:?}"))),
        })
        .collect()
}

/// Whole-map context used for classification: centre anchor, map extents as
/// scale, pooled over the full map.
pub fn classification_context(map: (usize, usize), grid: usize) -> Result<AnchorContext> {
    let (h, w) = map;
    let b = BoxXYXY::new(0.0, 0.0, w as f64, h as f64)?;
    AnchorContext::new(b.center(), (w as f64, h as f64), pool_points(&b, grid)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignPolicy {
    /// Positive at IoU ≥ `positive`, background below `background`, else ignored.
    Iou { positive: f64, background: f64 },
    /// Grid point inside a gt box; the nearest gt centre wins.
    CenterInside,
}

impl Default for AssignPolicy {
    fn default() -> Self {
        AssignPolicy::Iou {
            positive: 0.5,
            background: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive(usize),
    Background,
    Ignored,
}

pub type Assignment = Vec<Label>;

/// Labels every candidate against the gt boxes. Ties go to the lowest gt index.
pub fn assign_targets(candidates: &[Candidate], gts: &[BoxXYXY], policy: AssignPolicy) -> Result<Assignment> {
    candidates
        .iter()
        .map(|c| match policy {
            AssignPolicy::Iou { positive, background } => {
                let region = c
                    .region()
                    .ok_or_else(|| Error::contract("IoU assignment needs boxes, not grid points"))?;
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let iou = box_iou(&region, g);
                    if best.is_none_or(|b| iou > b.1) {
                        best = Some((j, iou));
                    }
                }
                Ok(match best {
                    Some((j, iou)) if iou >= positive => Label::Positive(j),
                    Some((_, iou)) if iou >= background => Label::Ignored,
                    _ => Label::Background,
                })
            }
            AssignPolicy::CenterInside => {
                let p = match c {
                    Candidate::Grid { x, y } => Point2::new(*x as f64, *y as f64),
                    Candidate::Anchor { center, .. } => *center,
                    Candidate::Proposal(p) => p.bbox.center(),
                };
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    if g.contains(p) {
                        let d = p.dist(g.center());
                        if best.is_none_or(|b| d < b.1) {
                            best = Some((j, d));
                        }
                    }
                }
                Ok(best.map_or(Label::Background, |b| Label::Positive(b.0)))
            }
        })
        .collect()
}

/// Desk-scale proposals: one jittered copy per gt (±`jitter` of the extents
/// on centre and size, redrawn until IoU ≥ `min_iou`, falling back to the gt
/// itself) plus up to `negatives` random boxes with IoU < `max_neg_iou` to
/// every gt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalSpec {
    pub jitter: f64,
    pub min_iou: f64,
    pub negatives: usize,
    pub max_neg_iou: f64,
}

impl Default for ProposalSpec {
    fn default() -> Self {
        ProposalSpec {
            jitter: 0.2,
            min_iou: 0.5,
            negatives: 1,
            max_neg_iou: 0.4,
        }
    }
}

const MAX_DRAWS: usize = 100;

/// Proposals for one scene of `h×w` cells, deterministic in `seed`.
pub fn jitter_proposals(gts: &[BoxXYXY], map: (usize, usize), spec: &ProposalSpec, seed: u64) -> Vec<Proposal> {
    let (h, w) = (map.0 as f64, map.1 as f64);
    let mut rng = rng_for(seed, 0x7072_6f70);
    let mut out = Vec::with_capacity(gts.len() + spec.negatives);
    for (j, g) in gts.iter().enumerate() {
        let mut chosen = *g;
        for _ in 0..MAX_DRAWS {
            let mut u = || if spec.jitter > 0.0 { rng.random_range(-spec.jitter..spec.jitter) } else { 0.0 };
            let (cx, cy) = (g.center().x + u() * g.width(), g.center().y + u() * g.height());
            let (bw, bh) = (g.width() * (1.0 + u()), g.height() * (1.0 + u()));
            if let Ok(b) = BoxXYXY::from_center(Point2::new(cx, cy), bw, bh) {
                if b.area() > 0.0 && box_iou(&b, g) >= spec.min_iou {
                    chosen = b;
                    break;
                }
            }
        }
        out.push(Proposal {
            bbox: chosen,
            source: ProposalSource::Jittered(j),
        });
    }
    let (lo, hi) = (1.0f64.min(w / 4.0), (w.min(h) / 2.0).max(1.5));
    for _ in 0..spec.negatives {
        for _ in 0..MAX_DRAWS {
            let (bw, bh) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let x1 = rng.random_range(0.0..(w - bw).max(1e-9));
            let y1 = rng.random_range(0.0..(h - bh).max(1e-9));
            let b = BoxXYXY {
                x1,
                y1,
                x2: x1 + bw,
                y2: y1 + bh,
            };
            if gts.iter().all(|g| box_iou(&b, g) < spec.max_neg_iou) {
                out.push(Proposal {
                    bbox: b,
                    source: ProposalSource::Negative,
                });
                break;
            }
        }
    }
    out
}
