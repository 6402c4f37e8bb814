//! Seeded synthetic scenes: filled polygons with boxes, clockwise contours,
//! landmark keypoints and class labels, plus their noisy rasters.
//!
//! Annotations are in image pixels; pixel `(u, v)` of the raster is the
//! sample at coordinate `(u, v)`. Feature-map coordinates are pixels divided
//! by [`crate::head::STRIDE`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{box_from_points, BoxXYXY, Point2, PointSet, Polygon};
use crate::math;
use crate::metrics::box_iou;
use crate::rng::{mix, rng_for};
use crate::tensor::Tensor;

/// Raster channels.
pub const IN_CHANNELS: usize = 3;

const MAX_PLACEMENTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Triangle,
    Rectangle,
    Hexagon,
    Star,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Triangle, ShapeFamily::Rectangle, ShapeFamily::Hexagon, ShapeFamily::Star];

    /// Class id of the family.
    pub fn class(self) -> usize {
        self as usize
    }

    /// Unit-size outline centred at the origin, clockwise in image coordinates.
    fn outline(self, aspect: f64, rot: f64) -> Vec<Point2> {
        let ring = |n: usize, radius: &dyn Fn(usize) -> f64, phase: f64| -> Vec<Point2> {
            (0..n)
                .map(|i| {
                    let t = phase + rot + 2.0 * core::f64::consts::PI * i as f64 / n as f64;
                    let r = radius(i);
                    Point2::new(r * math::cos(t), r * math::sin(t))
                })
                .collect()
        };
        let up = -core::f64::consts::FRAC_PI_2;
        match self {
            ShapeFamily::Triangle => ring(3, &|_| 1.0, up),
            ShapeFamily::Rectangle => {
                let (hw, hh) = (1.0, aspect);
                [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
                    .iter()
                    .map(|&(x, y)| {
                        let (c, s) = (math::cos(rot), math::sin(rot));
                        Point2::new(c * x - s * y, s * x + c * y)
                    })
                    .collect()
            }
            ShapeFamily::Hexagon => ring(6, &|_| 1.0, 0.0),
            ShapeFamily::Star => ring(10, &|i| if i % 2 == 0 { 1.0 } else { 0.45 }, up),
        }
    }
}

/// Family landmarks: vertices, centroid, then points along every edge at
/// fractions 1/2, then 1/4 and 3/4, then odd eighths, and so on, truncated
/// to `k`.
pub fn landmarks(contour: &Polygon, k: usize) -> Vec<Point2> {
    let v = contour.vertices();
    let mut out: Vec<Point2> = v.to_vec();
    out.push(contour.centroid());
    let mut denom = 2usize;
    while out.len() < k {
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            for num in (1..denom).step_by(2) {
                let t = num as f64 / denom as f64;
                out.push(Point2::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t));
            }
        }
        denom *= 2;
    }
    out.truncate(k);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub point: Point2,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub class: usize,
    pub bbox: BoxXYXY,
    pub contour: Polygon,
    pub keypoints: Vec<Keypoint>,
}

impl InstanceAnnotation {
    /// Checks the annotation invariants: clockwise contour inside the box,
    /// box equal to the contour extremes, visible keypoints inside the box.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        const TOL: f64 = 1e-6;
        if self.class >= num_classes {
            return Err(Error::contract(format!("class {} outside {num_classes} classes", self.class)));
        }
        if !self.contour.is_clockwise() {
            return Err(Error::contract("contour is not clockwise"));
        }
        let ext = box_from_points(&PointSet::new(self.contour.vertices().to_vec())?)?;
        let diff = ext
            .to_array()
            .iter()
            .zip(self.bbox.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > TOL {
            return Err(Error::contract(format!("box {:?} differs from contour extremes {ext:?}", self.bbox)));
        }
        let grown = BoxXYXY {
            x1: self.bbox.x1 - TOL,
            y1: self.bbox.y1 - TOL,
            x2: self.bbox.x2 + TOL,
            y2: self.bbox.y2 + TOL,
        };
        if self.keypoints.iter().any(|k| k.visible && !grown.contains(k.point)) {
            return Err(Error::contract("visible keypoint outside the box"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Dataset seed the scene was generated from.
    pub seed: u64,
    pub index: u64,
    /// `(h, w)` in pixels.
    pub extents: (usize, usize),
    pub instances: Vec<InstanceAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub scenes: usize,
    /// `(h, w)` in pixels; both divisible by the backbone stride.
    pub extents: (usize, usize),
    /// Uses the first `classes` shape families.
    pub classes: usize,
    /// Inclusive instance count range per scene, within 1..=4.
    pub instances: (usize, usize),
    /// Inclusive range of the outline diameter in pixels.
    pub size: (f64, f64),
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
    pub keypoints: usize,
    pub occlusion: f64,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Multi-instance scenes for the instance tasks.
    pub fn instances(scenes: usize, seed: u64) -> Self {
        DatasetSpec {
            scenes,
            extents: (64, 64),
            classes: 4,
            instances: (1, 4),
            size: (16.0, 28.0),
            rotation: 0.2,
            keypoints: 17,
            occlusion: 0.1,
            noise: 0.05,
            seed,
        }
    }

    /// One larger shape per scene, for classification.
    pub fn classification(scenes: usize, seed: u64) -> Self {
        DatasetSpec {
            instances: (1, 1),
            size: (28.0, 48.0),
            ..Self::instances(scenes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.instances;
        if self.scenes == 0 || self.extents.0 == 0 || self.extents.1 == 0 || self.keypoints == 0 {
            return Err(Error::config("scene count, extents and keypoints must be positive"));
        }
        if self.classes == 0 || self.classes > ShapeFamily::ALL.len() {
            return Err(Error::config(format!("classes must be in 1..=4, got {}", self.classes)));
        }
        if lo == 0 || lo > hi || hi > 4 {
            return Err(Error::config(format!("instance range {lo}..={hi} must lie in 1..=4")));
        }
        let min_ext = self.extents.0.min(self.extents.1) as f64;
        if !(self.size.0 > 2.0 && self.size.0 <= self.size.1 && self.size.1 < min_ext) {
            return Err(Error::config(format!("size range {:?} invalid for extents {:?}", self.size, self.extents)));
        }
        if !(0.0..=1.0).contains(&self.occlusion) || !(self.noise >= 0.0) || !(self.rotation >= 0.0) {
            return Err(Error::config("occlusion must be in [0, 1]; noise and rotation non-negative"));
        }
        Ok(())
    }
}

/// Scene `index` of the dataset; a pure function of `(spec, index)`.
pub fn generate_scene(spec: &DatasetSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    if index >= spec.scenes as u64 {
        return Err(Error::contract(format!("scene {index} of {}", spec.scenes)));
    }
    let mut rng = rng_for(spec.seed, mix(index));
    let (h, w) = (spec.extents.0 as f64, spec.extents.1 as f64);
    let target = rng.random_range(spec.instances.0..=spec.instances.1);
    let mut instances: Vec<InstanceAnnotation> = Vec::with_capacity(target);
    for _ in 0..MAX_PLACEMENTS {
        if instances.len() == target {
            break;
        }
        let family = ShapeFamily::ALL[rng.random_range(0..spec.classes)];
        let radius = rng.random_range(spec.size.0..=spec.size.1) / 2.0;
        let aspect = rng.random_range(0.6..1.0);
        let rot = if spec.rotation > 0.0 { rng.random_range(-spec.rotation..spec.rotation) } else { 0.0 };
        let unit = family.outline(aspect, rot);
        // keep a one-pixel margin so shapes stay inside the raster
        let cx = rng.random_range(radius + 1.0..(w - radius - 1.0).max(radius + 1.0 + 1e-9));
        let cy = rng.random_range(radius + 1.0..(h - radius - 1.0).max(radius + 1.0 + 1e-9));
        let contour = Polygon::new(unit.iter().map(|p| Point2::new(cx + radius * p.x, cy + radius * p.y)).collect())?;
        let bbox = contour.bounding_box();
        if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > w - 1.0 || bbox.y2 > h - 1.0 {
            continue;
        }
        if instances.iter().any(|o| box_iou(&o.bbox, &bbox) >= 0.3) {
            continue;
        }
        let keypoints = landmarks(&contour, spec.keypoints)
            .into_iter()
            .map(|point| Keypoint {
                point,
                visible: !rng.random_bool(spec.occlusion),
            })
            .collect();
        instances.push(InstanceAnnotation {
            class: family.class(),
            bbox,
            contour,
            keypoints,
        });
    }
    if instances.is_empty() {
        return Err(Error::degenerate(format!("could not place any instance in scene {index}")));
    }
    Ok(Scene {
        seed: spec.seed,
        index,
        extents: spec.extents,
        instances,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    (0..spec.scenes as u64).map(|i| generate_scene(spec, i)).collect()
}

/// Fill colour of each class.
pub fn class_color(class: usize) -> [f64; IN_CHANNELS] {
    const COLORS: [[f64; 3]; 4] = [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0], [0.9, 0.9, 0.1]];
    COLORS[class % COLORS.len()]
}

/// `[h, w, 3]` raster: class-coloured polygon fills, additive where shapes
/// overlap, plus Gaussian noise of standard deviation `noise` seeded by the
/// scene.
pub fn rasterize_scene(scene: &Scene, noise: f64) -> Result<Tensor> {
    let (h, w) = scene.extents;
    let mut data = vec![0.0; h * w * IN_CHANNELS];
    for inst in &scene.instances {
        let col = class_color(inst.class);
        let b = inst.bbox;
        let (u0, u1) = ((math::floor(b.x1).max(0.0)) as usize, (b.x2.min((w - 1) as f64)) as usize);
        let (v0, v1) = ((math::floor(b.y1).max(0.0)) as usize, (b.y2.min((h - 1) as f64)) as usize);
        for v in v0..=v1 {
            for u in u0..=u1 {
                if inst.contour.contains(Point2::new(u as f64, v as f64)) {
                    let px = &mut data[(v * w + u) * IN_CHANNELS..(v * w + u + 1) * IN_CHANNELS];
                    px.iter_mut().zip(col).for_each(|(p, c)| *p += c);
                }
            }
        }
    }
    if noise > 0.0 {
        let mut rng = rng_for(scene.seed, mix(scene.index) ^ 0x7261_7374);
        let normal = Normal::new(0.0, noise).map_err(|e| Error::config(format!("noise: {e}")))?;
        data.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
    }
    Tensor::new(&[h, w, IN_CHANNELS], data)
}

/// Stacks scene rasters into a `[b, h, w, 3]` batch.
pub fn raster_batch(scenes: &[Scene], noise: f64) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| Error::contract("empty scene batch"))?;
    let (h, w) = first.extents;
    let mut data = Vec::with_capacity(scenes.len() * h * w * IN_CHANNELS);
    for s in scenes {
        if s.extents != first.extents {
            return Err(Error::contract("scenes in a batch must share extents"));
        }
        data.extend_from_slice(rasterize_scene(s, noise)?.data());
    }
    Tensor::new(&[scenes.len(), h, w, IN_CHANNELS], data)
}
