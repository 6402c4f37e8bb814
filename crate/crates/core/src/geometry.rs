//! Plain-value geometry: points, boxes, polygons and the per-task point
//! initialization.
//!
//! All coordinates are feature-map cells unless a caller says otherwise. The
//! image frame has y growing downward, and "clockwise" means a positive
//! shoelace area in that frame.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::bilinear_tap;
use crate::error::{Error, Result};
use crate::head::Task;
use crate::math;
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        math::hypot(self.x - other.x, self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

/// `K ≥ 1` ordered points; index `i` is bound to offset generator `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Point2>,
}

impl PointSet {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("a point set needs at least one point"));
        }
        Ok(PointSet { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::contract(format!("box ({x1}, {y1}, {x2}, {y2}) has negative extent")));
        }
        Ok(BoxXYXY { x1, y1, x2, y2 })
    }

    pub fn from_center(center: Point2, w: f64, h: f64) -> Result<Self> {
        Self::new(center.x - w / 2.0, center.y - h / 2.0, center.x + w / 2.0, center.y + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn scaled(&self, f: f64) -> BoxXYXY {
        BoxXYXY {
            x1: self.x1 * f,
            y1: self.y1 * f,
            x2: self.x2 * f,
            y2: self.y2 * f,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Closed polygon with at least three vertices and no repeated neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::contract(format!("polygon has {} vertices, needs 3", vertices.len())));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("polygon vertex"));
        }
        let n = vertices.len();
        if (0..n).any(|i| vertices[i] == vertices[(i + 1) % n]) {
            return Err(Error::contract("polygon has consecutive duplicate vertices"));
        }
        Ok(Polygon { vertices })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Half the shoelace sum; positive for clockwise order with y downward.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut s = 0.0;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            s += a.x * b.y - b.x * a.y;
        }
        s / 2.0
    }

    pub fn is_clockwise(&self) -> bool {
        self.signed_area() > 0.0
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    /// Edges `(v_i, v_{i+1})`, the last one closing the loop.
    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Euclidean distance from `p` to the nearest boundary point.
    pub fn distance_to_boundary(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> BoxXYXY {
        let ps = PointSet {
            points: self.vertices.clone(),
        };
        box_from_points(&ps).expect("polygon is nonempty")
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len();
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            let c = a.x * b.y - b.x * a.y;
            cx += (a.x + b.x) * c;
            cy += (a.y + b.y) * c;
        }
        let k = 6.0 * self.signed_area();
        Point2::new(cx / k, cy / k)
    }

    fn rotated(&self, start: usize) -> Polygon {
        let n = self.vertices.len();
        Polygon {
            vertices: (0..n).map(|i| self.vertices[(start + i) % n]).collect(),
        }
    }
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(a.lerp(b, t))
}

/// Per-candidate input to the head.
///
/// The context feature is kept as the set of feature-map points whose
/// bilinear samples are averaged to form it, so the head can differentiate
/// through it into the backbone. [`AnchorContext::context_feature`] computes
/// the value directly.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorContext {
    pub anchor: Point2,
    pub scale: (f64, f64),
    pub context_points: Vec<Point2>,
}

impl AnchorContext {
    pub fn new(anchor: Point2, scale: (f64, f64), context_points: Vec<Point2>) -> Result<Self> {
        if !(scale.0 > 0.0 && scale.1 > 0.0) {
            return Err(Error::contract(format!("anchor scale {scale:?} must be positive")));
        }
        if context_points.is_empty() {
            return Err(Error::contract("anchor context needs at least one sampling point"));
        }
        if !anchor.is_finite() || context_points.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("anchor context"));
        }
        Ok(AnchorContext {
            anchor,
            scale,
            context_points,
        })
    }

    /// Mean of bilinear samples at the context points of an `[h,w,c]` map.
    pub fn context_feature(&self, fmap: &Tensor) -> Result<Tensor> {
        let c = map_dims(fmap)?.2;
        let mut acc = alloc::vec![0.0; c];
        for &p in &self.context_points {
            for (a, v) in acc.iter_mut().zip(bilinear_sample(fmap, p)?) {
                *a += v;
            }
        }
        let n = self.context_points.len() as f64;
        Tensor::new(&[c], acc.into_iter().map(|v| v / n).collect())
    }
}

/// `P_i = A + s ⊙ Δ_i`.
pub fn scatter_points(ctx: &AnchorContext, deltas: &[Point2]) -> Result<PointSet> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::numeric("scatter_points delta"));
    }
    let (sx, sy) = ctx.scale;
    PointSet::new(
        deltas
            .iter()
            .map(|d| Point2::new(ctx.anchor.x + sx * d.x, ctx.anchor.y + sy * d.y))
            .collect(),
    )
}

/// `P′_i = P_i + s ⊙ o_i`.
pub fn refine_points(points: &PointSet, offsets: &[Point2], scale: (f64, f64)) -> Result<PointSet> {
    if offsets.len() != points.len() {
        return Err(Error::contract(format!(
            "{} offsets for {} points",
            offsets.len(),
            points.len()
        )));
    }
    PointSet::new(
        points
            .points
            .iter()
            .zip(offsets)
            .map(|(p, o)| Point2::new(p.x + scale.0 * o.x, p.y + scale.1 * o.y))
            .collect(),
    )
}

/// Tight box around the points.
pub fn box_from_points(points: &PointSet) -> Result<BoxXYXY> {
    let first = *points
        .points
        .first()
        .ok_or_else(|| Error::contract("box of an empty point set"))?;
    let mut b = BoxXYXY {
        x1: first.x,
        y1: first.y,
        x2: first.x,
        y2: first.y,
    };
    for p in &points.points[1..] {
        b.x1 = b.x1.min(p.x);
        b.y1 = b.y1.min(p.y);
        b.x2 = b.x2.max(p.x);
        b.y2 = b.y2.max(p.y);
    }
    Ok(b)
}

fn map_dims(fmap: &Tensor) -> Result<(usize, usize, usize)> {
    match *fmap.shape() {
        [h, w, c] if h >= 2 && w >= 2 => Ok((h, w, c)),
        _ => Err(Error::shape(
            "bilinear_sample",
            format!("map {:?} must be [h,w,c] with h, w >= 2", fmap.shape()),
        )),
    }
}

/// Bilinear read of an `[h,w,c]` map at `p = (x, y)`, clamped to the map.
pub fn bilinear_sample(fmap: &Tensor, p: Point2) -> Result<Vec<f64>> {
    let (h, w, c) = map_dims(fmap)?;
    if !p.is_finite() {
        return Err(Error::numeric("bilinear_sample point"));
    }
    let tap = bilinear_tap(h, w, p.x, p.y);
    let d = fmap.data();
    Ok((0..c)
        .map(|ch| {
            tap.corners
                .iter()
                .zip(tap.weights)
                .map(|(&k, wt)| wt * d[k * c + ch])
                .sum()
        })
        .collect())
}

/// Derivatives of [`bilinear_sample`] with respect to `x` and `y`.
///
/// Zero along a clamped axis; on a grid line the slope of the cell to the
/// right (below) is used, except at the last row or column.
pub fn bilinear_sample_grad(fmap: &Tensor, p: Point2) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w, c) = map_dims(fmap)?;
    let tap = bilinear_tap(h, w, p.x, p.y);
    let d = fmap.data();
    let [c00, c01, c10, c11] = tap.corners;
    let mut gx = alloc::vec![0.0; c];
    let mut gy = alloc::vec![0.0; c];
    for ch in 0..c {
        let (v00, v01, v10, v11) = (d[c00 * c + ch], d[c01 * c + ch], d[c10 * c + ch], d[c11 * c + ch]);
        if tap.inside_x {
            gx[ch] = (1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10);
        }
        if tap.inside_y {
            gy[ch] = (1.0 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01);
        }
    }
    Ok((gx, gy))
}

/// Returns the polygon in clockwise order, reversing it if needed.
pub fn orient_clockwise(poly: &Polygon) -> Result<Polygon> {
    let a = poly.signed_area();
    if a == 0.0 || !a.is_finite() {
        return Err(Error::degenerate("polygon has zero area"));
    }
    if a > 0.0 {
        return Ok(poly.clone());
    }
    let mut v = poly.vertices.clone();
    v.reverse();
    Ok(Polygon { vertices: v })
}

/// Brings a polygon to exactly `k` vertices.
///
/// With fewer vertices the longest edge is split at its midpoint, with more
/// one endpoint of the shortest edge is dropped (the one whose removal
/// shortens the perimeter least). Near-ties within `1e-9 ×` perimeter go to
/// the lowest edge index, and to `v_i` for edge `(v_i, v_{i+1})`.
pub fn resample_contour(poly: &Polygon, k: usize) -> Result<Polygon> {
    if k < 3 {
        return Err(Error::contract(format!("cannot resample a contour to {k} vertices")));
    }
    let tol = 1e-9 * poly.perimeter();
    let mut v = poly.vertices.clone();
    while v.len() < k {
        let n = v.len();
        let mut best = 0;
        let mut best_len = f64::NEG_INFINITY;
        for i in 0..n {
            let len = v[i].dist(v[(i + 1) % n]);
            if len > best_len + tol {
                best = i;
                best_len = len;
            }
        }
        let mid = v[best].lerp(v[(best + 1) % n], 0.5);
        v.insert(best + 1, mid);
    }
    while v.len() > k {
        let n = v.len();
        let mut best = 0;
        let mut best_len = f64::INFINITY;
        for i in 0..n {
            let len = v[i].dist(v[(i + 1) % n]);
            if len < best_len - tol {
                best = i;
                best_len = len;
            }
        }
        let cost = |j: usize| {
            let (prev, cur, next) = (v[(j + n - 1) % n], v[j], v[(j + 1) % n]);
            prev.dist(cur) + cur.dist(next) - prev.dist(next)
        };
        let second = (best + 1) % n;
        let drop = if cost(second) < cost(best) - tol { second } else { best };
        v.remove(drop);
    }
    Ok(Polygon { vertices: v })
}

/// Index of the vertex whose direction from `anchor` is closest to +x.
/// Equal angles prefer the positive (downward) side, then the farther vertex,
/// then the lower index.
fn start_index(vertices: &[Point2], anchor: Point2) -> Result<usize> {
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (i, p) in vertices.iter().enumerate() {
        let (dx, dy) = (p.x - anchor.x, p.y - anchor.y);
        let r = math::hypot(dx, dy);
        if r == 0.0 {
            continue;
        }
        let theta = math::atan2(dy, dx);
        let key = (theta.abs(), if theta >= 0.0 { 0.0 } else { 1.0 }, -r);
        let better = match best {
            None => true,
            Some((_, a, s, d)) => {
                let eps = 1e-12;
                if key.0 < a - eps {
                    true
                } else if key.0 > a + eps {
                    false
                } else {
                    (key.1, key.2) < (s, d)
                }
            }
        };
        if better {
            best = Some((i, key.0, key.1, key.2));
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::degenerate("anchor coincides with every contour vertex"))
}

/// Ordered contour targets for the `k` dispersible points.
///
/// The contour is oriented clockwise, rotated to its canonical start vertex,
/// resampled to `k` vertices and rotated again so target 0 is the vertex
/// whose direction from `anchor` is closest to +x. The first rotation makes
/// the resampling tie-breaks independent of how the input was labelled.
pub fn contour_targets(gt: &Polygon, k: usize, anchor: Point2) -> Result<PointSet> {
    let cw = orient_clockwise(gt)?;
    let canon = cw.rotated(start_index(&cw.vertices, anchor)?);
    let resampled = resample_contour(&canon, k)?;
    let out = resampled.rotated(start_index(&resampled.vertices, anchor)?);
    PointSet::new(out.vertices)
}

/// Initial `(Δx, Δy)` for each of the `k` points.
///
/// * detection: four equal groups at left, right, top and bottom box edges;
/// * segmentation: uniform clockwise walk along the perimeter of
///   `[-0.5, 0.5]²`, starting at `(0.5, 0)`;
/// * pose: `mean_keypoints` (mean keypoint offsets from the box centre,
///   already divided by the mean instance extents);
/// * classification: uniform in `[-0.1, 0.1)` from `seed`.
pub fn initial_bias_table(task: Task, k: usize, mean_keypoints: Option<&[Point2]>, seed: u64) -> Result<Vec<Point2>> {
    if k == 0 {
        return Err(Error::contract("bias table for zero points"));
    }
    match task {
        Task::Detection => {
            if k % 4 != 0 {
                return Err(Error::contract(format!("detection needs K divisible by 4, got {k}")));
            }
            let sides = [
                Point2::new(-0.5, 0.0),
                Point2::new(0.5, 0.0),
                Point2::new(0.0, -0.5),
                Point2::new(0.0, 0.5),
            ];
            Ok(sides.iter().flat_map(|&p| core::iter::repeat_n(p, k / 4)).collect())
        }
        Task::Segmentation => Ok((0..k).map(|i| pseudo_box_point(4.0 * i as f64 / k as f64)).collect()),
        Task::Pose => {
            let stats = mean_keypoints.ok_or_else(|| Error::contract("pose bias table needs mean keypoints"))?;
            if stats.len() != k {
                return Err(Error::contract(format!("{} mean keypoints for K = {k}", stats.len())));
            }
            Ok(stats.to_vec())
        }
        Task::Classification => {
            let mut rng = rng_for(seed, 0x6269_6173);
            Ok((0..k)
                .map(|_| Point2::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
                .collect())
        }
    }
}

/// Point at arc length `t ∈ [0, 4)` along the unit pseudo box, clockwise from
/// the right edge midpoint.
fn pseudo_box_point(t: f64) -> Point2 {
    let corners = [
        Point2::new(0.5, 0.0),
        Point2::new(0.5, 0.5),
        Point2::new(-0.5, 0.5),
        Point2::new(-0.5, -0.5),
        Point2::new(0.5, -0.5),
        Point2::new(0.5, 0.0),
    ];
    let lengths = [0.5, 1.0, 1.0, 1.0, 0.5];
    let mut rest = t;
    for (i, &len) in lengths.iter().enumerate() {
        if rest < len || i == lengths.len() - 1 {
            return corners[i].lerp(corners[i + 1], rest / len);
        }
        rest -= len;
    }
    unreachable!()
}

/// Mean keypoint offset from the box centre divided by the mean box extents,
/// over instances given as `(box, keypoints)`.
pub fn mean_keypoint_layout<'a, I>(instances: I, k: usize) -> Result<Vec<Point2>>
where
    I: IntoIterator<Item = (BoxXYXY, &'a [Point2])>,
{
    let mut sum = alloc::vec![Point2::default(); k];
    let (mut sw, mut sh, mut n) = (0.0, 0.0, 0usize);
    for (b, kps) in instances {
        if kps.len() != k {
            return Err(Error::contract(format!("instance has {} keypoints, expected {k}", kps.len())));
        }
        let c = b.center();
        for (s, p) in sum.iter_mut().zip(kps) {
            s.x += p.x - c.x;
            s.y += p.y - c.y;
        }
        sw += b.width();
        sh += b.height();
        n += 1;
    }
    if n == 0 || sw <= 0.0 || sh <= 0.0 {
        return Err(Error::degenerate("no instances with positive extent for keypoint statistics"));
    }
    let (mw, mh, nf) = (sw / n as f64, sh / n as f64, n as f64);
    Ok(sum.into_iter().map(|s| Point2::new(s.x / nf / mw, s.y / nf / mh)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn poly(v: &[(f64, f64)]) -> Polygon {
        Polygon::new(v.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
    }

    fn ctx(ax: f64, ay: f64, sx: f64, sy: f64) -> AnchorContext {
        AnchorContext::new(Point2::new(ax, ay), (sx, sy), vec![Point2::new(ax, ay)]).unwrap()
    }

    #[test]
    fn scatter_examples() {
        let c = ctx(10.0, 20.0, 4.0, 8.0);
        let p = scatter_points(&c, &[Point2::new(0.5, -0.25), Point2::default()]).unwrap();
        assert_eq!(p.points(), &[Point2::new(12.0, 18.0), Point2::new(10.0, 20.0)]);
        assert!(scatter_points(&c, &[Point2::new(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn refine_examples() {
        let p = PointSet::new(vec![Point2::new(5.0, 5.0)]).unwrap();
        let r = refine_points(&p, &[Point2::new(0.1, 0.2)], (10.0, 10.0)).unwrap();
        assert_eq!(r.points()[0], Point2::new(6.0, 7.0));
        let z = refine_points(&p, &[Point2::default()], (3.0, 4.0)).unwrap();
        assert_eq!(z, p);
        assert!(matches!(refine_points(&p, &[], (1.0, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn box_examples() {
        let p = PointSet::new(vec![Point2::new(1.0, 2.0), Point2::new(3.0, 0.0), Point2::new(2.0, 5.0)]).unwrap();
        assert_eq!(box_from_points(&p).unwrap(), BoxXYXY::new(1.0, 0.0, 3.0, 5.0).unwrap());
        let s = PointSet::new(vec![Point2::new(4.0, 4.0)]).unwrap();
        assert_eq!(box_from_points(&s).unwrap().to_array(), [4.0; 4]);
        assert!(PointSet::new(vec![]).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let map = Tensor::new(&[5, 4, 1], (0..20).map(f64::from).collect()).unwrap();
        assert_eq!(bilinear_sample(&map, Point2::new(2.0, 3.0)).unwrap(), vec![14.0]);
        assert_eq!(bilinear_sample(&map, Point2::new(-5.0, -5.0)).unwrap(), vec![0.0]);
        let cell = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&cell, Point2::new(0.5, 0.5)).unwrap(), vec![1.5]);
    }

    #[test]
    fn orientation_examples() {
        let ccw = poly(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]);
        let cw = orient_clockwise(&ccw).unwrap();
        assert_eq!(cw.vertices(), &[
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, 0.0)
        ]);
        let tri = poly(&[(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)]);
        assert!(tri.is_clockwise());
        assert_eq!(orient_clockwise(&tri).unwrap(), tri);
        let flat = poly(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert!(matches!(orient_clockwise(&flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn resample_square_up_and_identity() {
        let sq = poly(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(resample_contour(&sq, 4).unwrap(), sq);
        let up = resample_contour(&sq, 8).unwrap();
        let expect = poly(&[
            (0.0, 0.0),
            (0.5, 0.0),
            (1.0, 0.0),
            (1.0, 0.5),
            (1.0, 1.0),
            (0.5, 1.0),
            (0.0, 1.0),
            (0.0, 0.5),
        ]);
        assert_eq!(up, expect);
        assert!(matches!(resample_contour(&sq, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn resample_pentagon_down_drops_first_vertex() {
        let pent: Vec<Point2> = (0..5)
            .map(|i| {
                let t = 2.0 * core::f64::consts::PI * i as f64 / 5.0;
                Point2::new(math::cos(t), math::sin(t))
            })
            .collect();
        let p = Polygon::new(pent.clone()).unwrap();
        let down = resample_contour(&p, 4).unwrap();
        assert_eq!(down.vertices(), &pent[1..]);
    }

    #[test]
    fn contour_targets_start_at_plus_x() {
        let diamond = poly(&[(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)]);
        let t = contour_targets(&diamond, 4, Point2::default()).unwrap();
        assert_eq!(t.points()[0], Point2::new(1.0, 0.0));
        assert_eq!(t.points()[1], Point2::new(0.0, 1.0));
        // axis-aligned square: the two right corners tie, the lower one wins
        let sq = poly(&[(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]);
        let t = contour_targets(&sq, 4, Point2::default()).unwrap();
        assert_eq!(t.points()[0], Point2::new(1.0, 1.0));
        let aligned = poly(&[(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]);
        assert_eq!(
            contour_targets(&aligned, 4, Point2::default()).unwrap().points(),
            aligned.vertices()
        );
        let tri = poly(&[(1.0, 1.0), (2.0, 1.0), (1.0, 2.0)]);
        assert!(contour_targets(&tri, 4, Point2::new(1.0, 1.0)).is_ok());
    }

    #[test]
    fn bias_tables() {
        let det = initial_bias_table(Task::Detection, 16, None, 0).unwrap();
        for (g, expect) in [(-0.5, 0.0), (0.5, 0.0), (0.0, -0.5), (0.0, 0.5)].iter().enumerate() {
            assert!(det[g * 4..g * 4 + 4].iter().all(|p| *p == Point2::new(expect.0, expect.1)));
        }
        assert!(matches!(initial_bias_table(Task::Detection, 6, None, 0), Err(Error::Contract(_))));
        let seg = initial_bias_table(Task::Segmentation, 4, None, 0).unwrap();
        assert_eq!(seg, vec![
            Point2::new(0.5, 0.0),
            Point2::new(0.0, 0.5),
            Point2::new(-0.5, 0.0),
            Point2::new(0.0, -0.5)
        ]);
        let cls = initial_bias_table(Task::Classification, 16, None, 3).unwrap();
        assert!(cls.iter().all(|p| p.x.abs() <= 0.1 && p.y.abs() <= 0.1));
        assert_eq!(cls, initial_bias_table(Task::Classification, 16, None, 3).unwrap());
        assert!(initial_bias_table(Task::Pose, 3, None, 0).is_err());
    }

    #[test]
    fn keypoint_layout_of_identical_instances() {
        let kps = [Point2::new(2.0, 3.0), Point2::new(6.0, 5.0)];
        let b1 = BoxXYXY::new(2.0, 3.0, 6.0, 7.0).unwrap();
        let shifted: Vec<Point2> = kps.iter().map(|p| Point2::new(p.x + 10.0, p.y)).collect();
        let b2 = BoxXYXY::new(12.0, 3.0, 16.0, 7.0).unwrap();
        let layout = mean_keypoint_layout([(b1, &kps[..]), (b2, &shifted[..])], 2).unwrap();
        assert_eq!(layout, vec![Point2::new(-0.5, -0.5), Point2::new(0.5, 0.0)]);
    }

    #[test]
    fn polygon_helpers() {
        let sq = poly(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]);
        assert_eq!(sq.signed_area(), 4.0);
        assert_eq!(sq.perimeter(), 8.0);
        assert_eq!(sq.centroid(), Point2::new(1.0, 1.0));
        assert!(sq.contains(Point2::new(1.0, 1.0)));
        assert!(!sq.contains(Point2::new(3.0, 1.0)));
        assert_eq!(sq.distance_to_boundary(Point2::new(1.0, 0.5)), 0.5);
        assert!(Polygon::new(vec![Point2::default(), Point2::default(), Point2::new(1.0, 0.0)]).is_err());
    }
}
