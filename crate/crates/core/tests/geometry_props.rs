use proptest::prelude::*;
use unihead_core::geometry::*;
use unihead_core::Tensor;

fn pt() -> impl Strategy<Value = (f64, f64)> {
    (-50.0..50.0f64, -50.0..50.0f64)
}

/// Star-shaped simple polygon with random radii, optionally listed in reverse.
fn simple_polygon(min_n: usize, max_n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    (min_n..=max_n)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec((0.0..1.0f64, 0.5..5.0f64), n),
                any::<bool>(),
                (-10.0..10.0f64, -10.0..10.0f64),
            )
        })
        .prop_map(|(raw, reverse, (cx, cy))| {
            let n = raw.len();
            // evenly spread sectors with jitter keep the polygon simple
            let mut v: Vec<(f64, f64)> = raw
                .iter()
                .enumerate()
                .map(|(i, &(u, r))| {
                    let t = 2.0 * std::f64::consts::PI * (i as f64 + 0.8 * u) / n as f64;
                    (cx + r * t.cos(), cy + r * t.sin())
                })
                .collect();
            if reverse {
                v.reverse();
            }
            v
        })
}

fn to_poly(v: &[(f64, f64)]) -> Polygon {
    Polygon::new(v.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap()
}

fn shoelace(v: &[Point2]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            v[i].x * v[j].y - v[j].x * v[i].y
        })
        .sum::<f64>()
        / 2.0
}

fn seg_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    // closest point by projection, clamped to the segment
    let (ux, uy) = (b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * ux + (p.y - a.y) * uy) / (ux * ux + uy * uy)).clamp(0.0, 1.0);
    ((a.x + t * ux - p.x).powi(2) + (a.y + t * uy - p.y).powi(2)).sqrt()
}

fn boundary_dist(p: Point2, v: &[Point2]) -> f64 {
    (0..v.len())
        .map(|i| seg_dist(p, v[i], v[(i + 1) % v.len()]))
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn scatter_and_refine_are_affine(anchor in pt(), sx in 0.1..20.0f64, sy in 0.1..20.0f64,
                                     d in proptest::collection::vec(pt(), 1..20)) {
        let ctx = AnchorContext::new(Point2::new(anchor.0, anchor.1), (sx, sy), vec![Point2::default()]).unwrap();
        let deltas: Vec<Point2> = d.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        let p = scatter_points(&ctx, &deltas).unwrap();
        for (q, &(dx, dy)) in p.points().iter().zip(&d) {
            prop_assert_eq!(q.x, anchor.0 + sx * dx);
            prop_assert_eq!(q.y, anchor.1 + sy * dy);
        }
        let r = refine_points(&p, &deltas, (sx, sy)).unwrap();
        for ((q, base), &(dx, dy)) in r.points().iter().zip(p.points()).zip(&d) {
            prop_assert_eq!(q.x, base.x + sx * dx);
            prop_assert_eq!(q.y, base.y + sy * dy);
        }
        let unit = AnchorContext::new(Point2::default(), (1.0, 1.0), vec![Point2::default()]).unwrap();
        prop_assert_eq!(scatter_points(&unit, &deltas).unwrap().into_points(), deltas.clone());
        let zero = PointSet::new(vec![Point2::default(); deltas.len()]).unwrap();
        prop_assert_eq!(refine_points(&zero, &deltas, (1.0, 1.0)).unwrap().into_points(), deltas);
    }

    #[test]
    fn box_matches_scan_and_contains_points(v in proptest::collection::vec(pt(), 16)) {
        let ps = PointSet::new(v.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap();
        let b = box_from_points(&ps).unwrap();
        let mut scan = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for &(x, y) in &v {
            if x < scan[0] { scan[0] = x; }
            if y < scan[1] { scan[1] = y; }
            if x > scan[2] { scan[2] = x; }
            if y > scan[3] { scan[3] = y; }
        }
        prop_assert_eq!(b.to_array(), scan);
        prop_assert!(ps.points().iter().all(|&p| b.contains(p)));
    }

    #[test]
    fn bilinear_is_linear_on_cell_segments_and_has_matching_slope(
        data in proptest::collection::vec(-1.0..1.0f64, 4 * 5 * 2),
        cell in (0usize..4, 0usize..3),
        f in (1e-3..1.0 - 1e-3f64, 1e-3..1.0 - 1e-3f64),
        t in 0.0..1.0f64,
    ) {
        let map = Tensor::new(&[4, 5, 2], data).unwrap();
        let (x, y) = (cell.0 as f64 + f.0, cell.1 as f64 + f.1);
        // linear along x inside the cell
        let a = bilinear_sample(&map, Point2::new(cell.0 as f64, y)).unwrap();
        let b = bilinear_sample(&map, Point2::new(cell.0 as f64 + 1.0, y)).unwrap();
        let m = bilinear_sample(&map, Point2::new(cell.0 as f64 + t, y)).unwrap();
        for c in 0..2 {
            prop_assert!((m[c] - (a[c] + t * (b[c] - a[c]))).abs() < 1e-12);
        }
        // linear along y inside the cell
        let a = bilinear_sample(&map, Point2::new(x, cell.1 as f64)).unwrap();
        let b = bilinear_sample(&map, Point2::new(x, cell.1 as f64 + 1.0)).unwrap();
        let m = bilinear_sample(&map, Point2::new(x, cell.1 as f64 + t)).unwrap();
        for c in 0..2 {
            prop_assert!((m[c] - (a[c] + t * (b[c] - a[c]))).abs() < 1e-12);
        }
        let (gx, gy) = bilinear_sample_grad(&map, Point2::new(x, y)).unwrap();
        let eps = 1e-6;
        let fd = |dx: f64, dy: f64| {
            let up = bilinear_sample(&map, Point2::new(x + dx, y + dy)).unwrap();
            let dn = bilinear_sample(&map, Point2::new(x - dx, y - dy)).unwrap();
            up.iter().zip(&dn).map(|(u, d)| (u - d) / (2.0 * eps)).collect::<Vec<_>>()
        };
        for (g, n) in gx.iter().zip(fd(eps, 0.0)).chain(gy.iter().zip(fd(0.0, eps))) {
            prop_assert!((g - n).abs() < 1e-6, "{} vs {}", g, n);
        }
    }

    #[test]
    fn bilinear_is_continuous(data in proptest::collection::vec(-1.0..1.0f64, 3 * 3), p in (-1.0..3.0f64, -1.0..3.0f64)) {
        let map = Tensor::new(&[3, 3, 1], data).unwrap();
        let a = bilinear_sample(&map, Point2::new(p.0, p.1)).unwrap()[0];
        let b = bilinear_sample(&map, Point2::new(p.0 + 1e-9, p.1 - 1e-9)).unwrap()[0];
        prop_assert!((a - b).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn orient_clockwise_gives_positive_shoelace(v in simple_polygon(3, 12)) {
        let p = to_poly(&v);
        let cw = orient_clockwise(&p).unwrap();
        prop_assert!(shoelace(cw.vertices()) > 0.0);
        let mut sorted_in: Vec<_> = v.iter().map(|&(x, y)| (x.to_bits(), y.to_bits())).collect();
        let mut sorted_out: Vec<_> = cw.vertices().iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        sorted_in.sort();
        sorted_out.sort();
        prop_assert_eq!(sorted_in, sorted_out);
        prop_assert_eq!(orient_clockwise(&cw).unwrap(), cw);
    }

    #[test]
    fn resample_count_subset_and_boundary(v in simple_polygon(3, 40), k in 3usize..48) {
        let p = orient_clockwise(&to_poly(&v)).unwrap();
        let r = resample_contour(&p, k).unwrap();
        prop_assert_eq!(r.len(), k);
        if k <= p.len() {
            prop_assert!(r.vertices().iter().all(|q| p.vertices().contains(q)));
        } else {
            for &q in r.vertices() {
                prop_assert!(boundary_dist(q, p.vertices()) < 1e-9);
            }
        }
    }

    #[test]
    fn contour_targets_ignore_labelling(v in simple_polygon(3, 30), k in 3usize..40, shift in 0usize..30,
                                        anchor in (-1.0..1.0f64, -1.0..1.0f64)) {
        let p = to_poly(&v);
        let n = v.len();
        let rolled: Vec<(f64, f64)> = (0..n).map(|i| v[(i + shift) % n]).collect();
        let a = Point2::new(anchor.0, anchor.1);
        let t1 = contour_targets(&p, k, a).unwrap();
        let t2 = contour_targets(&to_poly(&rolled), k, a).unwrap();
        prop_assert_eq!(&t1, &t2);
        // the first target has the smallest absolute angle from +x
        let ang = |q: &Point2| (q.y - a.y).atan2(q.x - a.x).abs();
        let best = t1.points().iter().map(ang).fold(f64::INFINITY, f64::min);
        prop_assert!(ang(&t1.points()[0]) <= best + 1e-12);
        prop_assert!(shoelace(t1.points()) > 0.0);
    }
}

#[test]
fn segmentation_bias_walks_the_pseudo_box() {
    let k = 36;
    let b = initial_bias_table(unihead_core::head::Task::Segmentation, k, None, 0).unwrap();
    let sq = [Point2::new(-0.5, -0.5), Point2::new(0.5, -0.5), Point2::new(0.5, 0.5), Point2::new(-0.5, 0.5)];
    // oracle: arc length of each point measured clockwise from (0.5, 0)
    let arc = |p: Point2| -> f64 {
        if p.x == 0.5 && p.y >= 0.0 {
            p.y
        } else if p.y == 0.5 {
            0.5 + (0.5 - p.x)
        } else if p.x == -0.5 {
            1.5 + (0.5 - p.y)
        } else if p.y == -0.5 {
            2.5 + (p.x + 0.5)
        } else {
            3.5 + (p.y + 0.5)
        }
    };
    for (i, &p) in b.iter().enumerate() {
        assert!(boundary_dist(p, &sq) < 1e-12);
        assert!((arc(p) - 4.0 * i as f64 / k as f64).abs() < 1e-12, "{i}: {p:?}");
    }
    assert!(shoelace(&b) > 0.0);
}
