//! Per-scene SVG overlays: ground truth in green, predictions in red.

use std::fmt::Write as _;
use std::path::Path;

use unihead_core::geometry::{BoxXYXY, Point2};
use unihead_core::metrics::{PredGeometry, Prediction};
use unihead_core::synth::Scene;

use crate::error::{CliError, Result};

const GT: &str = "#2a9d3a";
const PRED: &str = "#d62828";

fn rect(out: &mut String, b: &BoxXYXY, color: &str) {
    let _ = writeln!(
        out,
        r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="{color}" stroke-width="0.4"/>"#,
        b.x1,
        b.y1,
        b.width(),
        b.height()
    );
}

fn poly(out: &mut String, pts: &[Point2], color: &str) {
    let list: Vec<String> = pts.iter().map(|p| format!("{:.3},{:.3}", p.x, p.y)).collect();
    let _ = writeln!(
        out,
        r#"<polygon points="{}" fill="none" stroke="{color}" stroke-width="0.4"/>"#,
        list.join(" ")
    );
}

fn dots(out: &mut String, pts: &[Point2], color: &str, r: f64) {
    for p in pts {
        let _ = writeln!(out, r#"<circle cx="{:.3}" cy="{:.3}" r="{r}" fill="{color}"/>"#, p.x, p.y);
    }
}

/// SVG text for one scene. Only predictions trained against a gt or scoring
/// at least 0.5 are drawn.
pub fn scene_svg(scene: &Scene, preds: &[&Prediction]) -> String {
    let (h, w) = scene.extents;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{}" height="{}">"#,
        w * 8,
        h * 8
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for inst in &scene.instances {
        rect(&mut out, &inst.bbox, GT);
        poly(&mut out, inst.contour.vertices(), GT);
        let vis: Vec<Point2> = inst.keypoints.iter().filter(|k| k.visible).map(|k| k.point).collect();
        dots(&mut out, &vis, GT, 0.4);
    }
    for p in preds.iter().filter(|p| p.assigned_gt.is_some() || p.score >= 0.5) {
        match &p.geometry {
            PredGeometry::None => {}
            PredGeometry::Box(b) => rect(&mut out, b, PRED),
            PredGeometry::Contour(v) => {
                poly(&mut out, v, PRED);
                dots(&mut out, v, PRED, 0.3);
            }
            PredGeometry::Keypoints(v) => dots(&mut out, v, PRED, 0.3),
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_overlays(dir: &Path, scenes: &[Scene], preds: &[Prediction]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        let mine: Vec<&Prediction> = preds.iter().filter(|p| p.scene == i).collect();
        let p = dir.join(format!("scene_{i:04}.svg"));
        std::fs::write(&p, scene_svg(s, &mine)).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}
