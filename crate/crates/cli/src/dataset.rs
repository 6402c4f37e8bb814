//! JSON-lines scene files. Rasters are never stored; they are regenerated
//! from each scene's seed and index.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unihead_core::geometry::{BoxXYXY, Point2, Polygon};
use unihead_core::synth::{InstanceAnnotation, Keypoint, Scene};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Upper bound on class ids accepted on read; the model checks the real
/// class count when a run is prepared.
const MAX_CLASSES: usize = 1 << 16;

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    v: u32,
    seed: u64,
    index: u64,
    extents: [usize; 2],
    instances: Vec<InstanceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    contour: Vec<[f64; 2]>,
    keypoints: Vec<[f64; 3]>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            v: SCHEMA_VERSION,
            seed: s.seed,
            index: s.index,
            extents: [s.extents.0, s.extents.1],
            instances: s
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    class: i.class,
                    bbox: i.bbox.to_array(),
                    contour: i.contour.vertices().iter().map(|p| [p.x, p.y]).collect(),
                    keypoints: i
                        .keypoints
                        .iter()
                        .map(|k| [k.point.x, k.point.y, if k.visible { 1.0 } else { 0.0 }])
                        .collect(),
                })
                .collect(),
        }
    }
}

fn to_scene(r: SceneRecord) -> unihead_core::Result<Scene> {
    let instances = r
        .instances
        .into_iter()
        .map(|i| {
            let [x1, y1, x2, y2] = i.bbox;
            let inst = InstanceAnnotation {
                class: i.class,
                bbox: BoxXYXY::new(x1, y1, x2, y2)?,
                contour: Polygon::new(i.contour.iter().map(|p| Point2::new(p[0], p[1])).collect())?,
                keypoints: i
                    .keypoints
                    .iter()
                    .map(|k| Keypoint {
                        point: Point2::new(k[0], k[1]),
                        visible: k[2] > 0.0,
                    })
                    .collect(),
            };
            inst.validate(MAX_CLASSES)?;
            Ok(inst)
        })
        .collect::<unihead_core::Result<Vec<_>>>()?;
    Ok(Scene {
        seed: r.seed,
        index: r.index,
        extents: (r.extents[0], r.extents[1]),
        instances,
    })
}

pub fn write_dataset(scenes: &[Scene], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(&SceneRecord::from(s)).expect("scene records always serialize");
        writeln!(w, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads every scene; blank lines are skipped and unknown fields ignored.
pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.into(),
            line: n,
            msg: e.to_string(),
        })?;
        match value.get("v").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(CliError::Version {
                    path: path.into(),
                    msg: format!("line {n} has schema version {v}, expected {SCHEMA_VERSION}"),
                })
            }
            None => {
                return Err(CliError::Parse {
                    path: path.into(),
                    line: n,
                    msg: "missing schema version `v`".into(),
                })
            }
        }
        let record: SceneRecord = serde_json::from_value(value).map_err(|e| CliError::Parse {
            path: path.into(),
            line: n,
            msg: e.to_string(),
        })?;
        let scene = to_scene(record).map_err(|e| CliError::Parse {
            path: path.into(),
            line: n,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}
