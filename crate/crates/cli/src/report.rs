//! Report and loss-curve files.

use std::path::Path;

use serde::Serialize;
use unihead_core::metrics::EvalReport;
use unihead_core::train::EpochLog;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportJson {
    pub task: String,
    pub top1: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_oks: Option<f64>,
    /// `null` when the dataset has no gt to match.
    pub ap: Option<f64>,
    pub scenes: Vec<SceneJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneJson {
    pub scene: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    pub true_positives: usize,
    pub mean_quality: Option<f64>,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        ReportJson {
            task: r.task.name().into(),
            top1: r.top1,
            mean_iou: r.mean_iou,
            mean_oks: r.mean_oks,
            ap: r.ap,
            scenes: r
                .rows
                .iter()
                .map(|s| SceneJson {
                    scene: s.scene,
                    num_gt: s.num_gt,
                    num_pred: s.num_pred,
                    true_positives: s.true_positives,
                    mean_quality: s.mean_quality,
                })
                .collect(),
        }
    }
}

pub fn report_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(&ReportJson::from(r)).expect("report serializes")
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Config(format!("{}: {other:?}", path.display())),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-scene rows as CSV.
pub fn write_report_csv(r: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["scene", "num_gt", "num_pred", "true_positives", "mean_quality"])
        .map_err(|e| csv_err(path, e))?;
    for s in &r.rows {
        w.write_record([
            s.scene.to_string(),
            s.num_gt.to_string(),
            s.num_pred.to_string(),
            s.true_positives.to_string(),
            opt(s.mean_quality),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_report(r: &EvalReport, dir: &Path) -> Result<()> {
    let p = dir.join("report.json");
    std::fs::write(&p, report_json(r)).map_err(|e| CliError::io(p, e))?;
    write_report_csv(r, &dir.join("report.csv"))
}

/// One row per epoch: epoch, lr, total loss, then each named part.
pub fn write_loss_curve(curve: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let names: Vec<String> = curve.first().map(|l| l.parts.iter().map(|p| p.0.clone()).collect()).unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "lr".into(), "loss".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for l in curve {
        let mut row = vec![l.epoch.to_string(), l.lr.to_string(), l.loss.to_string()];
        for n in &names {
            row.push(opt(l.parts.iter().find(|p| &p.0 == n).map(|p| p.1)));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
