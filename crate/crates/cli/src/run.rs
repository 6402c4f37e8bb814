//! Training, evaluation and gradient-check drivers behind the subcommands.

use std::path::{Path, PathBuf};

use log::{debug, info};
use unihead_core::head::Task;
use unihead_core::metrics::EvalReport;
use unihead_core::train::{check_compatible, run_gradcheck as core_gradcheck, EpochLog, GradcheckOutcome, GradcheckSpec, Trainer};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::read_dataset;
use crate::error::{CliError, Result};
use crate::report::{write_loss_curve, write_report};
use crate::svg::write_overlays;

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub curve: Vec<EpochLog>,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| CliError::Config("no dataset path given".into()))
}

/// Trains on the configured dataset and writes `loss_curve.csv`,
/// `checkpoint/`, `report.json` and `report.csv` into the output directory.
pub fn run_train(cfg: &RunConfig, svg: Option<&Path>) -> Result<TrainSummary> {
    let train_cfg = cfg.train_config()?;
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::Config("no output directory given".into()))?;
    let scenes = read_dataset(dataset_path(cfg)?)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let mut trainer = Trainer::new(train_cfg, &scenes)?;
    info!(
        "training {} on {} scenes for {} epochs ({} parameters)",
        trainer.cfg.head.task.name(),
        scenes.len(),
        trainer.cfg.epochs,
        trainer.params.num_coordinates()
    );
    let mut curve = Vec::with_capacity(trainer.cfg.epochs as usize);
    while trainer.epoch < trainer.cfg.epochs {
        let log = trainer.run_epoch()?;
        debug!("epoch {} lr {:e} loss {:.6}", log.epoch, log.lr, log.loss);
        curve.push(log);
    }
    let report = trainer.evaluate()?;
    write_loss_curve(&curve, &out.join("loss_curve.csv"))?;
    let ckpt = out.join("checkpoint");
    checkpoint::save(&ckpt, trainer.cfg.head.task.name(), trainer.epoch, &trainer.params, &trainer.state)?;
    write_report(&report, &out)?;
    if let Some(dir) = svg {
        write_overlays(dir, &scenes, &trainer.predictions()?)?;
    }
    Ok(TrainSummary {
        curve,
        report,
        checkpoint: ckpt,
    })
}

/// Evaluates a checkpoint on the configured dataset.
pub fn run_eval(cfg: &RunConfig, ckpt_dir: &Path, svg: Option<&Path>) -> Result<EvalReport> {
    let train_cfg = cfg.train_config()?;
    let ckpt = checkpoint::load(ckpt_dir)?;
    let task = train_cfg.head.task;
    if ckpt.task != task.name() {
        return Err(CliError::Version {
            path: ckpt_dir.into(),
            msg: format!("checkpoint is for task `{}`, config for `{}`", ckpt.task, task.name()),
        });
    }
    let scenes = read_dataset(dataset_path(cfg)?)?;
    let mut trainer = Trainer::new(train_cfg, &scenes)?;
    check_compatible(&trainer.params, &ckpt.params).map_err(|e| CliError::Version {
        path: ckpt_dir.into(),
        msg: e.to_string(),
    })?;
    trainer.params = ckpt.params;
    let report = trainer.evaluate()?;
    if let Some(dir) = svg {
        write_overlays(dir, &scenes, &trainer.predictions()?)?;
    }
    Ok(report)
}

pub const ALL_TASKS: [Task; 4] = [Task::Classification, Task::Detection, Task::Segmentation, Task::Pose];

/// End-to-end gradient check of every task.
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradcheckOutcome>> {
    ALL_TASKS
        .iter()
        .map(|&t| core_gradcheck(&GradcheckSpec::new(t, seed)).map_err(CliError::from))
        .collect()
}
