//! JSON run and dataset configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unihead_core::head::{DetLoss, HeadConfig, Task};
use unihead_core::optim::{AdamW, Schedule};
use unihead_core::synth::DatasetSpec;
use unihead_core::train::TrainConfig;

use crate::error::{CliError, Result};

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.into(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Head settings; anything left out keeps the task default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadOverrides {
    pub k: Option<usize>,
    pub l_cls: Option<usize>,
    pub l_loc: Option<usize>,
    pub channels: Option<usize>,
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub offset_hidden: Option<usize>,
    pub task_token: Option<bool>,
    pub det_loss: Option<DetLossName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetLossName {
    L1,
    Giou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamW::default();
        OptimizerConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant,
    Cosine,
    Step {
        milestones: Vec<u64>,
        #[serde(default = "default_factor")]
        factor: f64,
    },
}

fn default_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<String>,
    pub num_classes: usize,
    pub head: HeadOverrides,
    pub optimizer: OptimizerConfig,
    /// Cosine for classification and 9/13, 12/13 step decay otherwise when
    /// left out.
    pub schedule: Option<ScheduleConfig>,
    pub epochs: u64,
    /// Scenes per step; 0 is the whole dataset.
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub noise: f64,
    pub pool_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            num_classes: 4,
            head: HeadOverrides::default(),
            optimizer: OptimizerConfig::default(),
            schedule: None,
            epochs: 500,
            batch_size: 0,
            seed: 0,
            dataset: None,
            output: None,
            noise: 0.05,
            pool_grid: unihead_core::frameworks::DEFAULT_POOL_GRID,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn task(&self) -> Result<Task> {
        self.task
            .as_deref()
            .ok_or_else(|| CliError::Config("no task given".into()))?
            .parse()
            .map_err(CliError::Core)
    }

    /// Resolves defaults into the core training configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let task = self.task()?;
        let mut cfg = TrainConfig::new(task, self.num_classes, self.epochs);
        let h = &self.head;
        let d = HeadConfig::new(task, self.num_classes);
        cfg.head = HeadConfig {
            k: h.k.unwrap_or(d.k),
            l_cls: h.l_cls.unwrap_or(d.l_cls),
            l_loc: h.l_loc.unwrap_or(d.l_loc),
            channels: h.channels.unwrap_or(d.channels),
            width: h.width.unwrap_or(d.width),
            heads: h.heads.unwrap_or(d.heads),
            mlp_ratio: h.mlp_ratio.unwrap_or(d.mlp_ratio),
            offset_hidden: h.offset_hidden.unwrap_or(d.offset_hidden),
            task_token: h.task_token.unwrap_or(d.task_token),
            det_loss: match h.det_loss {
                Some(DetLossName::Giou) => DetLoss::Giou,
                Some(DetLossName::L1) | None => DetLoss::L1,
            },
            seed: self.seed,
            ..d
        };
        let o = &self.optimizer;
        cfg.optimizer = AdamW {
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        };
        if let Some(s) = &self.schedule {
            cfg.schedule = match s {
                ScheduleConfig::Constant => Schedule::Constant,
                ScheduleConfig::Cosine => Schedule::Cosine { total: self.epochs },
                ScheduleConfig::Step { milestones, factor } => Schedule::Step {
                    milestones: milestones.clone(),
                    factor: *factor,
                },
            };
        }
        cfg.batch_size = self.batch_size;
        cfg.noise = self.noise;
        cfg.pool_grid = self.pool_grid;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dataset generator settings, defaulting to the multi-instance preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecFile {
    /// `instances` or `classification`.
    pub preset: String,
    pub scenes: usize,
    pub seed: u64,
    pub extents: Option<[usize; 2]>,
    pub classes: Option<usize>,
    pub instances: Option<[usize; 2]>,
    pub size: Option<[f64; 2]>,
    pub rotation: Option<f64>,
    pub keypoints: Option<usize>,
    pub occlusion: Option<f64>,
}

impl Default for SpecFile {
    fn default() -> Self {
        SpecFile {
            preset: "instances".into(),
            scenes: 32,
            seed: 0,
            extents: None,
            classes: None,
            instances: None,
            size: None,
            rotation: None,
            keypoints: None,
            occlusion: None,
        }
    }
}

impl SpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let base = match self.preset.as_str() {
            "instances" => DatasetSpec::instances(self.scenes, self.seed),
            "classification" => DatasetSpec::classification(self.scenes, self.seed),
            other => return Err(CliError::Config(format!("unknown dataset preset `{other}`"))),
        };
        let spec = DatasetSpec {
            extents: self.extents.map_or(base.extents, |e| (e[0], e[1])),
            classes: self.classes.unwrap_or(base.classes),
            instances: self.instances.map_or(base.instances, |r| (r[0], r[1])),
            size: self.size.map_or(base.size, |r| (r[0], r[1])),
            rotation: self.rotation.unwrap_or(base.rotation),
            keypoints: self.keypoints.unwrap_or(base.keypoints),
            occlusion: self.occlusion.unwrap_or(base.occlusion),
            ..base
        };
        spec.validate()?;
        Ok(spec)
    }
}
