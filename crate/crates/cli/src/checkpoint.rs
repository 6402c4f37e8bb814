//! Checkpoint directories: `manifest.json` plus one little-endian f64 blob
//! per parameter and per optimizer moment buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unihead_core::autodiff::{Init, ParameterStore};
use unihead_core::optim::OptimizerState;
use unihead_core::Tensor;

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    task: String,
    epoch: u64,
    step: u64,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Vec<usize>,
    value: String,
    m: String,
    v: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub task: String,
    pub epoch: u64,
    pub params: ParameterStore,
    pub state: OptimizerState,
}

fn write_blob(dir: &Path, name: &str, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| CliError::io(p, e))
}

fn read_blob(dir: &Path, name: &str, len: usize) -> Result<Vec<f64>> {
    if name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(CliError::Version {
            path: dir.into(),
            msg: format!("blob name `{name}` escapes the checkpoint"),
        });
    }
    let p = dir.join(name);
    let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
    if bytes.len() != len * 8 {
        return Err(CliError::Version {
            path: p,
            msg: format!("{} bytes, expected {}", bytes.len(), len * 8),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn save(dir: &Path, task: &str, epoch: u64, params: &ParameterStore, state: &OptimizerState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    state.check_against(params)?;
    let mut entries = Vec::with_capacity(params.len());
    for (i, (path, e)) in params.iter().enumerate() {
        let entry = Entry {
            path: path.to_string(),
            shape: e.value.shape().to_vec(),
            value: format!("p{i:04}.bin"),
            m: format!("m{i:04}.bin"),
            v: format!("v{i:04}.bin"),
        };
        write_blob(dir, &entry.value, e.value.data())?;
        write_blob(dir, &entry.m, &state.m[path])?;
        write_blob(dir, &entry.v, &state.v[path])?;
        entries.push(entry);
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        task: task.into(),
        epoch,
        step: state.step,
        params: entries,
    };
    let p = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| CliError::io(p, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: p.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format != FORMAT_VERSION {
        return Err(CliError::Version {
            path: p,
            msg: format!("checkpoint format {}, expected {FORMAT_VERSION}", manifest.format),
        });
    }
    let mut params = ParameterStore::new();
    let mut state = OptimizerState {
        step: manifest.step,
        ..OptimizerState::default()
    };
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let value = Tensor::new(&e.shape, read_blob(dir, &e.value, n)?)?;
        params.insert(&e.path, value, Init::Zero)?;
        state.m.insert(e.path.clone(), read_blob(dir, &e.m, n)?);
        state.v.insert(e.path.clone(), read_blob(dir, &e.v, n)?);
    }
    Ok(Checkpoint {
        task: manifest.task,
        epoch: manifest.epoch,
        params,
        state,
    })
}
