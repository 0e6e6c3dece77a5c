//! Checkpoint dump: `manifest.json` (config + layer shapes) and `params.f64`
//! (little-endian `f64`, layer by layer, weight row-major then bias).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ProbeConfig, ProbeParameters, TraceEntry, TrainedProbe};

pub const CHECKPOINT_FORMAT: &str = "PRB1-PROBE";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("not a probe checkpoint (format {0:?})")]
    Format(String),
    #[error("params.f64 holds {actual} bytes, shapes need {expected}")]
    Size { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ProbeConfig,
    /// `[out, in]` per layer.
    pub shapes: Vec<[usize; 2]>,
    pub steps_taken: u64,
    pub best_dev_loss: f64,
    pub trace: Vec<TraceEntry>,
}

pub fn save_checkpoint(probe: &TrainedProbe, dir: &Path) -> Result<PathBuf, CheckpointError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CheckpointError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: probe.config.clone(),
        shapes: probe
            .params
            .layers
            .iter()
            .map(|l| [l.weight.nrows(), l.weight.ncols()])
            .collect(),
        steps_taken: probe.steps_taken,
        best_dev_loss: probe.best_dev_loss,
        trace: probe.trace.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))?;

    let bytes: Vec<u8> = probe
        .params
        .to_flat()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let params_path = dir.join("params.f64");
    fs::write(&params_path, bytes).map_err(io(&params_path))?;
    Ok(path)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainedProbe, CheckpointError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|source| CheckpointError::Io {
        path: path.clone(),
        source,
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: path.clone(),
            source,
        })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(manifest.format));
    }
    let mut sizes: Vec<usize> = manifest.shapes.iter().map(|s| s[1]).collect();
    if let Some(last) = manifest.shapes.last() {
        sizes.push(last[0]);
    }
    let mut params = ProbeParameters::zeros(&sizes);
    let params_path = dir.join("params.f64");
    let bytes = fs::read(&params_path).map_err(|source| CheckpointError::Io {
        path: params_path,
        source,
    })?;
    let expected = params.parameter_count() * 8;
    if bytes.len() != expected {
        return Err(CheckpointError::Size {
            expected,
            actual: bytes.len(),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    params.set_flat(&flat);
    Ok(TrainedProbe {
        params,
        config: manifest.config,
        trace: manifest.trace,
        steps_taken: manifest.steps_taken,
        best_dev_loss: manifest.best_dev_loss,
    })
}
