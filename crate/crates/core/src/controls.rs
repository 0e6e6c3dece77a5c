//! Control tasks (random labels per word type) and control functions (random
//! vectors per word type), plus the views the trainer reads targets through.
//!
//! Assignments are drawn once from their own seed, independently of any probe
//! training seed, and are shared by every configuration of a sweep.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{LabeledEmbeddingDataset, TokenRecord};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("assignment covers {covered} types but record {record} has type_id {type_id}")]
    UncoveredType {
        record: usize,
        type_id: u32,
        covered: usize,
    },
    #[error("token-level assignment covers {covered} records but record {record} was requested")]
    UncoveredRecord { record: usize, covered: usize },
    #[error("control vectors have width {assignment}, dataset has {dataset}")]
    DimensionMismatch { assignment: usize, dataset: usize },
    #[error("dataset has no labels to draw from")]
    NoLabels,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Unit at which randomization is consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One draw per word type (default).
    #[default]
    Type,
    /// One draw per token occurrence (ablation).
    Token,
}

/// Per-coordinate law of control vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorDistribution {
    #[default]
    StandardNormal,
    /// Uniform on `(-1, 1)`.
    Uniform,
}

impl VectorDistribution {
    /// `(mean, variance)` of one coordinate.
    pub fn moments(self) -> (f64, f64) {
        match self {
            VectorDistribution::StandardNormal => (0.0, 1.0),
            VectorDistribution::Uniform => (0.0, 1.0 / 3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTaskAssignment {
    pub seed: u64,
    pub granularity: Granularity,
    pub label_count: usize,
    /// Indexed by type_id (type granularity) or record index (token granularity).
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFunctionAssignment {
    pub seed: u64,
    pub granularity: Granularity,
    pub distribution: VectorDistribution,
    pub dim: usize,
    /// Row-major, one row per type_id or per record.
    pub vectors: Vec<f32>,
}

impl ControlFunctionAssignment {
    pub fn rows(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

fn assignment_slots(ds: &LabeledEmbeddingDataset, granularity: Granularity) -> usize {
    match granularity {
        Granularity::Type => ds.type_count,
        Granularity::Token => ds.records.len(),
    }
}

/// Type-level control task: each word type gets an independent uniform label.
pub fn make_control_task(
    ds: &LabeledEmbeddingDataset,
    seed: u64,
) -> Result<ControlTaskAssignment, ControlError> {
    make_control_task_with(ds, seed, Granularity::Type)
}

pub fn make_control_task_with(
    ds: &LabeledEmbeddingDataset,
    seed: u64,
    granularity: Granularity,
) -> Result<ControlTaskAssignment, ControlError> {
    let k = ds.num_labels();
    if k == 0 {
        return Err(ControlError::NoLabels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..assignment_slots(ds, granularity))
        .map(|_| rng.random_range(0..k as u32))
        .collect();
    Ok(ControlTaskAssignment {
        seed,
        granularity,
        label_count: k,
        labels,
    })
}

/// Type-level control function with standard-normal coordinates.
pub fn make_control_function(ds: &LabeledEmbeddingDataset, seed: u64) -> ControlFunctionAssignment {
    make_control_function_with(ds, seed, Granularity::Type, VectorDistribution::StandardNormal)
}

pub fn make_control_function_with(
    ds: &LabeledEmbeddingDataset,
    seed: u64,
    granularity: Granularity,
    distribution: VectorDistribution,
) -> ControlFunctionAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = assignment_slots(ds, granularity) * ds.embedding_dim;
    let vectors = (0..n)
        .map(|_| match distribution {
            VectorDistribution::StandardNormal => rng.sample::<f64, _>(StandardNormal) as f32,
            VectorDistribution::Uniform => rng.random_range(-1.0f64..1.0) as f32,
        })
        .collect();
    ControlFunctionAssignment {
        seed,
        granularity,
        distribution,
        dim: ds.embedding_dim,
        vectors,
    }
}

/// The pair of assignments one sweep shares across all configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAssignments {
    pub task: ControlTaskAssignment,
    pub function: ControlFunctionAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlOptions {
    pub task_seed: u64,
    pub function_seed: u64,
    #[serde(default)]
    pub task_granularity: Granularity,
    #[serde(default)]
    pub function_granularity: Granularity,
    #[serde(default)]
    pub distribution: VectorDistribution,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            task_seed: 1,
            function_seed: 2,
            task_granularity: Granularity::Type,
            function_granularity: Granularity::Type,
            distribution: VectorDistribution::StandardNormal,
        }
    }
}

impl ControlAssignments {
    pub fn draw(ds: &LabeledEmbeddingDataset, opts: &ControlOptions) -> Result<Self, ControlError> {
        Ok(Self {
            task: make_control_task_with(ds, opts.task_seed, opts.task_granularity)?,
            function: make_control_function_with(
                ds,
                opts.function_seed,
                opts.function_granularity,
                opts.distribution,
            ),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Probe,
    ControlTask,
    ControlFunction,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Probe, Arm::ControlTask, Arm::ControlFunction];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Probe => "probe",
            Arm::ControlTask => "control_task",
            Arm::ControlFunction => "control_function",
        }
    }
}

/// Where the trainer reads a record's label and vector from.
#[derive(Debug, Clone, Copy)]
pub enum TargetSource<'a> {
    Gold,
    ControlTask(&'a ControlTaskAssignment),
    ControlFunction(&'a ControlFunctionAssignment),
}

impl<'a> TargetSource<'a> {
    pub fn for_arm(arm: Arm, assignments: &'a ControlAssignments) -> Self {
        match arm {
            Arm::Probe => TargetSource::Gold,
            Arm::ControlTask => TargetSource::ControlTask(&assignments.task),
            Arm::ControlFunction => TargetSource::ControlFunction(&assignments.function),
        }
    }

    pub fn arm(&self) -> Arm {
        match self {
            TargetSource::Gold => Arm::Probe,
            TargetSource::ControlTask(_) => Arm::ControlTask,
            TargetSource::ControlFunction(_) => Arm::ControlFunction,
        }
    }

    fn slot(
        granularity: Granularity,
        covered: usize,
        record: usize,
        r: &TokenRecord,
    ) -> Result<usize, ControlError> {
        let slot = match granularity {
            Granularity::Type => r.type_id as usize,
            Granularity::Token => record,
        };
        if slot >= covered {
            return Err(match granularity {
                Granularity::Type => ControlError::UncoveredType {
                    record,
                    type_id: r.type_id,
                    covered,
                },
                Granularity::Token => ControlError::UncoveredRecord { record, covered },
            });
        }
        Ok(slot)
    }

    pub fn label(&self, ds: &LabeledEmbeddingDataset, record: usize) -> Result<u32, ControlError> {
        let r = &ds.records[record];
        match self {
            TargetSource::ControlTask(a) => {
                let slot = Self::slot(a.granularity, a.labels.len(), record, r)?;
                Ok(a.labels[slot])
            }
            _ => Ok(r.label_id),
        }
    }

    pub fn vector<'b>(
        &'b self,
        ds: &'b LabeledEmbeddingDataset,
        record: usize,
    ) -> Result<&'b [f32], ControlError> {
        let r = &ds.records[record];
        match self {
            TargetSource::ControlFunction(a) => {
                if a.dim != ds.embedding_dim {
                    return Err(ControlError::DimensionMismatch {
                        assignment: a.dim,
                        dataset: ds.embedding_dim,
                    });
                }
                let slot = Self::slot(a.granularity, a.rows(), record, r)?;
                Ok(a.row(slot))
            }
            _ => Ok(&r.vector),
        }
    }
}

/// Materializes one experiment arm as a standalone dataset.
pub fn apply_control(
    ds: &LabeledEmbeddingDataset,
    source: &TargetSource<'_>,
) -> Result<LabeledEmbeddingDataset, ControlError> {
    let records = (0..ds.records.len())
        .map(|i| {
            Ok(TokenRecord {
                split: ds.records[i].split,
                type_id: ds.records[i].type_id,
                label_id: source.label(ds, i)?,
                vector: source.vector(ds, i)?.to_vec(),
            })
        })
        .collect::<Result<Vec<_>, ControlError>>()?;
    Ok(LabeledEmbeddingDataset {
        embedding_dim: ds.embedding_dim,
        label_names: ds.label_names.clone(),
        type_count: ds.type_count,
        records,
    })
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> ControlError + '_ {
    move |source| ControlError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_index_pairs(path: &Path) -> Result<Vec<(usize, u64)>, ControlError> {
    let file = fs::File::open(path).map_err(io_error(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.is_empty() {
            continue;
        }
        let parse = |s: Option<&str>| s.and_then(|s| s.parse::<u64>().ok());
        let mut cols = line.split('\t');
        match (parse(cols.next()), parse(cols.next())) {
            (Some(a), Some(b)) if a as usize == out.len() => out.push((a as usize, b)),
            _ => {
                return Err(ControlError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `{}\\t<int>`", out.len()),
                })
            }
        }
    }
    Ok(out)
}

impl ControlTaskAssignment {
    /// `index TAB label_id`, one row per type (or token).
    pub fn write_tsv(&self, path: &Path) -> Result<(), ControlError> {
        let mut out = String::with_capacity(self.labels.len() * 8);
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i}\t{l}\n"));
        }
        fs::write(path, out).map_err(io_error(path))
    }

    pub fn read_tsv(
        path: &Path,
        seed: u64,
        granularity: Granularity,
        label_count: usize,
    ) -> Result<Self, ControlError> {
        let rows = read_index_pairs(path)?;
        let labels = rows.into_iter().map(|(_, l)| l as u32).collect();
        Ok(Self {
            seed,
            granularity,
            label_count,
            labels,
        })
    }
}

impl ControlFunctionAssignment {
    /// `index TAB row` into a sidecar little-endian `f32` matrix.
    pub fn write(&self, tsv: &Path, matrix: &Path) -> Result<(), ControlError> {
        let mut out = String::new();
        for i in 0..self.rows() {
            out.push_str(&format!("{i}\t{i}\n"));
        }
        fs::write(tsv, out).map_err(io_error(tsv))?;
        let mut f = fs::File::create(matrix).map_err(io_error(matrix))?;
        let bytes: Vec<u8> = self.vectors.iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes).map_err(io_error(matrix))
    }

    pub fn read(
        tsv: &Path,
        matrix: &Path,
        seed: u64,
        granularity: Granularity,
        distribution: VectorDistribution,
        dim: usize,
    ) -> Result<Self, ControlError> {
        let rows = read_index_pairs(tsv)?;
        let bytes = fs::read(matrix).map_err(io_error(matrix))?;
        let all: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (i, (_, row)) in rows.iter().enumerate() {
            let start = *row as usize * dim;
            let slice = all.get(start..start + dim).ok_or_else(|| ControlError::Parse {
                path: tsv.to_path_buf(),
                line: i + 1,
                message: format!("row {row} outside the sidecar matrix"),
            })?;
            vectors.extend_from_slice(slice);
        }
        Ok(Self {
            seed,
            granularity,
            distribution,
            dim,
            vectors,
        })
    }
}
