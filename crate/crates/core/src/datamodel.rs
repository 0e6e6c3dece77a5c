//! Labeled embedding datasets and the PRB1 on-disk format.
//!
//! A PRB1 dataset is a directory with three files:
//!
//! | file           | content                                                          |
//! |----------------|------------------------------------------------------------------|
//! | `manifest.json` | format tag, embedding width, type count, label names, split sizes |
//! | `records.tsv`   | `split TAB type_id TAB label_id`, one row per token              |
//! | `vectors.f32`   | little-endian `f32`, row-major, row `i` belongs to record `i`    |
//!
//! Records are stored as a train block, then dev, then test. Vectors are kept
//! as `f32` in memory so that a save/load cycle is bit-exact; every consumer
//! widens to `f64` before doing arithmetic.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_TAG: &str = "PRB1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.tsv";
pub const VECTORS_FILE: &str = "vectors.f32";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported format tag {0:?} (expected \"PRB1\")")]
    FormatTag(String),
    #[error(
        "dimension mismatch: manifest declares {rows} rows of dim {declared_dim} \
         ({expected_bytes} bytes) but {path} holds {actual_bytes} bytes"
    )]
    DimensionMismatch {
        path: PathBuf,
        rows: usize,
        declared_dim: usize,
        expected_bytes: u64,
        actual_bytes: u64,
    },
    #[error("non-finite value in vector row {row}")]
    NonFinite { row: usize },
    #[error("records.tsv line {line}: unknown split tag {tag:?}")]
    UnknownSplit { line: usize, tag: String },
    #[error("records.tsv line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("split counts in manifest do not match records.tsv: {0}")]
    SplitCounts(String),
    #[error("refusing to write an empty dataset")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

/// One token: its split, word type, gold label and representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub split: Split,
    pub type_id: u32,
    pub label_id: u32,
    pub vector: Vec<f32>,
}

/// The `(T, R)` pairs a probe is trained on, grouped into train/dev/test.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingDataset {
    pub embedding_dim: usize,
    pub label_names: Vec<String>,
    pub type_count: usize,
    pub records: Vec<TokenRecord>,
}

impl LabeledEmbeddingDataset {
    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    /// Indices (into `records`) of the tokens in `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for r in &self.records {
            counts[r.split.index()] += 1;
        }
        counts
    }

    /// SHA-256 over the canonical PRB1 byte content (manifest fields, records, vectors).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(FORMAT_TAG.as_bytes());
        hasher.update((self.embedding_dim as u64).to_le_bytes());
        hasher.update((self.type_count as u64).to_le_bytes());
        for name in &self.label_names {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
        }
        for r in &self.records {
            hasher.update([r.split as u8]);
            hasher.update(r.type_id.to_le_bytes());
            hasher.update(r.label_id.to_le_bytes());
            for v in &r.vector {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
    pub split_counts: BTreeMap<Split, usize>,
    pub label_counts: Vec<usize>,
    /// Fraction of dev/test tokens whose type never occurs in train.
    pub unseen_type_fraction: BTreeMap<Split, f64>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }
}

/// Checks every dataset invariant; problems are collected, never raised.
pub fn validate_dataset(ds: &LabeledEmbeddingDataset) -> ValidationReport {
    let mut issues = Vec::new();
    let mut error = |message: String| {
        issues.push(Issue {
            severity: Severity::Error,
            message,
        })
    };

    if ds.embedding_dim == 0 {
        error("embedding_dim must be positive".into());
    }
    if ds.label_names.is_empty() {
        error("label inventory is empty".into());
    }
    if ds.type_count == 0 {
        error("type_count must be positive".into());
    }

    let num_labels = ds.label_names.len();
    let mut label_counts = vec![0usize; num_labels];
    let mut last_split = Split::Train;
    let mut order_reported = false;
    for (i, r) in ds.records.iter().enumerate() {
        if r.vector.len() != ds.embedding_dim {
            error(format!(
                "record {i}: vector length {} != embedding_dim {}",
                r.vector.len(),
                ds.embedding_dim
            ));
        }
        if (r.label_id as usize) >= num_labels {
            error(format!(
                "record {i}: label_id {} out of range (labels: {num_labels})",
                r.label_id
            ));
        } else {
            label_counts[r.label_id as usize] += 1;
        }
        if (r.type_id as usize) >= ds.type_count {
            error(format!(
                "record {i}: type_id {} out of range (types: {})",
                r.type_id, ds.type_count
            ));
        }
        if let Some(j) = r.vector.iter().position(|v| !v.is_finite()) {
            error(format!("record {i}: non-finite vector entry at column {j}"));
        }
        if r.split < last_split && !order_reported {
            error(format!(
                "record {i}: records are not grouped as train, dev, test blocks"
            ));
            order_reported = true;
        }
        last_split = last_split.max(r.split);
    }

    let counts = ds.split_counts();
    for split in Split::ALL {
        if counts[split.index()] == 0 {
            error(format!("empty split: {split}"));
        }
    }

    let mut seen = HashSet::new();
    for name in &ds.label_names {
        if !seen.insert(name) {
            issues.push(Issue {
                severity: Severity::Warning,
                message: format!("duplicate label name {name:?}"),
            });
        }
    }

    let train_types: HashSet<u32> = ds
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.type_id)
        .collect();
    let mut unseen_type_fraction = BTreeMap::new();
    for split in [Split::Dev, Split::Test] {
        let n = counts[split.index()];
        if n > 0 {
            let unseen = ds
                .records
                .iter()
                .filter(|r| r.split == split && !train_types.contains(&r.type_id))
                .count();
            unseen_type_fraction.insert(split, unseen as f64 / n as f64);
        }
    }

    let ok = !issues.iter().any(|i| i.severity == Severity::Error);
    ValidationReport {
        ok,
        issues,
        split_counts: Split::ALL.iter().map(|&s| (s, counts[s.index()])).collect(),
        label_counts,
        unseen_type_fraction,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub embedding_dim: usize,
    pub type_count: usize,
    pub label_names: Vec<String>,
    pub splits: SplitSizes,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| DatasetError::Manifest {
                path: path.to_path_buf(),
                source,
            })?;
        if manifest.format != FORMAT_TAG {
            return Err(DatasetError::FormatTag(manifest.format));
        }
        Ok(manifest)
    }

    fn total(&self) -> usize {
        self.splits.train + self.splits.dev + self.splits.test
    }
}

/// Resolves either a PRB1 directory or a path to its `manifest.json`.
fn manifest_location(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (path.to_path_buf(), dir)
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<LabeledEmbeddingDataset, DatasetError> {
    let (manifest_path, dir) = manifest_location(manifest_path);
    let manifest = Manifest::read(&manifest_path)?;
    let rows = manifest.total();
    let dim = manifest.embedding_dim;

    let vectors_path = dir.join(VECTORS_FILE);
    let bytes = fs::read(&vectors_path).map_err(io_err(&vectors_path))?;
    let expected_bytes = (rows * dim * 4) as u64;
    if bytes.len() as u64 != expected_bytes {
        return Err(DatasetError::DimensionMismatch {
            path: vectors_path,
            rows,
            declared_dim: dim,
            expected_bytes,
            actual_bytes: bytes.len() as u64,
        });
    }

    let records_path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&records_path).map_err(io_err(&records_path))?;
    let mut records = Vec::with_capacity(rows);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&records_path))?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(split), Some(type_id), Some(label_id), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(DatasetError::Record {
                line: lineno,
                message: "expected 3 tab-separated columns".into(),
            });
        };
        let split = split.parse::<Split>().map_err(|tag| DatasetError::UnknownSplit {
            line: lineno,
            tag,
        })?;
        let parse_id = |s: &str, what: &str| {
            s.parse::<u32>().map_err(|e| DatasetError::Record {
                line: lineno,
                message: format!("bad {what} {s:?}: {e}"),
            })
        };
        let type_id = parse_id(type_id, "type_id")?;
        let label_id = parse_id(label_id, "label_id")?;
        let row = records.len();
        if row >= rows {
            return Err(DatasetError::SplitCounts(format!(
                "records.tsv has more than the {rows} rows declared"
            )));
        }
        let vector: Vec<f32> = bytes[row * dim * 4..(row + 1) * dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite { row });
        }
        records.push(TokenRecord {
            split,
            type_id,
            label_id,
            vector,
        });
    }

    let ds = LabeledEmbeddingDataset {
        embedding_dim: dim,
        label_names: manifest.label_names,
        type_count: manifest.type_count,
        records,
    };
    let counts = ds.split_counts();
    let declared = [manifest.splits.train, manifest.splits.dev, manifest.splits.test];
    if counts != declared {
        return Err(DatasetError::SplitCounts(format!(
            "manifest {declared:?}, records {counts:?}"
        )));
    }
    Ok(ds)
}

/// Writes `ds` as PRB1 into `dir` (created if needed) and returns the manifest path.
pub fn save_dataset(ds: &LabeledEmbeddingDataset, dir: &Path) -> Result<PathBuf, DatasetError> {
    if ds.records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let report = validate_dataset(ds);
    // Empty splits are tolerated on disk; everything else must hold.
    let blocking: Vec<_> = report
        .errors()
        .filter(|i| !i.message.starts_with("empty split"))
        .map(|i| i.message.clone())
        .collect();
    if !blocking.is_empty() {
        return Err(DatasetError::Invalid(blocking.join("; ")));
    }

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let counts = ds.split_counts();
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        embedding_dim: ds.embedding_dim,
        type_count: ds.type_count,
        label_names: ds.label_names.clone(),
        splits: SplitSizes {
            train: counts[0],
            dev: counts[1],
            test: counts[2],
        },
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

    let records_path = dir.join(RECORDS_FILE);
    let file = fs::File::create(&records_path).map_err(io_err(&records_path))?;
    let mut w = BufWriter::new(file);
    for r in &ds.records {
        writeln!(w, "{}\t{}\t{}", r.split, r.type_id, r.label_id).map_err(io_err(&records_path))?;
    }
    w.flush().map_err(io_err(&records_path))?;

    let vectors_path = dir.join(VECTORS_FILE);
    let file = fs::File::create(&vectors_path).map_err(io_err(&vectors_path))?;
    let mut w = BufWriter::new(file);
    for r in &ds.records {
        for v in &r.vector {
            w.write_all(&v.to_le_bytes()).map_err(io_err(&vectors_path))?;
        }
    }
    w.flush().map_err(io_err(&vectors_path))?;
    Ok(manifest_path)
}
