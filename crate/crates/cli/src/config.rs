//! Flat JSON run configuration shared by `sweep` and `verify-theory`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use probekit::controls::{ControlOptions, Granularity, VectorDistribution};
use probekit::sweep::{Architecture, SweepGrid, DEFAULT_SEEDS};
use probekit::synth::{EmbeddingScheme, SyntheticSpec, TypeDistribution};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Nats,
    Bits,
}

/// Every key is optional. A config names either `dataset` or synthetic
/// generator keys (`types`, `labels`, ...), never both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: Option<PathBuf>,

    pub types: Option<usize>,
    pub labels: Option<usize>,
    pub dim: Option<usize>,
    pub label_noise: Option<f64>,
    pub train_tokens: Option<usize>,
    pub dev_tokens: Option<usize>,
    pub test_tokens: Option<usize>,
    pub embedding: Option<EmbeddingScheme>,
    pub zipf_exponent: Option<f64>,
    pub vector_noise: Option<f64>,
    pub synthetic_seed: Option<u64>,

    pub learning_rates: Option<Vec<f64>>,
    pub weight_decays: Option<Vec<f64>>,
    /// `null` entries mean no step cap.
    pub max_gradient_steps: Option<Vec<Option<u64>>>,
    /// `[hidden_layers, hidden_width]` pairs.
    pub architectures: Option<Vec<[usize; 2]>>,
    pub seeds: Option<Vec<u64>>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,

    pub task_seed: Option<u64>,
    pub function_seed: Option<u64>,
    pub task_granularity: Option<Granularity>,
    pub function_granularity: Option<Granularity>,
    pub control_distribution: Option<VectorDistribution>,

    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub log_base: Option<LogBase>,
}

const SYNTHETIC_KEYS: [&str; 11] = [
    "types",
    "labels",
    "dim",
    "label_noise",
    "train_tokens",
    "dev_tokens",
    "test_tokens",
    "embedding",
    "zipf_exponent",
    "vector_noise",
    "synthetic_seed",
];

pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

impl RunConfigFile {
    /// The desk configuration: the default synthetic dataset and grid.
    pub fn desk() -> Self {
        let spec = SyntheticSpec::default();
        let grid = SweepGrid::default();
        let controls = ControlOptions::default();
        Self {
            dataset: None,
            types: Some(spec.type_count),
            labels: Some(spec.label_count),
            dim: Some(spec.embedding_dim),
            label_noise: Some(spec.label_noise),
            train_tokens: Some(spec.train_tokens),
            dev_tokens: Some(spec.dev_tokens),
            test_tokens: Some(spec.test_tokens),
            embedding: Some(spec.embedding_scheme),
            zipf_exponent: None,
            vector_noise: Some(spec.vector_noise),
            synthetic_seed: Some(spec.seed),
            learning_rates: Some(grid.learning_rates),
            weight_decays: Some(grid.weight_decays),
            max_gradient_steps: Some(grid.max_gradient_steps),
            architectures: Some(
                grid.architectures
                    .iter()
                    .map(|a| [a.hidden_layers, a.hidden_width])
                    .collect(),
            ),
            seeds: Some(grid.seeds),
            batch_size: Some(grid.batch_size),
            max_epochs: Some(grid.max_epochs),
            task_seed: Some(controls.task_seed),
            function_seed: Some(controls.function_seed),
            task_granularity: Some(controls.task_granularity),
            function_granularity: Some(controls.function_granularity),
            control_distribution: Some(controls.distribution),
            output_dir: Some(PathBuf::from("sweep-out")),
            workers: None,
            log_base: Some(LogBase::Nats),
        }
    }

    /// Reads `path`, applies `key=value` overrides (values parse as JSON,
    /// else as strings), and checks the dataset/synthetic exclusivity.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| {
            anyhow!(
                "{}: line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            )
        })?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| anyhow!("{}: line 1: config must be a JSON object", path.display()))?;
        apply_overrides(map, overrides)?;
        let config: Self = serde_json::from_value(value).map_err(|e| {
            let line = e
                .to_string()
                .split('`')
                .nth(1)
                .and_then(|key| line_of(&text, key))
                .map_or_else(String::new, |l| format!("line {l}: "));
            anyhow!("{}: {line}{e}", path.display())
        })?;
        config.check().map_err(|e| {
            let line = line_of(&text, "dataset").map_or_else(String::new, |l| format!("line {l}: "));
            anyhow!("{}: {line}{e}", path.display())
        })?;
        Ok(config)
    }

    fn synthetic_keys_present(&self) -> Vec<&'static str> {
        let v = serde_json::to_value(self).expect("config serializes");
        SYNTHETIC_KEYS
            .iter()
            .copied()
            .filter(|k| !v[*k].is_null())
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        let synth = self.synthetic_keys_present();
        match (&self.dataset, synth.is_empty()) {
            (Some(_), false) => bail!(
                "config names both a dataset and synthetic keys ({}); give exactly one",
                synth.join(", ")
            ),
            (None, true) => bail!("config names neither a dataset nor synthetic keys (types, labels, ...)"),
            _ => Ok(()),
        }
    }

    pub fn source(&self) -> DataSource {
        if let Some(p) = &self.dataset {
            return DataSource::Path(p.clone());
        }
        let d = SyntheticSpec::default();
        DataSource::Synthetic(SyntheticSpec {
            type_count: self.types.unwrap_or(d.type_count),
            label_count: self.labels.unwrap_or(d.label_count),
            embedding_dim: self.dim.unwrap_or(d.embedding_dim),
            label_noise: self.label_noise.unwrap_or(d.label_noise),
            train_tokens: self.train_tokens.unwrap_or(d.train_tokens),
            dev_tokens: self.dev_tokens.unwrap_or(d.dev_tokens),
            test_tokens: self.test_tokens.unwrap_or(d.test_tokens),
            embedding_scheme: self.embedding.unwrap_or(d.embedding_scheme),
            type_distribution: self
                .zipf_exponent
                .map_or(TypeDistribution::Uniform, |exponent| TypeDistribution::Zipf { exponent }),
            vector_noise: self.vector_noise.unwrap_or(d.vector_noise),
            seed: self.synthetic_seed.unwrap_or(d.seed),
        })
    }

    pub fn grid(&self) -> SweepGrid {
        let d = SweepGrid::default();
        SweepGrid {
            learning_rates: self.learning_rates.clone().unwrap_or(d.learning_rates),
            weight_decays: self.weight_decays.clone().unwrap_or(d.weight_decays),
            max_gradient_steps: self.max_gradient_steps.clone().unwrap_or(d.max_gradient_steps),
            architectures: self.architectures.as_ref().map_or(d.architectures, |a| {
                a.iter().map(|&[l, w]| Architecture::new(l, w)).collect()
            }),
            seeds: self.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
        }
    }

    pub fn controls(&self) -> ControlOptions {
        let d = ControlOptions::default();
        ControlOptions {
            task_seed: self.task_seed.unwrap_or(d.task_seed),
            function_seed: self.function_seed.unwrap_or(d.function_seed),
            task_granularity: self.task_granularity.unwrap_or(d.task_granularity),
            function_granularity: self.function_granularity.unwrap_or(d.function_granularity),
            distribution: self.control_distribution.unwrap_or(d.distribution),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("sweep-out"))
    }
}

pub fn apply_overrides(map: &mut Map<String, Value>, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {o:?}"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.trim().to_string(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn desk_round_trips() {
        let text = serde_json::to_string_pretty(&RunConfigFile::desk()).unwrap();
        let (_d, path) = write(&text);
        let c = RunConfigFile::load(&path, &[]).unwrap();
        assert_eq!(c, RunConfigFile::desk());
        assert_eq!(c.grid(), SweepGrid::default());
        assert!(matches!(c.source(), DataSource::Synthetic(s) if s == SyntheticSpec::default()));
    }

    #[test]
    fn both_sources_rejected_with_line() {
        let (_d, path) = write("{\n  \"types\": 8,\n  \"dataset\": \"x\"\n}\n");
        let err = RunConfigFile::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let (_d, path) = write("{\n  \"types\": 8,\n  \"learning_rate\": 0.1\n}\n");
        let err = RunConfigFile::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let (_d, path) = write("{\n  \"types\": 8,\n  oops\n}\n");
        let err = RunConfigFile::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn overrides() {
        let (_d, path) = write("{\"types\": 8}");
        let c = RunConfigFile::load(
            &path,
            &[
                "types=16".into(),
                "learning_rates=[0.1,0.2]".into(),
                "output_dir=out dir".into(),
                "log_base=bits".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.types, Some(16));
        assert_eq!(c.learning_rates, Some(vec![0.1, 0.2]));
        assert_eq!(c.output_dir, Some(PathBuf::from("out dir")));
        assert_eq!(c.log_base, Some(LogBase::Bits));
    }
}
