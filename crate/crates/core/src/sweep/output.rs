//! Sweep artifacts: `results.csv`, `runs.csv`, `correlations.json`, and
//! `plotdata/*.tsv`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CorrelationTable, SweepResults};
use crate::controls::Arm;

pub const RESULTS_HEADER: [&str; 17] = [
    "config_id",
    "hidden_layers",
    "hidden_width",
    "learning_rate",
    "weight_decay",
    "max_gradient_steps",
    "seed_count",
    "t_acc",
    "t_ent",
    "f_acc",
    "f_ent",
    "probe_accuracy",
    "probe_cross_entropy",
    "control_task_accuracy",
    "control_task_cross_entropy",
    "control_function_accuracy",
    "control_function_cross_entropy",
];

/// `(family, metrics)` for each plot family; the family name is also the x axis.
pub const PLOT_FAMILIES: [(&str, &[&str]); 3] = [
    (
        "max_gradient_steps",
        &[
            "probe_accuracy",
            "control_task_accuracy",
            "control_function_accuracy",
            "t_acc",
            "f_ent",
        ],
    ),
    ("weight_decay", &["t_acc", "t_ent", "f_acc", "f_ent"]),
    ("learning_rate", &["t_acc", "t_ent", "f_acc", "f_ent"]),
];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: unexpected header (expected {expected})")]
    Header { path: PathBuf, expected: String },
    #[error("no successful configs to write")]
    Empty,
    #[error("config {0} is not a grid point")]
    UnknownConfig(String),
}

/// One line of `results.csv`. `max_gradient_steps` is `inf` when uncapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_id: String,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_gradient_steps: String,
    pub seed_count: usize,
    pub t_acc: f64,
    pub t_ent: f64,
    pub f_acc: f64,
    pub f_ent: f64,
    pub probe_accuracy: f64,
    pub probe_cross_entropy: f64,
    pub control_task_accuracy: f64,
    pub control_task_cross_entropy: f64,
    pub control_function_accuracy: f64,
    pub control_function_cross_entropy: f64,
}

impl ResultRow {
    fn metric(&self, name: &str) -> f64 {
        match name {
            "t_acc" => self.t_acc,
            "t_ent" => self.t_ent,
            "f_acc" => self.f_acc,
            "f_ent" => self.f_ent,
            "probe_accuracy" => self.probe_accuracy,
            "control_task_accuracy" => self.control_task_accuracy,
            "control_function_accuracy" => self.control_function_accuracy,
            other => unreachable!("unknown metric {other}"),
        }
    }

    /// Numeric x coordinate for a plot family (`inf` sorts last).
    fn axis(&self, family: &str) -> f64 {
        match family {
            "max_gradient_steps" => self.max_gradient_steps.parse().unwrap_or(f64::INFINITY),
            "weight_decay" => self.weight_decay,
            "learning_rate" => self.learning_rate,
            other => unreachable!("unknown family {other}"),
        }
    }

    fn arch_label(&self) -> String {
        super::Architecture::new(self.hidden_layers, self.hidden_width).label()
    }
}

pub fn result_rows(results: &SweepResults) -> Result<Vec<ResultRow>, OutputError> {
    results
        .records
        .iter()
        .map(|r| {
            let p = results
                .point(&r.config_id)
                .ok_or_else(|| OutputError::UnknownConfig(r.config_id.clone()))?;
            let (pa, pc) = r.probe_means();
            let (ta, tc) = r.control_task_means();
            let (fa, fc) = r.control_function_means();
            Ok(ResultRow {
                config_id: r.config_id.clone(),
                hidden_layers: p.architecture.hidden_layers,
                hidden_width: p.architecture.hidden_width,
                learning_rate: p.learning_rate,
                weight_decay: p.weight_decay,
                max_gradient_steps: p
                    .max_gradient_steps
                    .map_or_else(|| "inf".to_string(), |s| s.to_string()),
                seed_count: r.seeds.len(),
                t_acc: r.t_acc,
                t_ent: r.t_ent,
                f_acc: r.f_acc,
                f_ent: r.f_ent,
                probe_accuracy: pa,
                probe_cross_entropy: pc,
                control_task_accuracy: ta,
                control_task_cross_entropy: tc,
                control_function_accuracy: fa,
                control_function_cross_entropy: fc,
            })
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct RunRow<'a> {
    config_id: &'a str,
    arm: &'static str,
    seed: u64,
    accuracy: f64,
    cross_entropy: f64,
    token_count: usize,
}

#[derive(Serialize)]
struct CorrelationsFile<'a> {
    #[serde(flatten)]
    table: Option<&'a CorrelationTable>,
    configs: usize,
    failed_configs: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// Writes every artifact under `dir` and returns the paths written.
///
/// `table` is `None` when correlation was not possible (fewer than three
/// successful configs); `correlation_error` then explains why.
pub fn emit_results(
    results: &SweepResults,
    table: Option<&CorrelationTable>,
    correlation_error: Option<&str>,
    dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    if results.records.is_empty() {
        return Err(OutputError::Empty);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let rows = result_rows(results)?;
    let path = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for row in &rows {
        w.serialize(row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);

    let path = dir.join("runs.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &results.records {
        let arms = [
            (Arm::Probe, &r.probe),
            (Arm::ControlTask, &r.control_task),
            (Arm::ControlFunction, &r.control_function),
        ];
        for (arm, evals) in arms {
            for (seed, e) in r.seeds.iter().zip(evals) {
                w.serialize(RunRow {
                    config_id: &r.config_id,
                    arm: arm.as_str(),
                    seed: *seed,
                    accuracy: e.accuracy,
                    cross_entropy: e.cross_entropy,
                    token_count: e.token_count,
                })
                .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);

    let path = dir.join("correlations.json");
    let file = CorrelationsFile {
        table,
        configs: results.records.len(),
        failed_configs: results.failed_configs(),
        error: correlation_error,
    };
    let text = serde_json::to_string_pretty(&file).expect("correlations serialize");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    written.push(path);

    let path = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&results.provenance).expect("provenance serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    written.push(path);

    written.extend(write_plotdata(&rows, &dir.join("plotdata"))?);
    Ok(written)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(OutputError::Header {
            path: path.to_path_buf(),
            expected: RESULTS_HEADER.join(","),
        });
    }
    r.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(csv_err(path))
}

/// One `x<TAB>y` series per (family, architecture, metric); `y` is the mean
/// over all rows sharing the architecture and the family's x value.
pub fn write_plotdata(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut arches: Vec<(usize, usize)> =
        rows.iter().map(|r| (r.hidden_layers, r.hidden_width)).collect();
    arches.sort_unstable();
    arches.dedup();

    let mut written = Vec::new();
    for (family, metrics) in PLOT_FAMILIES {
        for &(layers, width) in &arches {
            let sel: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| (r.hidden_layers, r.hidden_width) == (layers, width))
                .collect();
            let arch = sel[0].arch_label();
            for metric in metrics {
                // keyed by the bit pattern so equal x values group exactly
                let mut groups: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
                for r in &sel {
                    let x = r.axis(family);
                    let g = groups.entry(x.to_bits()).or_insert((x, 0.0, 0));
                    g.1 += r.metric(metric);
                    g.2 += 1;
                }
                let mut points: Vec<(f64, f64)> =
                    groups.values().map(|&(x, s, n)| (x, s / n as f64)).collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut text = String::new();
                for (x, y) in points {
                    text.push_str(&format!("{x}\t{y}\n"));
                }
                let path = dir.join(format!("{family}__{arch}__{metric}.tsv"));
                fs::write(&path, text).map_err(io_err(&path))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
