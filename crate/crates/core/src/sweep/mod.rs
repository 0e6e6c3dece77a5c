//! Grid sweeps over probe hyperparameters, seed averaging, and rank
//! correlation between the selection criteria.

mod output;
mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controls::{Arm, ControlAssignments, Granularity, TargetSource};
use crate::criteria::{compute_criteria, CriteriaRecord};
use crate::datamodel::{LabeledEmbeddingDataset, Split};
use crate::probe::train_on;
use crate::probe::{evaluate_split, EvalResult, ProbeConfig, ProbeError, SplitData};

pub use output::{
    emit_results, read_results_csv, result_rows, write_plotdata, OutputError, ResultRow, PLOT_FAMILIES,
    RESULTS_HEADER,
};
pub use stats::{
    average_ranks, spearman, spearman_permutation_p, spearman_rho, StatsError, MAX_PERMUTATION_N,
};

pub const DEFAULT_SEEDS: [u64; 4] = [73, 421, 9973, 361091];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("failed to start worker pool: {0}")]
    Pool(String),
    #[error("building {arm} {split} data: {source}")]
    Data {
        arm: &'static str,
        split: Split,
        #[source]
        source: ProbeError,
    },
    #[error("too few successful configs for correlation: {0} (need 3)")]
    TooFewConfigs(usize),
    #[error("correlating {pair}: {source}")]
    Correlation {
        pair: &'static str,
        #[source]
        source: StatsError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Architecture {
    pub fn new(hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            hidden_layers,
            hidden_width,
        }
    }

    /// `"linear"` for zero hidden layers, otherwise e.g. `"2x40"`.
    pub fn label(&self) -> String {
        if self.hidden_layers == 0 {
            "linear".into()
        } else {
            format!("{}x{}", self.hidden_layers, self.hidden_width)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// `None` trains without a step cap, bounded only by `max_epochs`.
    pub max_gradient_steps: Vec<Option<u64>>,
    pub architectures: Vec<Architecture>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for SweepGrid {
    /// The desk grid: 3 learning rates x 2 weight decays x 3 architectures.
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-2, 3e-3, 1e-3],
            weight_decays: vec![0.0, 0.01],
            max_gradient_steps: vec![None],
            architectures: vec![
                Architecture::new(0, 0),
                Architecture::new(1, 40),
                Architecture::new(2, 40),
            ],
            seeds: DEFAULT_SEEDS.to_vec(),
            batch_size: 128,
            max_epochs: 20,
        }
    }
}

/// One hyperparameter setting of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub config_id: String,
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_gradient_steps: Option<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: &str| Err(SweepError::InvalidGrid(m.into()));
        if self.learning_rates.is_empty()
            || self.weight_decays.is_empty()
            || self.max_gradient_steps.is_empty()
            || self.architectures.is_empty()
            || self.seeds.is_empty()
        {
            return bad("every grid list must be non-empty");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("duplicate seeds");
        }
        for p in self.points() {
            self.probe_config(&p, self.seeds[0])
                .validate()
                .map_err(|e| SweepError::InvalidGrid(format!("{}: {e}", p.config_id)))?;
        }
        Ok(())
    }

    /// Grid points in architecture, learning-rate, weight-decay, step-cap order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &architecture in &self.architectures {
            for &learning_rate in &self.learning_rates {
                for &weight_decay in &self.weight_decays {
                    for &max_gradient_steps in &self.max_gradient_steps {
                        out.push(GridPoint {
                            config_id: format!("c{:04}", out.len()),
                            architecture,
                            learning_rate,
                            weight_decay,
                            max_gradient_steps,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn probe_config(&self, point: &GridPoint, seed: u64) -> ProbeConfig {
        ProbeConfig {
            hidden_layers: point.architecture.hidden_layers,
            hidden_width: point.architecture.hidden_width,
            learning_rate: point.learning_rate,
            weight_decay: point.weight_decay,
            max_gradient_steps: point.max_gradient_steps,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub task_seed: u64,
    pub function_seed: u64,
    pub task_granularity: Granularity,
    pub function_granularity: Granularity,
    pub grid: SweepGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub config_id: String,
    pub arm: Arm,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    /// Every grid point, in grid order.
    pub points: Vec<GridPoint>,
    /// Seed-averaged criteria of the configs whose runs all succeeded.
    pub records: Vec<CriteriaRecord>,
    pub failures: Vec<FailedRun>,
    pub provenance: Provenance,
}

impl SweepResults {
    pub fn point(&self, config_id: &str) -> Option<&GridPoint> {
        self.points.iter().find(|p| p.config_id == config_id)
    }

    /// Config ids with at least one failed run.
    pub fn failed_configs(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.failures.iter().map(|f| f.config_id.as_str()).collect();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub t_acc_f_ent: Correlation,
    pub t_acc_t_ent: Correlation,
    pub f_acc_f_ent: Correlation,
    /// Configs entering the correlations.
    pub n: usize,
    /// Configs excluded because a run diverged.
    pub failed_excluded: usize,
}

pub fn correlate_criteria(results: &SweepResults) -> Result<CorrelationTable, SweepError> {
    let n = results.records.len();
    if n < 3 {
        return Err(SweepError::TooFewConfigs(n));
    }
    let col = |f: fn(&CriteriaRecord) -> f64| results.records.iter().map(f).collect::<Vec<_>>();
    let (t_acc, t_ent, f_acc, f_ent) = (
        col(|r| r.t_acc),
        col(|r| r.t_ent),
        col(|r| r.f_acc),
        col(|r| r.f_ent),
    );
    let corr = |pair: &'static str, x: &[f64], y: &[f64]| {
        spearman(x, y)
            .map(|(rho, p)| Correlation { rho, p })
            .map_err(|source| SweepError::Correlation { pair, source })
    };
    Ok(CorrelationTable {
        t_acc_f_ent: corr("t_acc,f_ent", &t_acc, &f_ent)?,
        t_acc_t_ent: corr("t_acc,t_ent", &t_acc, &t_ent)?,
        f_acc_f_ent: corr("f_acc,f_ent", &f_acc, &f_ent)?,
        n,
        failed_excluded: results.failed_configs().len(),
    })
}

/// Train/dev/test matrices of one arm, built once and shared by every run.
struct ArmData {
    train: SplitData,
    dev: SplitData,
    test: SplitData,
}

impl ArmData {
    fn build(
        ds: &LabeledEmbeddingDataset,
        assignments: &ControlAssignments,
        arm: Arm,
    ) -> Result<Self, SweepError> {
        let targets = TargetSource::for_arm(arm, assignments);
        let split = |split: Split| {
            let data = SplitData::build(ds, &targets, split).map_err(|source| SweepError::Data {
                arm: arm.as_str(),
                split,
                source,
            })?;
            if data.is_empty() {
                return Err(SweepError::Data {
                    arm: arm.as_str(),
                    split,
                    source: ProbeError::EmptySplit(split),
                });
            }
            Ok(data)
        };
        Ok(Self {
            train: split(Split::Train)?,
            dev: split(Split::Dev)?,
            test: split(Split::Test)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    point: usize,
    arm: usize,
    seed: usize,
}

fn run_job(
    grid: &SweepGrid,
    points: &[GridPoint],
    data: &[ArmData; 3],
    labels: [usize; 3],
    job: Job,
) -> Result<EvalResult, ProbeError> {
    let config = grid.probe_config(&points[job.point], grid.seeds[job.seed]);
    let d = &data[job.arm];
    let probe = train_on(&config, &d.train, &d.dev, labels[job.arm])?;
    evaluate_split(&probe.params, &d.test)
}

#[cfg(feature = "parallel")]
fn execute<F>(jobs: &[Job], workers: usize, run: F) -> Result<Vec<Result<EvalResult, ProbeError>>, SweepError>
where
    F: Fn(Job) -> Result<EvalResult, ProbeError> + Sync,
{
    use rayon::prelude::*;
    use std::sync::mpsc;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    let (tx, rx) = mpsc::channel();
    pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .for_each_with(tx, |tx, (i, &job)| {
                // the receiver outlives the pool, so send cannot fail
                let _ = tx.send((i, run(job)));
            });
    });
    let mut slots: Vec<Option<Result<EvalResult, ProbeError>>> = (0..jobs.len()).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    Ok(slots.into_iter().map(|s| s.expect("every job reports")).collect())
}

#[cfg(not(feature = "parallel"))]
fn execute<F>(jobs: &[Job], _workers: usize, run: F) -> Result<Vec<Result<EvalResult, ProbeError>>, SweepError>
where
    F: Fn(Job) -> Result<EvalResult, ProbeError> + Sync,
{
    Ok(execute_sequential(jobs, run))
}

fn execute_sequential<F>(jobs: &[Job], run: F) -> Vec<Result<EvalResult, ProbeError>>
where
    F: Fn(Job) -> Result<EvalResult, ProbeError>,
{
    jobs.iter().map(|&j| run(j)).collect()
}

/// Trains and test-evaluates all three arms for every grid point and seed.
///
/// Results do not depend on `workers`: every run is seeded by its own config
/// and seed, and the aggregator places results by job index. Without the
/// `parallel` feature `workers` is ignored and runs execute in order.
pub fn run_sweep(
    grid: &SweepGrid,
    ds: &LabeledEmbeddingDataset,
    assignments: &ControlAssignments,
    workers: usize,
) -> Result<SweepResults, SweepError> {
    if workers == 0 {
        return Err(SweepError::NoWorkers);
    }
    sweep_with(grid, ds, assignments, Some(workers))
}

/// [`run_sweep`] on the calling thread, regardless of features.
pub fn run_sweep_sequential(
    grid: &SweepGrid,
    ds: &LabeledEmbeddingDataset,
    assignments: &ControlAssignments,
) -> Result<SweepResults, SweepError> {
    sweep_with(grid, ds, assignments, None)
}

fn sweep_with(
    grid: &SweepGrid,
    ds: &LabeledEmbeddingDataset,
    assignments: &ControlAssignments,
    workers: Option<usize>,
) -> Result<SweepResults, SweepError> {
    grid.validate()?;
    let data = [
        ArmData::build(ds, assignments, Arm::Probe)?,
        ArmData::build(ds, assignments, Arm::ControlTask)?,
        ArmData::build(ds, assignments, Arm::ControlFunction)?,
    ];
    let labels = [
        ds.num_labels(),
        assignments.task.label_count,
        ds.num_labels(),
    ];
    let points = grid.points();
    let mut jobs = Vec::with_capacity(points.len() * 3 * grid.seeds.len());
    for point in 0..points.len() {
        for arm in 0..3 {
            for seed in 0..grid.seeds.len() {
                jobs.push(Job { point, arm, seed });
            }
        }
    }

    let run = |job| run_job(grid, &points, &data, labels, job);
    let outcomes = match workers {
        Some(w) => execute(&jobs, w, run)?,
        None => execute_sequential(&jobs, run),
    };

    let per_point = 3 * grid.seeds.len();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (p, chunk) in outcomes.chunks(per_point).enumerate() {
        let mut arms: [Vec<EvalResult>; 3] = Default::default();
        let mut ok = true;
        for (k, outcome) in chunk.iter().enumerate() {
            let job = jobs[p * per_point + k];
            match outcome {
                Ok(e) => arms[job.arm].push(*e),
                Err(e) => {
                    ok = false;
                    failures.push(FailedRun {
                        config_id: points[p].config_id.clone(),
                        arm: Arm::ALL[job.arm],
                        seed: grid.seeds[job.seed],
                        message: e.to_string(),
                    });
                }
            }
        }
        if ok {
            let record = compute_criteria(
                points[p].config_id.clone(),
                &grid.seeds,
                &arms[0],
                &arms[1],
                &arms[2],
            )
            .expect("complete arms have equal seed counts");
            records.push(record);
        }
    }

    Ok(SweepResults {
        points,
        records,
        failures,
        provenance: Provenance {
            dataset_hash: ds.content_hash(),
            task_seed: assignments.task.seed,
            function_seed: assignments.function.seed,
            task_granularity: assignments.task.granularity,
            function_granularity: assignments.function.granularity,
            grid: grid.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = SweepGrid::default();
        let pts = g.points();
        assert_eq!(pts.len(), 18);
        assert_eq!(pts[0].config_id, "c0000");
        assert_eq!(pts[17].config_id, "c0017");
        assert_eq!(g.seeds, vec![73, 421, 9973, 361091]);
        // architecture varies slowest
        assert_eq!(pts[5].architecture, Architecture::new(0, 0));
        assert_eq!(pts[6].architecture, Architecture::new(1, 40));
        g.validate().unwrap();
    }

    #[test]
    fn empty_list_rejected() {
        let g = SweepGrid {
            weight_decays: vec![],
            ..SweepGrid::default()
        };
        assert!(matches!(g.validate(), Err(SweepError::InvalidGrid(_))));
    }

    #[test]
    fn zero_step_cap_rejected() {
        let g = SweepGrid {
            max_gradient_steps: vec![Some(0)],
            ..SweepGrid::default()
        };
        assert!(g.validate().is_err());
    }

    fn record(id: &str, t_acc: f64, f_ent: f64) -> CriteriaRecord {
        CriteriaRecord {
            config_id: id.into(),
            t_acc,
            t_ent: t_acc * 2.0,
            f_acc: t_acc + 0.1,
            f_ent,
            probe: vec![],
            control_task: vec![],
            control_function: vec![],
            seeds: vec![1],
        }
    }

    fn results(records: Vec<CriteriaRecord>) -> SweepResults {
        SweepResults {
            points: vec![],
            records,
            failures: vec![],
            provenance: Provenance {
                dataset_hash: String::new(),
                task_seed: 1,
                function_seed: 2,
                task_granularity: Granularity::Type,
                function_granularity: Granularity::Type,
                grid: SweepGrid::default(),
            },
        }
    }

    #[test]
    fn monotone_criteria_correlate_perfectly() {
        let r = results(
            (0..5)
                .map(|i| record(&format!("c{i}"), i as f64 * 0.1, (i as f64).exp()))
                .collect(),
        );
        let t = correlate_criteria(&r).unwrap();
        assert_eq!(t.t_acc_f_ent.rho, 1.0);
        assert_eq!(t.n, 5);
    }

    #[test]
    fn constant_t_acc_is_an_error() {
        let r = results((0..4).map(|i| record(&format!("c{i}"), 0.3, i as f64)).collect());
        assert!(matches!(
            correlate_criteria(&r),
            Err(SweepError::Correlation { .. })
        ));
    }

    #[test]
    fn too_few_configs() {
        let r = results(vec![record("a", 0.1, 0.2), record("b", 0.2, 0.3)]);
        assert!(matches!(correlate_criteria(&r), Err(SweepError::TooFewConfigs(2))));
    }
}
