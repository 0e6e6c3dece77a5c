//! Probe-selection criteria and, for synthetic data, the exact error terms of
//! the control-task and control-function estimators.
//!
//! Notation used in field names:
//!
//! * `probe`: the probing-task probe `q(T|R)`, shared by both criteria.
//! * `control_task`: the probe `q(c(T)|R)` trained on random per-type labels.
//! * `control_function`: the probe `q(T|c(R))` trained on random per-type vectors.
//!
//! All quantities are in nats.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controls::{ControlAssignments, Granularity};
use crate::datamodel::{LabeledEmbeddingDataset, Split};
use crate::infotheory::{
    conditional_kl, entropy, kl_divergence, Categorical, ConditionalTable, InfoError, Weighting,
};
use crate::probe::{ConditionalModel, EvalResult, ProbeError};
use crate::synth::SyntheticGroundTruth;

/// Eq. 3 residuals above this are flagged in reports (never asserted).
pub const EQ3_FLAG_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CriteriaError {
    #[error("arms have different seed counts: probe {probe}, control task {task}, control function {function}")]
    SeedCountMismatch {
        probe: usize,
        task: usize,
        function: usize,
    },
    #[error("no evaluations to average")]
    NoSeeds,
}

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("ground truth unavailable: the information terms of a non-synthetic dataset are intractable")]
    GroundTruthUnavailable,
    #[error("ground truth is not enumerable: vectors carry additive noise (sigma = {0})")]
    NotEnumerable(f64),
    #[error("ground truth does not match dataset: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Info(#[from] InfoError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// The four selection criteria of one configuration, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaRecord {
    pub config_id: String,
    /// Probe accuracy minus control-task accuracy (selectivity).
    pub t_acc: f64,
    /// Control-task cross entropy minus probe cross entropy.
    pub t_ent: f64,
    /// Probe accuracy minus control-function accuracy.
    pub f_acc: f64,
    /// Control-function cross entropy minus probe cross entropy (gain estimate).
    pub f_ent: f64,
    pub probe: Vec<EvalResult>,
    pub control_task: Vec<EvalResult>,
    pub control_function: Vec<EvalResult>,
    pub seeds: Vec<u64>,
}

/// Seed-averaged `(accuracy, cross_entropy)`.
pub fn mean_metrics(evals: &[EvalResult]) -> (f64, f64) {
    let n = evals.len() as f64;
    let acc = evals.iter().map(|e| e.accuracy).sum::<f64>() / n;
    let ce = evals.iter().map(|e| e.cross_entropy).sum::<f64>() / n;
    (acc, ce)
}

impl CriteriaRecord {
    pub fn probe_means(&self) -> (f64, f64) {
        mean_metrics(&self.probe)
    }

    pub fn control_task_means(&self) -> (f64, f64) {
        mean_metrics(&self.control_task)
    }

    pub fn control_function_means(&self) -> (f64, f64) {
        mean_metrics(&self.control_function)
    }
}

pub fn compute_criteria(
    config_id: impl Into<String>,
    seeds: &[u64],
    probe: &[EvalResult],
    control_task: &[EvalResult],
    control_function: &[EvalResult],
) -> Result<CriteriaRecord, CriteriaError> {
    if probe.len() != control_task.len() || probe.len() != control_function.len() {
        return Err(CriteriaError::SeedCountMismatch {
            probe: probe.len(),
            task: control_task.len(),
            function: control_function.len(),
        });
    }
    if probe.is_empty() {
        return Err(CriteriaError::NoSeeds);
    }
    let (p_acc, p_ce) = mean_metrics(probe);
    let (t_acc, t_ce) = mean_metrics(control_task);
    let (f_acc, f_ce) = mean_metrics(control_function);
    Ok(CriteriaRecord {
        config_id: config_id.into(),
        t_acc: p_acc - t_acc,
        t_ent: t_ce - p_ce,
        f_acc: p_acc - f_acc,
        f_ent: f_ce - p_ce,
        probe: probe.to_vec(),
        control_task: control_task.to_vec(),
        control_function: control_function.to_vec(),
        seeds: seeds.to_vec(),
    })
}

/// Exact target laws of the three experiment arms.
#[derive(Debug, Clone)]
pub struct ArmTables {
    /// Inputs `embed(z)`, targets `p(T|z)`.
    pub probe: ConditionalTable,
    /// Inputs `embed(z)`, targets `p(c(T)|z)`: a point mass on the type's
    /// control label, or uniform for token-level draws.
    pub control_task: ConditionalTable,
    /// Type-level: inputs `c(z)` with targets `p(T|z)`. Token-level: the
    /// test-split control vectors, uniformly weighted, with targets `p(T)`.
    pub control_function: ConditionalTable,
}

impl ArmTables {
    pub fn build(
        truth: &SyntheticGroundTruth,
        ds: &LabeledEmbeddingDataset,
        assignments: &ControlAssignments,
    ) -> Result<Self, TheoryError> {
        check_consistency(truth, ds, assignments)?;
        let probe = truth.table();
        let (types, labels) = (truth.type_count(), truth.label_count());

        let task = &assignments.task;
        let task_cond = match task.granularity {
            Granularity::Type => Array2::from_shape_fn((types, labels), |(z, t)| {
                if task.labels[z] as usize == t {
                    1.0
                } else {
                    0.0
                }
            }),
            Granularity::Token => Array2::from_elem((types, labels), 1.0 / labels as f64),
        };
        let control_task =
            ConditionalTable::new(probe.inputs.clone(), probe.weights.clone(), task_cond)?;

        let func = &assignments.function;
        let control_function = match func.granularity {
            Granularity::Type => {
                let inputs = Array2::from_shape_fn((types, func.dim), |(z, j)| {
                    f64::from(func.row(z)[j])
                });
                ConditionalTable::new(inputs, probe.weights.clone(), probe.cond.clone())?
            }
            Granularity::Token => {
                let idx = ds.split_indices(Split::Test);
                if idx.is_empty() {
                    return Err(InfoError::EmptySplit(Split::Test).into());
                }
                let inputs = Array2::from_shape_fn((idx.len(), func.dim), |(m, j)| {
                    f64::from(func.row(idx[m])[j])
                });
                let marginal = Array1::from(truth.label_marginal().probs().to_vec());
                let cond = Array2::from_shape_fn((idx.len(), labels), |(_, t)| marginal[t]);
                let weights = Array1::from_elem(idx.len(), 1.0 / idx.len() as f64);
                ConditionalTable::new(inputs, weights, cond)?
            }
        };
        Ok(Self {
            probe,
            control_task,
            control_function,
        })
    }
}

fn check_consistency(
    truth: &SyntheticGroundTruth,
    ds: &LabeledEmbeddingDataset,
    assignments: &ControlAssignments,
) -> Result<(), TheoryError> {
    if truth.vector_noise > 0.0 {
        return Err(TheoryError::NotEnumerable(truth.vector_noise));
    }
    let mismatch = |m: String| Err(TheoryError::Mismatch(m));
    if truth.type_count() != ds.type_count {
        return mismatch(format!("{} vs {} types", truth.type_count(), ds.type_count));
    }
    if truth.label_count() != ds.num_labels() {
        return mismatch(format!("{} vs {} labels", truth.label_count(), ds.num_labels()));
    }
    if truth.embedding_dim() != ds.embedding_dim || assignments.function.dim != ds.embedding_dim {
        return mismatch(format!(
            "embedding dims: truth {}, dataset {}, control vectors {}",
            truth.embedding_dim(),
            ds.embedding_dim,
            assignments.function.dim
        ));
    }
    let need = |g: Granularity| match g {
        Granularity::Type => ds.type_count,
        Granularity::Token => ds.records.len(),
    };
    if assignments.task.labels.len() < need(assignments.task.granularity)
        || assignments.function.rows() < need(assignments.function.granularity)
    {
        return mismatch("control assignments do not cover the dataset".into());
    }
    Ok(())
}

/// A model that answers by exact table lookup: each input row of `table`
/// maps to its target distribution. Used to realize ideal probes.
#[derive(Debug, Clone)]
pub struct TableModel {
    index: HashMap<Vec<u64>, usize>,
    log_cond: Array2<f64>,
    input_dim: usize,
}

impl TableModel {
    pub fn from_table(table: &ConditionalTable) -> Self {
        let index = table
            .inputs
            .rows()
            .into_iter()
            .enumerate()
            .map(|(m, r)| (r.iter().map(|v| v.to_bits()).collect(), m))
            .collect();
        Self {
            index,
            log_cond: table.cond.mapv(f64::ln),
            input_dim: table.inputs.ncols(),
        }
    }
}

impl ConditionalModel for TableModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_labels(&self) -> usize {
        self.log_cond.ncols()
    }

    fn log_probs(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, ProbeError> {
        let mut out = Array2::zeros((inputs.nrows(), self.log_cond.ncols()));
        for (i, row) in inputs.rows().into_iter().enumerate() {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let m = *self.index.get(&key).ok_or(ProbeError::UnknownInput(i))?;
            out.row_mut(i).assign(&self.log_cond.row(m));
        }
        Ok(out)
    }
}

/// Exact decomposition of every criterion into information and KL terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryErrorReport {
    /// `H(T)`.
    pub h_t: f64,
    /// `I(T;Z)`, equal to `I(T;R)`.
    pub i_true: f64,
    /// `H(c(T))`.
    pub h_control_labels: f64,
    /// `I(c(T);R)`.
    pub i_control_labels: f64,
    /// `I(T;c(R))`: zero for token-level control vectors, `I(T;Z)` for type-level ones.
    pub i_control_function: f64,
    /// `G = I(T;R) - I(T;c(R))`.
    pub gain_true: f64,

    pub probe_cross_entropy: f64,
    pub control_task_cross_entropy: f64,
    pub control_function_cross_entropy: f64,
    /// `f_ent` under true-joint weighting.
    pub gain_estimate: f64,
    /// `t_ent` under true-joint weighting.
    pub t_ent: f64,

    /// `KL(p ‖ q_θ)`; also `KL(p ‖ q_φ)` since the probing-arm probe is shared.
    pub kl_probe: f64,
    /// `KL(p_c ‖ q_θc)`.
    pub kl_control_task: f64,
    /// `KL(p_c ‖ q_φc)`.
    pub kl_control_function: f64,
    /// `H(T) - H(c(T)) + I(c(T);R)`.
    pub const_term: f64,

    /// `H(p,q_θ) - [H(T) - I(T;R) + KL(p‖q_θ)]`.
    pub decomposition_residual: f64,
    /// `f_ent - [G + KL(p_c‖q_φc) - KL(p‖q_φ)]`.
    pub gain_identity_residual: f64,

    /// `G - gain_estimate`.
    pub delta_p: f64,
    /// `KL(p‖q_φ) - KL(p_c‖q_φc)`.
    pub delta_p_kl_form: f64,
    pub delta_p_residual: f64,

    /// From `t_ent = I(T;R) - Δ_h`.
    pub delta_h: f64,
    /// `KL(p‖q_θ) - KL(p_c‖q_θc) + const_term`.
    pub delta_h_kl_form: f64,
    pub delta_h_residual: f64,

    /// `KL(p(T) ‖ q̄_φc(T))`, control-function predictions averaged over inputs.
    pub kl_marginal_control_function: f64,
    /// `KL(p(c(T)) ‖ q̄_θc(c(T)))`, control-task predictions averaged over inputs.
    pub kl_marginal_control_task: f64,
    pub eq3_lhs: f64,
    pub eq3_rhs: f64,
    pub eq3_residual: f64,
    /// `|eq3_residual| > 0.05`.
    pub eq3_flagged: bool,

    /// `KL(p‖q_θ)` weighted by the test split's empirical type frequencies.
    pub kl_probe_empirical_test: f64,
}

impl TheoryErrorReport {
    /// Largest absolute residual among the three algebraic identities.
    pub fn max_identity_residual(&self) -> f64 {
        [
            self.decomposition_residual,
            self.gain_identity_residual,
            self.delta_p_residual,
            self.delta_h_residual,
        ]
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs()))
    }

    /// The same report with every information quantity multiplied by `factor`
    /// (e.g. `1/ln 2` for bits).
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |v: f64| v * factor;
        Self {
            h_t: s(self.h_t),
            i_true: s(self.i_true),
            h_control_labels: s(self.h_control_labels),
            i_control_labels: s(self.i_control_labels),
            i_control_function: s(self.i_control_function),
            gain_true: s(self.gain_true),
            probe_cross_entropy: s(self.probe_cross_entropy),
            control_task_cross_entropy: s(self.control_task_cross_entropy),
            control_function_cross_entropy: s(self.control_function_cross_entropy),
            gain_estimate: s(self.gain_estimate),
            t_ent: s(self.t_ent),
            kl_probe: s(self.kl_probe),
            kl_control_task: s(self.kl_control_task),
            kl_control_function: s(self.kl_control_function),
            const_term: s(self.const_term),
            decomposition_residual: s(self.decomposition_residual),
            gain_identity_residual: s(self.gain_identity_residual),
            delta_p: s(self.delta_p),
            delta_p_kl_form: s(self.delta_p_kl_form),
            delta_p_residual: s(self.delta_p_residual),
            delta_h: s(self.delta_h),
            delta_h_kl_form: s(self.delta_h_kl_form),
            delta_h_residual: s(self.delta_h_residual),
            kl_marginal_control_function: s(self.kl_marginal_control_function),
            kl_marginal_control_task: s(self.kl_marginal_control_task),
            eq3_lhs: s(self.eq3_lhs),
            eq3_rhs: s(self.eq3_rhs),
            eq3_residual: s(self.eq3_residual),
            eq3_flagged: self.eq3_flagged,
            kl_probe_empirical_test: s(self.kl_probe_empirical_test),
        }
    }
}

/// Computes every field of [`TheoryErrorReport`] by enumeration over the
/// arms' exact target laws. Refuses to run without ground truth.
pub fn theory_errors(
    truth: Option<&SyntheticGroundTruth>,
    ds: &LabeledEmbeddingDataset,
    assignments: &ControlAssignments,
    probe: &dyn ConditionalModel,
    control_task_probe: &dyn ConditionalModel,
    control_function_probe: &dyn ConditionalModel,
) -> Result<TheoryErrorReport, TheoryError> {
    let truth = truth.ok_or(TheoryError::GroundTruthUnavailable)?;
    let arms = ArmTables::build(truth, ds, assignments)?;

    let h_t = arms.probe.target_entropy();
    let i_true = arms.probe.mutual_information();
    let h_control_labels = arms.control_task.target_entropy();
    let i_control_labels = arms.control_task.mutual_information();
    let i_control_function = arms.control_function.mutual_information();
    let gain_true = i_true - i_control_function;

    let probe_ce = arms.probe.cross_entropy(probe)?;
    let task_ce = arms.control_task.cross_entropy(control_task_probe)?;
    let func_ce = arms.control_function.cross_entropy(control_function_probe)?;
    let gain_estimate = func_ce - probe_ce;
    let t_ent = task_ce - probe_ce;

    let kl_probe = conditional_kl(truth, probe, Weighting::TrueJoint)?;
    let kl_control_task = arms.control_task.expected_kl(control_task_probe)?;
    let kl_control_function = arms.control_function.expected_kl(control_function_probe)?;
    let const_term = h_t - h_control_labels + i_control_labels;

    let decomposition_residual = probe_ce - (h_t - i_true + kl_probe);
    let gain_identity_residual =
        gain_estimate - (gain_true + kl_control_function - kl_probe);

    let delta_p = gain_true - gain_estimate;
    let delta_p_kl_form = kl_probe - kl_control_function;
    let delta_h = i_true - t_ent;
    let delta_h_kl_form = kl_probe - kl_control_task + const_term;

    let q_bar_function = arms.control_function.marginal_prediction(control_function_probe)?;
    let q_bar_task = arms.control_task.marginal_prediction(control_task_probe)?;
    let kl_marginal_control_function =
        kl_divergence(&arms.control_function.target_marginal(), &q_bar_function)?;
    let kl_marginal_control_task =
        kl_divergence(&arms.control_task.target_marginal(), &q_bar_task)?;
    let eq3_lhs = delta_h - delta_p;
    let eq3_rhs = const_term - kl_marginal_control_function + kl_marginal_control_task;
    let eq3_residual = eq3_lhs - eq3_rhs;

    let kl_probe_empirical_test =
        conditional_kl(truth, probe, Weighting::EmpiricalSplit(ds, Split::Test))?;

    Ok(TheoryErrorReport {
        h_t,
        i_true,
        h_control_labels,
        i_control_labels,
        i_control_function,
        gain_true,
        probe_cross_entropy: probe_ce,
        control_task_cross_entropy: task_ce,
        control_function_cross_entropy: func_ce,
        gain_estimate,
        t_ent,
        kl_probe,
        kl_control_task,
        kl_control_function,
        const_term,
        decomposition_residual,
        gain_identity_residual,
        delta_p,
        delta_p_kl_form,
        delta_p_residual: delta_p - delta_p_kl_form,
        delta_h,
        delta_h_kl_form,
        delta_h_residual: delta_h - delta_h_kl_form,
        kl_marginal_control_function,
        kl_marginal_control_task,
        eq3_lhs,
        eq3_rhs,
        eq3_residual,
        eq3_flagged: eq3_residual.abs() > EQ3_FLAG_THRESHOLD,
        kl_probe_empirical_test,
    })
}

/// Ideal probes for all three arms: each emits its arm's true conditional.
pub fn perfect_models(
    truth: &SyntheticGroundTruth,
    ds: &LabeledEmbeddingDataset,
    assignments: &ControlAssignments,
) -> Result<[TableModel; 3], TheoryError> {
    let arms = ArmTables::build(truth, ds, assignments)?;
    Ok([
        TableModel::from_table(&arms.probe),
        TableModel::from_table(&arms.control_task),
        TableModel::from_table(&arms.control_function),
    ])
}

/// `H(p)` of a categorical, re-exported for report consumers.
pub fn label_entropy(p: &Categorical) -> f64 {
    entropy(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{ControlOptions, VectorDistribution};
    use crate::synth::{generate, SyntheticSpec};

    fn eval(acc: f64, ce: f64) -> EvalResult {
        EvalResult {
            cross_entropy: ce,
            accuracy: acc,
            token_count: 10,
        }
    }

    #[test]
    fn criteria_arithmetic() {
        let r = compute_criteria("c", &[1], &[eval(0.95, 0.20)], &[eval(0.60, 1.0)], &[eval(0.1, 2.80)])
            .unwrap();
        assert!((r.t_acc - 0.35).abs() < 1e-15);
        assert!((r.f_ent - 2.60).abs() < 1e-15);
        assert!((r.t_ent - 0.80).abs() < 1e-15);
        assert!((r.f_acc - 0.85).abs() < 1e-15);
    }

    #[test]
    fn identical_arms_give_zero_criteria() {
        let e = [eval(0.7, 0.9), eval(0.5, 1.1)];
        let r = compute_criteria("c", &[1, 2], &e, &e, &e).unwrap();
        assert_eq!([r.t_acc, r.t_ent, r.f_acc, r.f_ent], [0.0; 4]);
    }

    #[test]
    fn seed_averaging() {
        let r = compute_criteria(
            "c",
            &[1, 2],
            &[eval(0.9, 0.1), eval(0.7, 0.3)],
            &[eval(0.5, 1.0), eval(0.3, 1.2)],
            &[eval(0.2, 2.0), eval(0.2, 2.2)],
        )
        .unwrap();
        assert!((r.t_acc - 0.4).abs() < 1e-15);
        assert!((r.f_ent - 1.9).abs() < 1e-15);
    }

    #[test]
    fn mismatched_seed_counts() {
        assert!(matches!(
            compute_criteria("c", &[1], &[eval(1.0, 0.0)], &[], &[eval(1.0, 0.0)]),
            Err(CriteriaError::SeedCountMismatch { .. })
        ));
    }

    fn setup(
        function_granularity: Granularity,
    ) -> (LabeledEmbeddingDataset, SyntheticGroundTruth, ControlAssignments) {
        let (ds, truth) = generate(&SyntheticSpec {
            type_count: 8,
            label_count: 4,
            embedding_dim: 8,
            label_noise: 0.2,
            train_tokens: 100,
            dev_tokens: 40,
            test_tokens: 40,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let a = ControlAssignments::draw(
            &ds,
            &ControlOptions {
                function_granularity,
                distribution: VectorDistribution::StandardNormal,
                ..ControlOptions::default()
            },
        )
        .unwrap();
        (ds, truth, a)
    }

    #[test]
    fn perfect_probes_zero_every_kl() {
        for g in [Granularity::Type, Granularity::Token] {
            let (ds, truth, a) = setup(g);
            let [p, t, f] = perfect_models(&truth, &ds, &a).unwrap();
            let r = theory_errors(Some(&truth), &ds, &a, &p, &t, &f).unwrap();
            assert!(r.kl_probe.abs() < 1e-12);
            assert!(r.kl_control_task.abs() < 1e-12);
            assert!(r.kl_control_function.abs() < 1e-12);
            assert!(r.delta_p.abs() < 1e-12);
            assert!(r.max_identity_residual() < 1e-9);
            assert!(r.eq3_residual.abs() < 1e-9);
            assert!((r.gain_estimate - r.gain_true).abs() < 1e-12);
            match g {
                Granularity::Token => {
                    assert!(r.i_control_function.abs() < 1e-12);
                    assert!((r.gain_estimate - r.i_true).abs() < 1e-12);
                }
                Granularity::Type => {
                    assert!((r.i_control_function - r.i_true).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn refuses_without_truth() {
        let (ds, truth, a) = setup(Granularity::Type);
        let [p, t, f] = perfect_models(&truth, &ds, &a).unwrap();
        assert!(matches!(
            theory_errors(None, &ds, &a, &p, &t, &f),
            Err(TheoryError::GroundTruthUnavailable)
        ));
    }

    #[test]
    fn type_level_control_task_const_term_is_label_entropy() {
        let (ds, truth, a) = setup(Granularity::Type);
        let [p, t, f] = perfect_models(&truth, &ds, &a).unwrap();
        let r = theory_errors(Some(&truth), &ds, &a, &p, &t, &f).unwrap();
        // control label is a function of the type, so I(c(T);R) = H(c(T))
        assert!((r.i_control_labels - r.h_control_labels).abs() < 1e-12);
        assert!((r.const_term - r.h_t).abs() < 1e-12);
    }
}
