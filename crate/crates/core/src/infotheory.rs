//! Entropy, KL divergence and mutual information over finite supports, in nats.
//!
//! Conventions: `0 · ln 0 = 0`; a KL term with `p_i > 0` and `q_i = 0` is an
//! error, never `+inf`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::datamodel::{LabeledEmbeddingDataset, Split};
use crate::probe::{ConditionalModel, ProbeError};
use crate::synth::SyntheticGroundTruth;

pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("empty distribution")]
    Empty,
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("invalid probability {value} at index {index}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("support sizes differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("absolute continuity violated at index {index}: p = {p}, q = 0")]
    AbsoluteContinuity { index: usize, p: f64 },
    #[error("absolute continuity violated for input {input}, label {label}: p = {p}, q = 0")]
    ConditionalAbsoluteContinuity { input: usize, label: usize, p: f64 },
    #[error("joint table has zero total count")]
    ZeroTotal,
    #[error("joint table shape {rows}x{cols} does not match {len} entries")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("model input width {model} differs from table input width {table}")]
    InputWidth { model: usize, table: usize },
    #[error("split {0} has no tokens")]
    EmptySplit(Split),
    #[error("token type {type_id} is outside the ground truth's {types} types")]
    UnknownType { type_id: u32, types: usize },
    #[error(transparent)]
    Model(#[from] ProbeError),
}

/// A probability vector over `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self, InfoError> {
        if probs.is_empty() {
            return Err(InfoError::Empty);
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(InfoError::InvalidProbability { index, value });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(InfoError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution needs a non-empty support");
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self, InfoError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(InfoError::ZeroTotal);
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub fn entropy(d: &Categorical) -> f64 {
    // clamp guards against -0.0 and sub-ulp negatives on point masses
    (-d.probs.iter().map(|&p| plogp(p)).sum::<f64>()).max(0.0)
}

pub fn cross_entropy(p: &Categorical, q: &Categorical) -> Result<f64, InfoError> {
    check_same_len(p, q)?;
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(InfoError::AbsoluteContinuity { index, p: pi });
            }
            total -= pi * qi.ln();
        }
    }
    Ok(total)
}

pub fn kl_divergence(p: &Categorical, q: &Categorical) -> Result<f64, InfoError> {
    check_same_len(p, q)?;
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(InfoError::AbsoluteContinuity { index, p: pi });
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total.max(0.0))
}

fn check_same_len(p: &Categorical, q: &Categorical) -> Result<(), InfoError> {
    if p.len() != q.len() {
        return Err(InfoError::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

/// Non-negative integer contingency table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointCounts {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
}

impl JointCounts {
    pub fn new(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self, InfoError> {
        if rows * cols != counts.len() || rows == 0 || cols == 0 {
            return Err(InfoError::Shape {
                rows,
                cols,
                len: counts.len(),
            });
        }
        if counts.iter().sum::<u64>() == 0 {
            return Err(InfoError::ZeroTotal);
        }
        Ok(Self { rows, cols, counts })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, InfoError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(InfoError::Shape {
                rows: rows.len(),
                cols,
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Tallies `(x, y)` pairs into a `rows × cols` table.
    pub fn from_pairs(
        rows: usize,
        cols: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, InfoError> {
        let mut counts = vec![0u64; rows * cols];
        for (x, y) in pairs {
            counts[x * cols + y] += 1;
        }
        Self::new(rows, cols, counts)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn to_probabilities(&self) -> Array2<f64> {
        let total = self.total() as f64;
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            self.counts[i * self.cols + j] as f64 / total
        })
    }
}

/// `I(X;Y)` of a joint probability table (rows = X, cols = Y).
pub fn mutual_information(joint: ArrayView2<'_, f64>) -> f64 {
    let px = joint.sum_axis(Axis(1));
    let py = joint.sum_axis(Axis(0));
    let mut total = 0.0;
    for ((i, j), &pxy) in joint.indexed_iter() {
        if pxy > 0.0 {
            total += pxy * (pxy / (px[i] * py[j])).ln();
        }
    }
    total.max(0.0)
}

/// Plug-in (maximum-likelihood) mutual information of an empirical joint.
pub fn mutual_information_plugin(j: &JointCounts) -> f64 {
    mutual_information(j.to_probabilities().view())
}

/// Entropy of each margin of a joint table: `(H(rows), H(cols))`.
pub fn marginal_entropies(joint: ArrayView2<'_, f64>) -> (f64, f64) {
    let h = |m: Array1<f64>| -> f64 { (-m.iter().map(|&p| plogp(p)).sum::<f64>()).max(0.0) };
    (h(joint.sum_axis(Axis(1))), h(joint.sum_axis(Axis(0))))
}

/// A finite input distribution with a known conditional target law.
///
/// Row `m` of `inputs` occurs with probability `weights[m]` and its target
/// is distributed as row `m` of `cond`. Every expectation the criteria need
/// is an exact finite sum over this table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    pub inputs: Array2<f64>,
    pub weights: Array1<f64>,
    pub cond: Array2<f64>,
}

impl ConditionalTable {
    pub fn new(
        inputs: Array2<f64>,
        weights: Array1<f64>,
        cond: Array2<f64>,
    ) -> Result<Self, InfoError> {
        let m = inputs.nrows();
        if weights.len() != m || cond.nrows() != m {
            return Err(InfoError::Shape {
                rows: m,
                cols: cond.ncols(),
                len: weights.len(),
            });
        }
        Categorical::new(weights.to_vec())?;
        for row in cond.rows() {
            Categorical::new(row.to_vec())?;
        }
        Ok(Self {
            inputs,
            weights,
            cond,
        })
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.cond.ncols()
    }

    /// `p(input, target)`.
    pub fn joint(&self) -> Array2<f64> {
        &self.cond * &self.weights.view().insert_axis(Axis(1))
    }

    pub fn target_marginal(&self) -> Categorical {
        Categorical {
            probs: self.joint().sum_axis(Axis(0)).to_vec(),
        }
    }

    pub fn target_entropy(&self) -> f64 {
        entropy(&self.target_marginal())
    }

    /// `I(target; input)` with inputs identified by row.
    pub fn mutual_information(&self) -> f64 {
        mutual_information(self.joint().view())
    }

    fn model_log_probs(&self, model: &dyn ConditionalModel) -> Result<Array2<f64>, InfoError> {
        if model.input_dim() != self.inputs.ncols() {
            return Err(InfoError::InputWidth {
                model: model.input_dim(),
                table: self.inputs.ncols(),
            });
        }
        let out = model.log_probs(self.inputs.view())?;
        if out.ncols() != self.num_labels() {
            return Err(InfoError::LengthMismatch(out.ncols(), self.num_labels()));
        }
        Ok(out)
    }

    /// `H(p, q) = -Σ_m w_m Σ_t p(t|m) ln q(t|m)`.
    pub fn cross_entropy(&self, model: &dyn ConditionalModel) -> Result<f64, InfoError> {
        let log_q = self.model_log_probs(model)?;
        let mut total = 0.0;
        for (m, (&w, (p_row, q_row))) in self
            .weights
            .iter()
            .zip(self.cond.rows().into_iter().zip(log_q.rows()))
            .enumerate()
        {
            let mut row_total = 0.0;
            for (t, (&p, &lq)) in p_row.iter().zip(q_row).enumerate() {
                if p > 0.0 {
                    if lq == f64::NEG_INFINITY {
                        return Err(InfoError::ConditionalAbsoluteContinuity {
                            input: m,
                            label: t,
                            p,
                        });
                    }
                    row_total -= p * lq;
                }
            }
            total += w * row_total;
        }
        Ok(total)
    }

    /// `E_m KL(p(·|m) ‖ q(·|m))`, evaluated from log-probabilities so that
    /// probabilities too small for `f64` do not break absolute continuity.
    pub fn expected_kl(&self, model: &dyn ConditionalModel) -> Result<f64, InfoError> {
        let log_q = self.model_log_probs(model)?;
        let mut total = 0.0;
        for (m, (&w, (p_row, q_row))) in self
            .weights
            .iter()
            .zip(self.cond.rows().into_iter().zip(log_q.rows()))
            .enumerate()
        {
            if w == 0.0 {
                continue;
            }
            let mut kl = 0.0;
            for (t, (&p, &lq)) in p_row.iter().zip(q_row).enumerate() {
                if p > 0.0 {
                    if lq == f64::NEG_INFINITY {
                        return Err(InfoError::ConditionalAbsoluteContinuity {
                            input: m,
                            label: t,
                            p,
                        });
                    }
                    kl += p * (p.ln() - lq);
                }
            }
            total += w * kl.max(0.0);
        }
        Ok(total)
    }

    /// The model's predictions averaged over the input distribution.
    pub fn marginal_prediction(
        &self,
        model: &dyn ConditionalModel,
    ) -> Result<Categorical, InfoError> {
        let q = self.model_log_probs(model)?.mapv(f64::exp);
        let avg = q.t().dot(&self.weights);
        Categorical::from_weights(avg.as_slice().expect("contiguous"))
    }

    pub fn with_weights(&self, weights: Array1<f64>) -> Result<Self, InfoError> {
        Self::new(self.inputs.clone(), weights, self.cond.clone())
    }
}

/// Which distribution over latent types weights a conditional expectation.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    /// The generator's `p(Z)`.
    TrueJoint,
    /// Empirical type frequencies of one split.
    EmpiricalSplit(&'a LabeledEmbeddingDataset, Split),
}

/// Empirical type frequencies of `split`.
pub fn empirical_type_weights(
    ds: &LabeledEmbeddingDataset,
    split: Split,
    type_count: usize,
) -> Result<Array1<f64>, InfoError> {
    let mut counts = Array1::<f64>::zeros(type_count);
    let mut n = 0usize;
    for r in ds.records.iter().filter(|r| r.split == split) {
        let z = r.type_id as usize;
        if z >= type_count {
            return Err(InfoError::UnknownType {
                type_id: r.type_id,
                types: type_count,
            });
        }
        counts[z] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(InfoError::EmptySplit(split));
    }
    Ok(counts / n as f64)
}

/// `Σ_z w(z) · KL(p(T|Z=z) ‖ q(T|R=embed(z)))`.
pub fn conditional_kl(
    truth: &SyntheticGroundTruth,
    probe: &dyn ConditionalModel,
    weighting: Weighting<'_>,
) -> Result<f64, InfoError> {
    let table = truth.table();
    match weighting {
        Weighting::TrueJoint => table.expected_kl(probe),
        Weighting::EmpiricalSplit(ds, split) => {
            let w = empirical_type_weights(ds, split, truth.type_count())?;
            table.with_weights(w)?.expected_kl(probe)
        }
    }
}
