//! The diagnostic classifier `q(T|R)`: a ReLU MLP with a log-softmax head.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub(crate) use train::train_on;
pub use train::{
    evaluate, evaluate_split, train, EvalResult, SplitData, TraceEntry, TrainedProbe,
};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controls::ControlError;
use crate::datamodel::Split;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("input width {actual} does not match probe input width {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("non-finite values in layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("split {0} has no tokens")]
    EmptySplit(Split),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("no table row matches input {0}")]
    UnknownInput(usize),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Hyperparameters of one probe training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `None` means no step cap; training is then bounded by `max_epochs`.
    pub max_gradient_steps: Option<u64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 1,
            hidden_width: 40,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            max_gradient_steps: None,
            batch_size: 128,
            max_epochs: 400,
            seed: 73,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be non-negative");
        }
        if self.max_gradient_steps == Some(0) {
            return bad("max_gradient_steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return bad("hidden_width must be positive");
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn layer_sizes(&self, input_dim: usize, num_labels: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        sizes.push(num_labels);
        sizes
    }
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParameters {
    pub layers: Vec<Dense>,
}

impl ProbeParameters {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[1], w[0])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn num_labels(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters flattened layer by layer (weight then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) for a parameter set of the same shape.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count());
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
    }

    /// Slices of every tensor, in `to_flat` order.
    pub(crate) fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases, drawn from `config.seed`.
pub fn init_probe(config: &ProbeConfig, input_dim: usize, num_labels: usize) -> ProbeParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sizes = config.layer_sizes(input_dim, num_labels);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight =
                Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..limit));
            Dense {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    ProbeParameters { layers }
}

/// Anything that maps inputs to label log-probabilities.
pub trait ConditionalModel: Sync {
    fn input_dim(&self) -> usize;
    fn num_labels(&self) -> usize;
    fn log_probs(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, ProbeError>;
}

impl ConditionalModel for ProbeParameters {
    fn input_dim(&self) -> usize {
        ProbeParameters::input_dim(self)
    }

    fn num_labels(&self) -> usize {
        ProbeParameters::num_labels(self)
    }

    fn log_probs(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, ProbeError> {
        forward(self, inputs)
    }
}

/// Row-wise max-shifted log-softmax, in place.
fn log_softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

struct Activations {
    /// `inputs[l]` feeds layer `l`; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Array2<f64>>,
    log_probs: Array2<f64>,
}

fn forward_full(params: &ProbeParameters, x: ArrayView2<'_, f64>) -> Result<Activations, ProbeError> {
    if x.ncols() != params.input_dim() {
        return Err(ProbeError::ShapeMismatch {
            expected: params.input_dim(),
            actual: x.ncols(),
        });
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut hidden_pre = Vec::with_capacity(n - 1);
    inputs.push(x.to_owned());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = inputs[i].dot(&layer.weight.t());
        z += &layer.bias;
        if i + 1 < n {
            let a = z.mapv(|v| v.max(0.0));
            hidden_pre.push(z);
            inputs.push(a);
        } else {
            log_softmax_rows(&mut z);
            if z.iter().any(|v| v.is_nan()) {
                return Err(ProbeError::NonFinite { layer: i });
            }
            return Ok(Activations {
                inputs,
                hidden_pre,
                log_probs: z,
            });
        }
    }
    unreachable!("probe has at least one layer")
}

/// Label log-probabilities for each input row.
pub fn forward(
    params: &ProbeParameters,
    inputs: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, ProbeError> {
    forward_full(params, inputs).map(|a| a.log_probs)
}

pub struct LossAndGradients {
    /// Mean negative log-likelihood plus the L2 penalty.
    pub loss: f64,
    /// Mean negative log-likelihood alone.
    pub data_loss: f64,
    pub gradients: ProbeParameters,
}

/// Cross entropy of `labels` under the probe, with `(weight_decay / 2) · Σ W²`
/// over weight matrices (biases excluded), and its exact gradient.
pub fn loss_and_gradients(
    params: &ProbeParameters,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    weight_decay: f64,
) -> Result<LossAndGradients, ProbeError> {
    let batch = inputs.nrows();
    if batch == 0 {
        return Err(ProbeError::EmptyBatch);
    }
    let num_labels = params.num_labels();
    if let Some(&label) = labels.iter().find(|&&l| l >= num_labels) {
        return Err(ProbeError::LabelOutOfRange { label, num_labels });
    }
    let acts = forward_full(params, inputs)?;
    let scale = 1.0 / batch as f64;

    let data_loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &t)| acts.log_probs[[i, t]])
        .sum::<f64>()
        * scale;
    let penalty: f64 = params
        .layers
        .iter()
        .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
        .sum::<f64>()
        * 0.5
        * weight_decay;

    // d(loss)/d(logits) = (softmax - onehot) / batch
    let mut delta = acts.log_probs.mapv(f64::exp);
    for (i, &t) in labels.iter().enumerate() {
        delta[[i, t]] -= 1.0;
    }
    delta *= scale;

    let mut gradients = params.zeros_like();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let g = &mut gradients.layers[l];
        g.weight = delta.t().dot(&acts.inputs[l]);
        if weight_decay != 0.0 {
            g.weight.scaled_add(weight_decay, &layer.weight);
        }
        g.bias = delta.sum_axis(Axis(0));
        if g.weight.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite { layer: l });
        }
        if l > 0 {
            let mut upstream = delta.dot(&layer.weight);
            Zip::from(&mut upstream)
                .and(&acts.hidden_pre[l - 1])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = upstream;
        }
    }

    let loss = data_loss + penalty;
    if !loss.is_finite() {
        return Err(ProbeError::NonFinite {
            layer: params.layers.len() - 1,
        });
    }
    Ok(LossAndGradients {
        loss,
        data_loss,
        gradients,
    })
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    m: ProbeParameters,
    v: ProbeParameters,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(params: &ProbeParameters, lr: f64) -> Self {
        Self {
            lr,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub(crate) fn step(&mut self, params: &mut ProbeParameters, grads: &ProbeParameters) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(layers: usize, width: usize, seed: u64) -> ProbeConfig {
        ProbeConfig {
            hidden_layers: layers,
            hidden_width: width,
            seed,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn linear_probe_shape() {
        let p = init_probe(&cfg(0, 99, 1), 7, 3);
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].weight.dim(), (3, 7));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(2, 8, 421);
        assert_eq!(init_probe(&c, 5, 4), init_probe(&c, 5, 4));
        assert_ne!(init_probe(&c, 5, 4), init_probe(&cfg(2, 8, 422), 5, 4));
    }

    #[test]
    fn parameter_count_one_hidden_layer() {
        let p = init_probe(&cfg(1, 40, 0), 768, 17);
        assert_eq!(p.parameter_count(), 768 * 40 + 40 + 40 * 17 + 17);
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = ProbeParameters::zeros(&[3, 4, 5]);
        let out = forward(&p, array![[1.0, -2.0, 0.5], [0.0, 0.0, 9.0]].view()).unwrap();
        for v in out.iter() {
            assert!((v + 5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_forward_matches_direct_softmax() {
        let mut p = ProbeParameters::zeros(&[2, 3]);
        p.layers[0].weight = array![[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]];
        p.layers[0].bias = array![0.1, -0.2, 0.3];
        let x = [0.4, -0.6];
        let out = forward(&p, array![[x[0], x[1]]].view()).unwrap();
        let logits: Vec<f64> = (0..3)
            .map(|r| p.layers[0].weight[[r, 0]] * x[0] + p.layers[0].weight[[r, 1]] * x[1] + p.layers[0].bias[r])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for r in 0..3 {
            assert!((out[[0, r]] - (logits[r].exp() / z).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_rows_equal_outputs() {
        let p = init_probe(&cfg(2, 6, 3), 4, 3);
        let out = forward(&p, array![[0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4]].view()).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn shape_mismatch() {
        let p = init_probe(&cfg(0, 1, 3), 4, 3);
        assert!(matches!(
            forward(&p, array![[0.1, 0.2]].view()),
            Err(ProbeError::ShapeMismatch { expected: 4, actual: 2 })
        ));
    }

    #[test]
    fn zero_probe_loss_is_log_k() {
        let p = ProbeParameters::zeros(&[3, 5, 4]);
        let r = loss_and_gradients(&p, array![[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]].view(), &[0, 3], 0.0)
            .unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_probe_has_zero_loss_and_gradient() {
        let mut p = ProbeParameters::zeros(&[1, 2]);
        p.layers[0].bias = array![1000.0, -1000.0];
        let r = loss_and_gradients(&p, array![[0.3], [0.7]].view(), &[0, 0], 0.0).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.gradients.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let p = ProbeParameters::zeros(&[2, 2]);
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            loss_and_gradients(&p, x.view(), &[], 0.0),
            Err(ProbeError::EmptyBatch)
        ));
    }

    fn finite_difference_check(
        params: &ProbeParameters,
        x: &Array2<f64>,
        y: &[usize],
        wd: f64,
    ) -> f64 {
        let analytic = loss_and_gradients(params, x.view(), y, wd)
            .unwrap()
            .gradients
            .to_flat();
        let flat = params.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = params.clone();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            probe.set_flat(&plus);
            let lp = loss_and_gradients(&probe, x.view(), y, wd).unwrap().loss;
            let mut minus = flat.clone();
            minus[i] -= h;
            probe.set_flat(&minus);
            let lm = loss_and_gradients(&probe, x.view(), y, wd).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-7);
            worst = worst.max((numeric - analytic[i]).abs() / denom);
        }
        worst
    }

    /// Smallest |pre-activation| over hidden units; finite differences are
    /// only valid away from the ReLU kink.
    fn kink_margin(params: &ProbeParameters, x: &Array2<f64>) -> f64 {
        let mut a = x.clone();
        let mut margin = f64::INFINITY;
        for l in &params.layers[..params.layers.len() - 1] {
            let z = a.dot(&l.weight.t()) + &l.bias;
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.mapv(|v| v.max(0.0));
        }
        margin
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let c = ProbeConfig {
            weight_decay: 0.1,
            ..cfg(1, 4, 11)
        };
        let p = init_probe(&c, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let err = finite_difference_check(&p, &x, &[0, 2, 1, 2], c.weight_decay);
        assert!(err < 1e-4, "relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_check_random_configs(
            layers in 0usize..=2,
            width in 1usize..=8,
            dim in 1usize..6,
            labels in 2usize..5,
            seed in any::<u64>(),
            wd in prop_oneof![Just(0.0), Just(0.01), Just(1.0)],
        ) {
            let c = ProbeConfig { weight_decay: wd, ..cfg(layers, width, seed) };
            let mut p = init_probe(&c, dim, labels);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
            for l in &mut p.layers {
                l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
            }
            let x = Array2::from_shape_simple_fn((4, dim), || rng.random_range(-1.0..1.0));
            let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..labels)).collect();
            prop_assume!(kink_margin(&p, &x) > 1e-3);
            let err = finite_difference_check(&p, &x, &y, wd);
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn outputs_are_normalized(seed in any::<u64>(), layers in 0usize..3) {
            let p = init_probe(&cfg(layers, 6, seed), 3, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-20.0..20.0));
            let out = forward(&p, x.view()).unwrap();
            for row in out.rows() {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
