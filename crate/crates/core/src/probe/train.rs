use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, init_probe, loss_and_gradients, Adam, ProbeConfig, ProbeError, ProbeParameters};
use crate::controls::TargetSource;
use crate::datamodel::{LabeledEmbeddingDataset, Split};

/// One split materialized as a dense `f64` design matrix plus targets.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl SplitData {
    pub fn build(
        ds: &LabeledEmbeddingDataset,
        targets: &TargetSource<'_>,
        split: Split,
    ) -> Result<Self, ProbeError> {
        let idx = ds.split_indices(split);
        let dim = ds.embedding_dim;
        let mut x = Array2::zeros((idx.len(), dim));
        let mut y = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            let v = targets.vector(ds, i)?;
            for (dst, &src) in x.row_mut(row).iter_mut().zip(v) {
                *dst = f64::from(src);
            }
            y.push(targets.label(ds, i)? as usize);
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean negative log-likelihood in nats per token.
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: u64,
    /// Mean minibatch loss (without penalty) over the preceding epoch; at
    /// step 0, the loss of the initial parameters on the whole train split.
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    /// Best-dev-loss checkpoint.
    pub params: ProbeParameters,
    pub config: ProbeConfig,
    pub trace: Vec<TraceEntry>,
    pub steps_taken: u64,
    pub best_dev_loss: f64,
}

impl TrainedProbe {
    pub fn min_trace_dev_loss(&self) -> f64 {
        self.trace
            .iter()
            .map(|e| e.dev_loss)
            .fold(f64::INFINITY, f64::min)
    }
}

impl super::ConditionalModel for TrainedProbe {
    fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    fn num_labels(&self) -> usize {
        self.params.num_labels()
    }

    fn log_probs(
        &self,
        inputs: ndarray::ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>, ProbeError> {
        forward(&self.params, inputs)
    }
}

/// Cross entropy and accuracy of `params` on materialized data. Argmax ties
/// go to the lowest label index.
pub fn evaluate_split(params: &ProbeParameters, data: &SplitData) -> Result<EvalResult, ProbeError> {
    if data.is_empty() {
        return Err(ProbeError::EmptyBatch);
    }
    let mut nll = 0.0;
    let mut correct = 0usize;
    // chunked to bound the activation memory on large splits
    const CHUNK: usize = 4096;
    for (start, x) in data
        .x
        .axis_chunks_iter(Axis(0), CHUNK)
        .enumerate()
        .map(|(c, x)| (c * CHUNK, x))
    {
        let lp = forward(params, x)?;
        for (r, row) in lp.rows().into_iter().enumerate() {
            let gold = data.y[start + r];
            nll -= row[gold];
            let mut best = 0;
            for (t, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = t;
                }
            }
            if best == gold {
                correct += 1;
            }
        }
    }
    let n = data.len();
    Ok(EvalResult {
        cross_entropy: nll / n as f64,
        accuracy: correct as f64 / n as f64,
        token_count: n,
    })
}

pub fn evaluate(
    probe: &TrainedProbe,
    ds: &LabeledEmbeddingDataset,
    targets: &TargetSource<'_>,
    split: Split,
) -> Result<EvalResult, ProbeError> {
    let data = SplitData::build(ds, targets, split)?;
    if data.is_empty() {
        return Err(ProbeError::EmptySplit(split));
    }
    evaluate_split(&probe.params, &data)
}

/// Mini-batch Adam on the train split with once-per-epoch dev evaluation,
/// returning the parameters with the lowest dev loss seen.
pub fn train(
    config: &ProbeConfig,
    ds: &LabeledEmbeddingDataset,
    targets: &TargetSource<'_>,
) -> Result<TrainedProbe, ProbeError> {
    config.validate()?;
    let train = SplitData::build(ds, targets, Split::Train)?;
    let dev = SplitData::build(ds, targets, Split::Dev)?;
    if train.is_empty() {
        return Err(ProbeError::EmptySplit(Split::Train));
    }
    if dev.is_empty() {
        return Err(ProbeError::EmptySplit(Split::Dev));
    }
    train_on(config, &train, &dev, ds.num_labels())
}

pub(crate) fn train_on(
    config: &ProbeConfig,
    train: &SplitData,
    dev: &SplitData,
    num_labels: usize,
) -> Result<TrainedProbe, ProbeError> {
    let mut params = init_probe(config, train.x.ncols(), num_labels);
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let initial_train = evaluate_split(&params, train)?.cross_entropy;
    let initial_dev = evaluate_split(&params, dev)?.cross_entropy;
    let mut trace = vec![TraceEntry {
        step: 0,
        train_loss: initial_train,
        dev_loss: initial_dev,
    }];
    let mut best = params.clone();
    let mut best_dev = initial_dev;

    let step_cap = config.max_gradient_steps.unwrap_or(u64::MAX);
    let mut steps = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = train.x.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let step = steps + 1;
            let out = loss_and_gradients(&params, x.view(), &y, config.weight_decay).map_err(
                |e| match e {
                    ProbeError::NonFinite { .. } => ProbeError::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                },
            )?;
            if !out.loss.is_finite() {
                return Err(ProbeError::Diverged {
                    step,
                    loss: out.loss,
                });
            }
            adam.step(&mut params, &out.gradients);
            steps = step;
            loss_sum += out.data_loss * batch.len() as f64;
            seen += batch.len();
            if steps >= step_cap {
                break;
            }
        }
        if !params.is_finite() {
            return Err(ProbeError::Diverged {
                step: steps,
                loss: f64::NAN,
            });
        }
        let dev_loss = evaluate_split(&params, dev)?.cross_entropy;
        if !dev_loss.is_finite() {
            return Err(ProbeError::Diverged {
                step: steps,
                loss: dev_loss,
            });
        }
        trace.push(TraceEntry {
            step: steps,
            train_loss: loss_sum / seen as f64,
            dev_loss,
        });
        if dev_loss < best_dev {
            best_dev = dev_loss;
            best.clone_from(&params);
        }
        if steps >= step_cap {
            break 'epochs;
        }
    }

    Ok(TrainedProbe {
        params: best,
        config: config.clone(),
        trace,
        steps_taken: steps,
        best_dev_loss: best_dev,
    })
}
