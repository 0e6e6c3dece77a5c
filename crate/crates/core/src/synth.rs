//! Synthetic datasets whose `p(Z)`, `p(T|Z)` and type embeddings are known,
//! so that `H(T)`, `I(T;R)` and every conditional KL can be enumerated.
//!
//! Tokens are drawn i.i.d.: a latent type `Z ~ p(Z)`, then `T ~ p(T|Z)`, and the
//! token's vector is `embed(Z)`. Because `embed` is injective and noise-free,
//! `I(T;R) = I(T;Z)` exactly.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{LabeledEmbeddingDataset, Split, TokenRecord};
use crate::infotheory::{Categorical, ConditionalTable, InfoError};

pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_EMBED_FILE: &str = "truth_embed.f32";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error("invalid ground truth: {0}")]
    InvalidTruth(String),
    #[error(transparent)]
    Info(#[from] InfoError),
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingScheme {
    /// Signed one-hot rows while they last, then ±1 sign codes; every row is
    /// an extreme point of the set, so each type is linearly separable.
    #[default]
    OrthogonalLike,
    /// Rows i.i.d. standard normal.
    RandomGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TypeDistribution {
    #[default]
    Uniform,
    /// `p(z) ∝ (z + 1)^-exponent`.
    Zipf { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub type_count: usize,
    pub label_count: usize,
    pub embedding_dim: usize,
    /// Mass spread uniformly over the non-dominant labels of each type.
    pub label_noise: f64,
    pub train_tokens: usize,
    pub dev_tokens: usize,
    pub test_tokens: usize,
    #[serde(default)]
    pub embedding_scheme: EmbeddingScheme,
    #[serde(default)]
    pub type_distribution: TypeDistribution,
    /// Std-dev of additive Gaussian noise on token vectors. Non-zero values
    /// make the truth non-enumerable; theory checks refuse such datasets.
    #[serde(default)]
    pub vector_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            type_count: 64,
            label_count: 16,
            embedding_dim: 32,
            label_noise: 0.2,
            train_tokens: 4000,
            dev_tokens: 1000,
            test_tokens: 1000,
            embedding_scheme: EmbeddingScheme::OrthogonalLike,
            type_distribution: TypeDistribution::Uniform,
            vector_noise: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Infeasible(m));
        if self.type_count == 0 || self.label_count == 0 {
            return bad("type_count and label_count must be positive".into());
        }
        if self.label_count > self.type_count {
            return bad(format!(
                "{} labels cannot all be dominant for {} types",
                self.label_count, self.type_count
            ));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0, 1)", self.label_noise));
        }
        if self.label_count == 1 && self.label_noise > 0.0 {
            return bad("label_noise needs at least two labels".into());
        }
        if self.train_tokens == 0 || self.dev_tokens == 0 || self.test_tokens == 0 {
            return bad("split sizes must be positive".into());
        }
        if !(self.vector_noise >= 0.0) || !self.vector_noise.is_finite() {
            return bad("vector_noise must be non-negative".into());
        }
        if let TypeDistribution::Zipf { exponent } = self.type_distribution {
            if !(exponent >= 0.0) || !exponent.is_finite() {
                return bad("zipf exponent must be non-negative".into());
            }
        }
        if self.embedding_scheme == EmbeddingScheme::OrthogonalLike
            && self.embedding_dim < 64
            && self.type_count as u128 > 1u128 << self.embedding_dim
        {
            return bad(format!(
                "orthogonal_like embeddings of dim {} cannot separate {} types",
                self.embedding_dim, self.type_count
            ));
        }
        Ok(())
    }
}

/// Exact generative law of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    pub p_z: Categorical,
    /// `K × k`, row `z` is `p(T | Z = z)`.
    pub cond: Array2<f64>,
    /// `K × d`; entries are exactly representable as `f32`.
    pub embed: Array2<f64>,
    pub embedding_scheme: EmbeddingScheme,
    pub seed: u64,
    pub vector_noise: f64,
}

impl SyntheticGroundTruth {
    pub fn new(p_z: Categorical, cond: Array2<f64>, embed: Array2<f64>) -> Result<Self, SynthError> {
        let truth = Self {
            p_z,
            cond,
            embed,
            embedding_scheme: EmbeddingScheme::OrthogonalLike,
            seed: 0,
            vector_noise: 0.0,
        };
        truth.check()?;
        Ok(truth)
    }

    fn check(&self) -> Result<(), SynthError> {
        let k_types = self.p_z.len();
        if self.cond.nrows() != k_types || self.embed.nrows() != k_types {
            return Err(SynthError::InvalidTruth(format!(
                "p_z has {k_types} types, cond {} rows, embed {} rows",
                self.cond.nrows(),
                self.embed.nrows()
            )));
        }
        for (z, row) in self.cond.rows().into_iter().enumerate() {
            Categorical::new(row.to_vec())
                .map_err(|e| SynthError::InvalidTruth(format!("cond row {z}: {e}")))?;
        }
        check_distinct_rows(&self.embed)
    }

    pub fn type_count(&self) -> usize {
        self.p_z.len()
    }

    pub fn label_count(&self) -> usize {
        self.cond.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embed.ncols()
    }

    /// Inputs `embed(z)` weighted by `p(z)` with targets `p(T|z)`.
    pub fn table(&self) -> ConditionalTable {
        ConditionalTable::new(
            self.embed.clone(),
            Array1::from(self.p_z.probs().to_vec()),
            self.cond.clone(),
        )
        .expect("ground truth was validated")
    }

    pub fn label_marginal(&self) -> Categorical {
        self.table().target_marginal()
    }

    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let file = TruthFile {
            format: "PRB1-TRUTH".into(),
            type_count: self.type_count(),
            label_count: self.label_count(),
            embedding_dim: self.embedding_dim(),
            p_z: self.p_z.probs().to_vec(),
            cond: self.cond.rows().into_iter().map(|r| r.to_vec()).collect(),
            embedding_scheme: self.embedding_scheme,
            seed: self.seed,
            vector_noise: self.vector_noise,
            embed_file: TRUTH_EMBED_FILE.into(),
        };
        let path = dir.join(TRUTH_FILE);
        let text = serde_json::to_string_pretty(&file).expect("truth serializes");
        fs::write(&path, text + "\n").map_err(|source| SynthError::Io { path, source })?;
        let bytes: Vec<u8> = self
            .embed
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(TRUTH_EMBED_FILE);
        fs::write(&path, bytes).map_err(|source| SynthError::Io { path, source })
    }

    /// Reads `truth.json` + `truth_embed.f32` from a dataset directory.
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join(TRUTH_FILE);
        let text = fs::read_to_string(&path).map_err(|source| SynthError::Io {
            path: path.clone(),
            source,
        })?;
        let file: TruthFile = serde_json::from_str(&text).map_err(|source| SynthError::Json {
            path: path.clone(),
            source,
        })?;
        let embed_path = dir.join(&file.embed_file);
        let bytes = fs::read(&embed_path).map_err(|source| SynthError::Io {
            path: embed_path.clone(),
            source,
        })?;
        if bytes.len() != file.type_count * file.embedding_dim * 4 {
            return Err(SynthError::InvalidTruth(format!(
                "{} holds {} bytes, expected {}",
                embed_path.display(),
                bytes.len(),
                file.type_count * file.embedding_dim * 4
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let embed = Array2::from_shape_vec((file.type_count, file.embedding_dim), values)
            .expect("size checked");
        let cond_flat: Vec<f64> = file.cond.concat();
        let cond = Array2::from_shape_vec((file.type_count, file.label_count), cond_flat)
            .map_err(|e| SynthError::InvalidTruth(format!("cond: {e}")))?;
        let truth = Self {
            p_z: Categorical::new(file.p_z)?,
            cond,
            embed,
            embedding_scheme: file.embedding_scheme,
            seed: file.seed,
            vector_noise: file.vector_noise,
        };
        truth.check()?;
        Ok(truth)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthFile {
    format: String,
    type_count: usize,
    label_count: usize,
    embedding_dim: usize,
    p_z: Vec<f64>,
    cond: Vec<Vec<f64>>,
    embedding_scheme: EmbeddingScheme,
    seed: u64,
    #[serde(default)]
    vector_noise: f64,
    embed_file: String,
}

fn check_distinct_rows(embed: &Array2<f64>) -> Result<(), SynthError> {
    let mut keys: Vec<(Vec<u64>, usize)> = embed
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r.iter().map(|v| v.to_bits()).collect(), i))
        .collect();
    keys.sort();
    for w in keys.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(SynthError::InvalidTruth(format!(
                "embedding rows {} and {} coincide",
                w[0].1, w[1].1
            )));
        }
    }
    Ok(())
}

/// Exact `I(T;Z)`, which equals `I(T;R)` for an injective noise-free embedding.
pub fn true_mutual_information(truth: &SyntheticGroundTruth) -> f64 {
    truth.table().mutual_information()
}

fn orthogonal_like(types: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((types, dim), |(z, j)| {
        if types <= 2 * dim {
            let (axis, sign) = if z < dim { (z, 1.0) } else { (z - dim, -1.0) };
            if j == axis {
                sign
            } else {
                0.0
            }
        } else {
            let bit = if j < 64 { (z >> j) & 1 } else { 0 };
            let v = if bit == 1 { -1.0 } else { 1.0 };
            // 1/sqrt(d) rounded through f32 keeps rows f32-exact
            f64::from((v / (dim as f64).sqrt()) as f32)
        }
    })
}

fn build_truth(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticGroundTruth, SynthError> {
    let (kt, kl, d) = (spec.type_count, spec.label_count, spec.embedding_dim);
    let weights: Vec<f64> = match spec.type_distribution {
        TypeDistribution::Uniform => vec![1.0; kt],
        TypeDistribution::Zipf { exponent } => {
            (0..kt).map(|z| ((z + 1) as f64).powf(-exponent)).collect()
        }
    };
    let p_z = Categorical::from_weights(&weights)?;
    let off = if kl > 1 {
        spec.label_noise / (kl - 1) as f64
    } else {
        0.0
    };
    let cond = Array2::from_shape_fn((kt, kl), |(z, t)| {
        if t == z % kl {
            1.0 - spec.label_noise
        } else {
            off
        }
    });
    let embed = match spec.embedding_scheme {
        EmbeddingScheme::OrthogonalLike => orthogonal_like(kt, d),
        EmbeddingScheme::RandomGaussian => Array2::from_shape_simple_fn((kt, d), || {
            let v: f64 = StandardNormal.sample(rng);
            f64::from(v as f32)
        }),
    };
    let truth = SyntheticGroundTruth {
        p_z,
        cond,
        embed,
        embedding_scheme: spec.embedding_scheme,
        seed: spec.seed,
        vector_noise: spec.vector_noise,
    };
    truth.check()?;
    Ok(truth)
}

/// Samples a PRB1-ready dataset together with its exact ground truth.
pub fn generate(
    spec: &SyntheticSpec,
) -> Result<(LabeledEmbeddingDataset, SyntheticGroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = build_truth(spec, &mut rng)?;

    let type_sampler = WeightedIndex::new(truth.p_z.probs())
        .map_err(|e| SynthError::InvalidTruth(e.to_string()))?;
    let label_samplers: Vec<WeightedIndex<f64>> = truth
        .cond
        .rows()
        .into_iter()
        .map(|r| WeightedIndex::new(r.iter().copied()))
        .collect::<Result<_, _>>()
        .map_err(|e| SynthError::InvalidTruth(e.to_string()))?;

    let total = spec.train_tokens + spec.dev_tokens + spec.test_tokens;
    let mut records = Vec::with_capacity(total);
    for (split, n) in [
        (Split::Train, spec.train_tokens),
        (Split::Dev, spec.dev_tokens),
        (Split::Test, spec.test_tokens),
    ] {
        for _ in 0..n {
            let z = type_sampler.sample(&mut rng);
            let t = label_samplers[z].sample(&mut rng);
            let vector = truth
                .embed
                .row(z)
                .iter()
                .map(|&v| {
                    if spec.vector_noise > 0.0 {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (v + spec.vector_noise * e) as f32
                    } else {
                        v as f32
                    }
                })
                .collect();
            records.push(TokenRecord {
                split,
                type_id: z as u32,
                label_id: t as u32,
                vector,
            });
        }
    }

    let ds = LabeledEmbeddingDataset {
        embedding_dim: spec.embedding_dim,
        label_names: (0..spec.label_count).map(|t| format!("L{t}")).collect(),
        type_count: spec.type_count,
        records,
    };
    Ok((ds, truth))
}
