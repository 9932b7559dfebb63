//! Metric-learning fine-tuning and Recall@K retrieval evaluation.
//!
//! The backbone's class token is projected to C dimensions and L2
//! normalized. Three losses are available: a margin loss over
//! distance-weighted pairs with learnable per-class boundaries, Proxy-NCA
//! with one learnable proxy per training class, and the multi-similarity
//! loss with hard-pair mining.

mod losses;
mod model;
mod recall;
mod sampling;
mod train;

pub use losses::{margin_loss, margin_loss_in, multi_similarity_loss, multi_similarity_loss_in, proxy_nca_loss, proxy_nca_loss_in, ms_mined_pairs, MsMining};
pub use model::{embed_dataset, embed_images, embed_retrieval, embed_retrieval_in, RetrievalModel};
pub use recall::{recall_at_k, recall_curve};
pub use sampling::{all_pairs, distance_weighted_pairs, ClassBalancedSampler};
pub use train::{finetune, finetune_step, FinetuneState, RetrievalLog, RetrievalStep};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::vit::VitError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("batch needs at least two classes to form negative pairs")]
    SingleClass,
    #[error("need at least two proxies, got {0}")]
    TooFewProxies(usize),
    #[error("label {0} has no proxy")]
    MissingProxy(u32),
    #[error("k = {k} exceeds the {available} usable gallery items")]
    KTooLarge { k: usize, available: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite embedding")]
    NonFiniteEmbedding,
    #[error("invalid retrieval setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Margin,
    ProxyNca,
    MultiSimilarity,
}

impl LossKind {
    pub const NAMES: [&'static str; 3] = ["margin", "proxy-nca", "multi-similarity"];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Margin => "margin",
            LossKind::ProxyNca => "proxy-nca",
            LossKind::MultiSimilarity => "multi-similarity",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "margin" => Ok(LossKind::Margin),
            "proxy-nca" | "proxy_nca" => Ok(LossKind::ProxyNca),
            "multi-similarity" | "multi_similarity" | "ms" => Ok(LossKind::MultiSimilarity),
            _ => Err(format!("unknown loss {s:?}; expected one of {}", LossKind::NAMES.join(", "))),
        }
    }
}

/// How the margin loss picks its pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Every positive pair, plus one negative per positive drawn with
    /// probability inversely proportional to the density of pairwise
    /// distances on the unit sphere.
    DistanceWeighted,
    /// Every ordered pair of distinct batch items.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Retrieval embedding size C.
    pub embedding_dim: usize,
    pub loss: LossKind,
    pub epochs: usize,
    /// Defaults to one pass over the training images.
    pub steps_per_epoch: Option<usize>,
    /// P classes per batch.
    pub classes_per_batch: usize,
    /// Q images per class per batch.
    pub samples_per_class: usize,
    pub learning_rate: f64,
    /// Learning rate for margin boundaries and proxies.
    pub aux_learning_rate: f64,
    pub momentum: f64,
    pub margin_alpha: f64,
    pub margin_beta: f64,
    pub pair_sampling: PairSampling,
    /// Distances are clipped below this before weighting.
    pub distance_cutoff: f64,
    /// Negatives at or beyond this distance get zero sampling weight.
    pub nonzero_loss_cutoff: f64,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_lambda: f64,
    pub ms_epsilon: f64,
    /// Recall@K cutoffs reported by evaluation.
    pub recall_k: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            loss: LossKind::Margin,
            epochs: 1,
            steps_per_epoch: None,
            classes_per_batch: 4,
            samples_per_class: 4,
            learning_rate: 0.01,
            aux_learning_rate: 0.1,
            momentum: 0.5,
            margin_alpha: 0.2,
            margin_beta: 1.2,
            pair_sampling: PairSampling::DistanceWeighted,
            distance_cutoff: 0.5,
            nonzero_loss_cutoff: 1.4,
            ms_alpha: 2.0,
            ms_beta: 50.0,
            ms_lambda: 1.0,
            ms_epsilon: 0.1,
            recall_k: vec![1, 2, 4, 8],
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let fail = |m: &str| Err(RetrievalError::Invalid(m.to_string()));
        if self.embedding_dim == 0 || self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return fail("embedding_dim must be positive; batches need at least 2 classes of 2 samples");
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive");
        }
        for v in [self.learning_rate, self.aux_learning_rate] {
            if !(v > 0.0 && v.is_finite()) {
                return fail("learning rates must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !(self.ms_alpha > 0.0 && self.ms_beta > 0.0) {
            return fail("multi-similarity alpha and beta must be positive");
        }
        if self.recall_k.contains(&0) {
            return fail("recall cutoffs must be at least 1");
        }
        Ok(())
    }
}

/// B embeddings (rows of a `[B, C]` tensor) with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub labels: Vec<u32>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<u32>) -> Result<Self, RetrievalError> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
            return Err(RetrievalError::Invalid(format!(
                "embeddings {:?} for {} labels",
                embeddings.shape(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    /// Rows scaled to unit length.
    pub fn from_rows_normalized(rows: &[Vec<f64>], labels: Vec<u32>) -> Result<Self, RetrievalError> {
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if r.len() != c {
                return Err(RetrievalError::Invalid("rows of unequal length".into()));
            }
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(r.iter().map(|v| v / n));
        }
        Self::new(Tensor::new(&[rows.len(), c], data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.dim();
        &self.embeddings.data()[i * c..(i + 1) * c]
    }
}

/// One learnable vector per training class, `[classes, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank {
    pub classes: Vec<u32>,
    pub proxies: Tensor,
}

impl ProxyBank {
    /// Standard-normal proxies scaled to unit length.
    pub fn init(classes: Vec<u32>, dim: usize, rng: &mut impl rand::Rng) -> Result<Self, RetrievalError> {
        if classes.len() < 2 {
            return Err(RetrievalError::TooFewProxies(classes.len()));
        }
        let mut data = Vec::with_capacity(classes.len() * dim);
        for _ in &classes {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.into_iter().map(|x| x / n));
        }
        let proxies = Tensor::new(&[classes.len(), dim], data)?;
        Ok(Self { classes, proxies })
    }

    pub fn index_of(&self, label: u32) -> Result<usize, RetrievalError> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .ok_or(RetrievalError::MissingProxy(label))
    }
}
