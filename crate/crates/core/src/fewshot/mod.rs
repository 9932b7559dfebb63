//! Few-shot classification by distribution calibration.
//!
//! Base classes contribute Gaussian statistics. Each novel support feature
//! borrows the mean and covariance of its nearest base classes, synthetic
//! features are sampled from the resulting Gaussian, and a multinomial
//! logistic regression is trained on support plus samples. Features are the
//! raw teacher embeddings; no power transform is applied.

mod calibrate;
mod episode;
mod logistic;
mod stats;
mod synthetic;

pub use calibrate::{calibrate, sample_augmented, CalibratedDistribution};
pub use episode::{
    evaluate_fewshot, evaluate_tasks, run_episode, summarize, EmbeddingTasks, Episode, FewShotSummary, TaskSource,
};
pub use logistic::{fit_logistic, LogisticModel};
pub use stats::{class_statistics, group_by_class, ClassStatistics};
pub use synthetic::{SyntheticTasks, SyntheticTasksConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vit::{encode, Image, ViTParams, VitError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FewShotError {
    #[error("class {class_id} has {count} samples, need at least 2")]
    TooFewSamples { class_id: u32, count: usize },
    #[error("feature length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no base classes")]
    EmptyBase,
    #[error("k = {k} with {available} base classes")]
    InvalidK { k: usize, available: usize },
    #[error("covariance is not positive semidefinite (eigenvalues {min:e} .. {max:e})")]
    NotPsd { min: f64, max: f64 },
    #[error("logistic regression needs at least two classes")]
    SingleClass,
    #[error("invalid few-shot setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vit(#[from] VitError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub tasks: usize,
    /// Base classes borrowed per support feature.
    pub k: usize,
    /// Diagonal loading of the calibrated covariance.
    pub alpha: f64,
    /// Synthetic features drawn per support feature.
    pub n_augment: usize,
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient ∞-norm falls below this.
    pub tolerance: f64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            query_per_class: 15,
            tasks: 1000,
            k: 2,
            alpha: 0.21,
            n_augment: 750,
            l2: 0.1,
            max_iter: 5000,
            tolerance: 1e-6,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<(), FewShotError> {
        let fail = |m: &str| Err(FewShotError::Invalid(m.to_string()));
        if self.way < 2 || self.shot == 0 || self.query_per_class == 0 || self.tasks == 0 {
            return fail("way must be at least 2; shot, query_per_class and tasks positive");
        }
        if self.k == 0 {
            return fail("k must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("alpha and l2 must be finite and non-negative");
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return fail("tolerance and max_iter must be positive");
        }
        Ok(())
    }
}

/// Teacher backbone embedding of `image`, used as the few-shot feature.
pub fn extract_feature(teacher: &ViTParams, image: &Image) -> Result<Vec<f64>, FewShotError> {
    Ok(encode(teacher, image)?.into_data())
}
