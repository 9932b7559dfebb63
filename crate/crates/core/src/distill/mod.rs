//! Self-distillation pretraining with a momentum teacher.
//!
//! Each image yields two global and several local crops. The student sees
//! every crop; the teacher sees only the globals. The objective sums the
//! cross-entropy between the teacher's sharpened distribution for each
//! global crop and the student's distribution for every *other* crop.
//! The student learns by SGD; the teacher follows it as an exponential
//! moving average whose momentum ramps from `lambda_base` to 1 on a cosine
//! schedule.

mod crop;
mod loss;
mod schedule;
mod train;

pub use crop::multi_crop;
pub use loss::{cross_entropy, distillation_loss, distillation_loss_in, sharpen, teacher_logits};
pub use schedule::{cosine_lambda, ema_update};
pub use train::{entropy, pretrain, pretrain_with_state, StepRecord, TrainingLog};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::vit::{ViTConfig, ViTParams, VitError, VitWeights};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("center has length {got}, logits have length {expected}")]
    CenterLength { expected: usize, got: usize },
    #[error("image {height}x{width} is smaller than crop size {size}")]
    ImageTooSmall { height: usize, width: usize, size: usize },
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
    #[error("momentum {0} outside [0, 1]")]
    Lambda(f64),
    #[error("step {step} outside 0..={total}")]
    Step { step: usize, total: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// When the teacher absorbs the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// After every optimizer step, momentum scheduled over steps.
    Step,
    /// Teacher frozen for a whole epoch, updated at its end with momentum
    /// scheduled over epochs.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    /// Local crops per image; total views V = this + 2.
    pub num_local_views: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub lambda_base: f64,
    pub ema_mode: EmaMode,
    pub epochs: usize,
    /// Defaults to one pass over the dataset.
    pub steps_per_epoch: Option<usize>,
    /// Images per optimizer step; the step loss is the batch mean.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub centering_enabled: bool,
    pub center_momentum: f64,
    /// Images whose mean teacher distribution is monitored for collapse.
    pub probe_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t: 0.04,
            num_local_views: 6,
            global_size: 32,
            local_size: 16,
            lambda_base: 0.996,
            ema_mode: EmaMode::Step,
            epochs: 1,
            steps_per_epoch: None,
            batch_size: 4,
            learning_rate: 0.005,
            momentum: 0.0,
            weight_decay: 0.0,
            centering_enabled: true,
            center_momentum: 0.9,
            probe_size: 8,
        }
    }
}

impl DistillConfig {
    pub fn num_views(&self) -> usize {
        self.num_local_views + 2
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let fail = |m: String| Err(DistillError::Config(m));
        for tau in [self.tau_s, self.tau_t] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(DistillError::Temperature(tau));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_base) {
            return Err(DistillError::Lambda(self.lambda_base));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return fail(format!("center_momentum {} outside [0, 1)", self.center_momentum));
        }
        if self.global_size == 0 || self.local_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return fail("sizes, batch_size and epochs must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        Ok(())
    }
}

/// Student, teacher and the running teacher-logit center.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub student: ViTParams,
    pub teacher: ViTParams,
    pub center: Option<Vec<f64>>,
    pub step: usize,
    velocity: Option<VitWeights<Tensor>>,
}

impl DistillState {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn new(config: &ViTConfig, centering: bool, rng: &mut impl Rng) -> Result<Self, DistillError> {
        let student = ViTParams::init(config, rng)?;
        Ok(Self::from_student(student, centering))
    }

    pub fn from_student(student: ViTParams, centering: bool) -> Self {
        let k = student.config.out_dim;
        Self {
            teacher: student.clone(),
            student,
            center: centering.then(|| vec![0.0; k]),
            step: 0,
            velocity: None,
        }
    }

    /// Plain SGD with optional momentum and L2 weight decay.
    pub fn sgd_step(&mut self, grads: &VitWeights<Tensor>, cfg: &DistillConfig) {
        let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        if mu == 0.0 {
            for (p, g) in self.student.weights.iter_mut().zip(grads.iter()) {
                for (x, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * (gv + wd * *x);
                }
            }
            return;
        }
        let vel = self
            .velocity
            .get_or_insert_with(|| grads.map(|t| Tensor::zeros(t.shape())));
        for ((p, g), v) in self.student.weights.iter_mut().zip(grads.iter()).zip(vel.iter_mut()) {
            for ((x, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *x;
                *x -= lr * *vv;
            }
        }
    }
}
