use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    cosine_lambda, distillation_loss_in, ema_update, multi_crop, sharpen, teacher_logits, DistillConfig,
    DistillError, DistillState, EmaMode,
};
use crate::tensor::{Graph, Tensor};
use crate::vit::{Image, ViTConfig, ViTParams, VitWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch-mean distillation loss before the update.
    pub loss: f64,
    /// Momentum applied to the teacher after this step (1 when untouched).
    pub lambda: f64,
    /// Entropy of the mean teacher distribution over the probe images,
    /// measured after the update.
    pub teacher_entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

/// Shannon entropy in nats, with 0·ln 0 taken as 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn probe_entropy(state: &DistillState, probe: &[Image], cfg: &DistillConfig) -> Result<f64, DistillError> {
    if probe.is_empty() {
        return Ok(f64::NAN);
    }
    let center = state.center.as_deref().filter(|_| cfg.centering_enabled);
    let k = state.teacher.config.out_dim;
    let mut mean = vec![0.0; k];
    for logits in teacher_logits(&state.teacher, probe)? {
        for (m, p) in mean.iter_mut().zip(sharpen(&logits, cfg.tau_t, center)?) {
            *m += p / probe.len() as f64;
        }
    }
    Ok(entropy(&mean))
}

struct ImageStep {
    loss: f64,
    grads: VitWeights<Tensor>,
    teacher_logits: Vec<Vec<f64>>,
}

fn image_step(state: &DistillState, views: &[Image], cfg: &DistillConfig) -> Result<ImageStep, DistillError> {
    let center = state.center.as_deref().filter(|_| cfg.centering_enabled);
    let logits = teacher_logits(&state.teacher, &views[..2])?;
    let probs = logits
        .iter()
        .map(|l| sharpen(l, cfg.tau_t, center))
        .collect::<Result<Vec<_>, _>>()?;
    let mut g = Graph::new();
    let w = state.student.register(&mut g, true);
    let loss = distillation_loss_in(&mut g, &state.student.config, &w, &probs, views, cfg.tau_s)?;
    g.backward(loss)?;
    Ok(ImageStep {
        loss: g.value(loss).data()[0],
        grads: ViTParams::collect_grads(&g, &w),
        teacher_logits: logits,
    })
}

/// Trains a freshly initialized student/teacher pair on `images`.
///
/// Initialization draws from `seed`; augmentation and batch order draw from
/// an independent stream of the same seed, so runs are reproducible.
pub fn pretrain(
    images: &[Image],
    vit: &ViTConfig,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(DistillState, TrainingLog), DistillError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = DistillState::new(vit, cfg.centering_enabled, &mut rng)?;
    pretrain_with_state(state, images, cfg, seed)
}

/// Continues training from `state`.
pub fn pretrain_with_state(
    mut state: DistillState,
    images: &[Image],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(DistillState, TrainingLog), DistillError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(DistillError::EmptyDataset);
    }
    if cfg.centering_enabled && state.center.is_none() {
        state.center = Some(vec![0.0; state.teacher.config.out_dim]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = images.len();
    let batch = cfg.batch_size;
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(n.div_ceil(batch));
    let total = cfg.epochs * steps_per_epoch;
    let probe: Vec<Image> = images
        .iter()
        .take(cfg.probe_size)
        .map(|im| im.center_crop(cfg.global_size))
        .collect();
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    info!("pretraining for {total} steps ({} epochs) on {n} images", cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for s in 0..steps_per_epoch {
            let mut view_sets = Vec::with_capacity(batch);
            for b in 0..batch {
                let image = &images[order[(s * batch + b) % n]];
                view_sets.push(multi_crop(image, cfg, &mut rng)?);
            }
            let results: Vec<ImageStep> = view_sets
                .par_iter()
                .map(|views| image_step(&state, views, cfg))
                .collect::<Result<_, _>>()?;

            // reduce in batch order so the result does not depend on threads
            let scale = 1.0 / batch as f64;
            let loss = results.iter().map(|r| r.loss).sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(DistillError::NonFiniteLoss { step: state.step, loss });
            }
            let mut grads = results[0].grads.clone();
            for r in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(r.grads.iter()) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            for t in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            state.sgd_step(&grads, cfg);

            let lambda = match cfg.ema_mode {
                EmaMode::Step => Some(cosine_lambda(state.step, total, cfg.lambda_base)?),
                EmaMode::Epoch if s + 1 == steps_per_epoch => Some(cosine_lambda(epoch, cfg.epochs, cfg.lambda_base)?),
                EmaMode::Epoch => None,
            };
            if let Some(l) = lambda {
                ema_update(&mut state, l)?;
            }

            if let (true, Some(center)) = (cfg.centering_enabled, state.center.as_mut()) {
                let count = (2 * batch) as f64;
                let mut mean = vec![0.0; center.len()];
                for logits in results.iter().flat_map(|r| &r.teacher_logits) {
                    for (m, v) in mean.iter_mut().zip(logits) {
                        *m += v / count;
                    }
                }
                let m = cfg.center_momentum;
                for (c, v) in center.iter_mut().zip(mean) {
                    *c = m * *c + (1.0 - m) * v;
                }
            }

            let teacher_entropy = probe_entropy(&state, &probe, cfg)?;
            debug!("step {} loss {loss:.6} entropy {teacher_entropy:.4}", state.step);
            log.steps.push(StepRecord {
                step: state.step,
                epoch,
                loss,
                lambda: lambda.unwrap_or(1.0),
                teacher_entropy,
            });
            state.step += 1;
        }
    }
    Ok((state, log))
}
