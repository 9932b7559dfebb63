use std::f64::consts::PI;

use super::{DistillError, DistillState};

/// Teacher momentum at `step` of `total`: starts at `base` and rises to 1
/// along a half cosine.
pub fn cosine_lambda(step: usize, total: usize, base: f64) -> Result<f64, DistillError> {
    if total == 0 || step > total {
        return Err(DistillError::Step { step, total });
    }
    // endpoints are returned verbatim so they hold bit-exactly
    if step == 0 {
        return Ok(base);
    }
    if step == total {
        return Ok(1.0);
    }
    let progress = step as f64 / total as f64;
    Ok(1.0 - (1.0 - base) * (1.0 + (PI * progress).cos()) / 2.0)
}

/// θ_t ← λ·θ_t + (1 − λ)·θ_s, elementwise.
pub fn ema_update(state: &mut DistillState, lambda: f64) -> Result<(), DistillError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DistillError::Lambda(lambda));
    }
    let mix = 1.0 - lambda;
    state
        .teacher
        .zip_apply(&state.student.weights, |t, s| *t = lambda * *t + mix * s);
    Ok(())
}
