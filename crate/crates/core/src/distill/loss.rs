use super::{DistillConfig, DistillError, DistillState};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{encode_in, head_in, Image, ViTConfig, ViTParams, VitWeights};

/// Temperature softmax of `logits − center`, stabilized by subtracting the
/// maximum before exponentiating.
pub fn sharpen(logits: &[f64], tau: f64, center: Option<&[f64]>) -> Result<Vec<f64>, DistillError> {
    if !(tau > 0.0) {
        return Err(DistillError::Temperature(tau));
    }
    let shifted: Vec<f64> = match center {
        Some(c) if c.len() != logits.len() => {
            return Err(DistillError::CenterLength {
                expected: logits.len(),
                got: c.len(),
            })
        }
        Some(c) => logits.iter().zip(c).map(|(l, c)| (l - c) / tau).collect(),
        None => logits.iter().map(|l| l / tau).collect(),
    };
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// H(a, b) = −Σ a_i ln b_i.
pub fn cross_entropy(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(p, q)| p * q.ln()).sum::<f64>()
}

/// Teacher logits for each of `views`, computed without gradient tracking.
pub fn teacher_logits(teacher: &ViTParams, views: &[Image]) -> Result<Vec<Vec<f64>>, DistillError> {
    let mut g = Graph::new();
    let w = teacher.register(&mut g, false);
    views
        .iter()
        .map(|v| {
            let e = encode_in(&mut g, &teacher.config, &w, v)?;
            let l = head_in(&mut g, &w, e)?;
            Ok(g.value(l).data().to_vec())
        })
        .collect()
}

/// Builds the distillation objective on `g` for one image.
///
/// `teacher_probs[i]` is the teacher distribution for global view `i`
/// (views 0 and 1) and enters as a constant. Every view passes through the
/// student, and each global is paired with every other view, giving
/// `2(V − 1)` cross-entropy terms summed in a fixed order.
pub fn distillation_loss_in(
    g: &mut Graph,
    cfg: &ViTConfig,
    student: &VitWeights<Var>,
    teacher_probs: &[Vec<f64>],
    views: &[Image],
    tau_s: f64,
) -> Result<Var, DistillError> {
    if views.len() < 2 {
        return Err(DistillError::TooFewViews(views.len()));
    }
    if !(tau_s > 0.0) {
        return Err(DistillError::Temperature(tau_s));
    }
    assert_eq!(teacher_probs.len(), 2, "one teacher distribution per global view");
    let mut log_probs = Vec::with_capacity(views.len());
    for view in views {
        let e = encode_in(g, cfg, student, view)?;
        let l = head_in(g, student, e)?;
        let l = g.scale(l, 1.0 / tau_s);
        log_probs.push(g.log_softmax(l, 0)?);
    }
    let targets: Vec<Var> = teacher_probs.iter().map(|p| g.constant(Tensor::vector(p))).collect();
    let mut total: Option<Var> = None;
    for (i, &t) in targets.iter().enumerate() {
        for (v, &ls) in log_probs.iter().enumerate() {
            if v == i {
                continue;
            }
            let prod = g.mul(t, ls)?;
            let term = g.sum(prod);
            total = Some(match total {
                Some(acc) => g.sub(acc, term)?,
                None => g.neg(term),
            });
        }
    }
    Ok(total.expect("at least one pair"))
}

/// Distillation loss of `state` on one image's views, evaluated without
/// gradients. Uses the state's center when centering is enabled.
pub fn distillation_loss(state: &DistillState, views: &[Image], config: &DistillConfig) -> Result<Tensor, DistillError> {
    if views.len() < 2 {
        return Err(DistillError::TooFewViews(views.len()));
    }
    let center = state.center.as_deref().filter(|_| config.centering_enabled);
    let probs = teacher_logits(&state.teacher, &views[..2])?
        .iter()
        .map(|l| sharpen(l, config.tau_t, center))
        .collect::<Result<Vec<_>, _>>()?;
    let mut g = Graph::new();
    let w = state.student.register(&mut g, false);
    let loss = distillation_loss_in(&mut g, &state.student.config, &w, &probs, views, config.tau_s)?;
    Ok(g.value(loss).clone())
}
