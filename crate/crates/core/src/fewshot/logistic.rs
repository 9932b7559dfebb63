use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::FewShotError;

/// Multinomial logistic regression: `weights` is classes×D, one row per
/// entry of `classes` (ascending label order).
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub classes: Vec<u32>,
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// Iterations the solver ran.
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn logits(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weights * x + &self.bias
    }

    /// Label with the largest logit; ties go to the earlier class.
    pub fn predict(&self, x: &DVector<f64>) -> u32 {
        let z = self.logits(x);
        let mut best = 0;
        for i in 1..z.len() {
            if z[i] > z[best] {
                best = i;
            }
        }
        self.classes[best]
    }
}

/// Gradient of mean cross-entropy plus `l2/2·‖W‖²` (biases unpenalized)
/// with respect to θ = [W | b], stored row-major as classes×(D+1). Rows of
/// `x` carry a trailing 1 for the intercept.
fn gradient(x: &[f64], y: &[usize], theta: &[f64], l2: f64, probs: &mut [f64], grad: &mut [f64]) {
    let m = theta.len() / probs.len();
    let n = y.len();
    grad.fill(0.0);
    for (row, &label) in x.chunks_exact(m).zip(y) {
        let mut max = f64::NEG_INFINITY;
        for (p, w) in probs.iter_mut().zip(theta.chunks_exact(m)) {
            *p = w.iter().zip(row).map(|(a, b)| a * b).sum();
            max = max.max(*p);
        }
        let mut z = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            z += *p;
        }
        for (k, (p, g)) in probs.iter().zip(grad.chunks_exact_mut(m)).enumerate() {
            let coef = p / z - f64::from(u8::from(k == label));
            g.iter_mut().zip(row).for_each(|(g, v)| *g += coef * v);
        }
    }
    let inv = 1.0 / n as f64;
    for (g, w) in grad.chunks_exact_mut(m).zip(theta.chunks_exact(m)) {
        g.iter_mut().for_each(|v| *v *= inv);
        for j in 0..m - 1 {
            g[j] += l2 * w[j];
        }
    }
}

/// Fits by full-batch accelerated gradient descent with a fixed step of
/// 1/L, where L bounds the curvature of the objective, and adaptive
/// momentum restart. Stops when the gradient ∞-norm drops below `tolerance`
/// or after `max_iter` iterations.
pub fn fit_logistic(
    features: &[DVector<f64>],
    labels: &[u32],
    l2: f64,
    max_iter: usize,
    tolerance: f64,
) -> Result<LogisticModel, FewShotError> {
    if features.len() != labels.len() {
        return Err(FewShotError::Invalid(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(FewShotError::SingleClass);
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(FewShotError::Dimension {
            expected: d,
            got: f.len(),
        });
    }
    let (n, c, m) = (features.len(), classes.len(), d + 1);
    // Solving on centered features is the same problem (the intercept
    // absorbs the shift and is not penalized) but far better conditioned.
    let mut center = DVector::zeros(d);
    for f in features {
        center += f;
    }
    center /= n as f64;
    let mut x = Vec::with_capacity(n * m);
    for f in features {
        x.extend((f - &center).iter());
        x.push(1.0);
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a class"))
        .collect();

    let design = DMatrix::from_row_slice(n, m, &x);
    let gram = design.transpose() * &design / n as f64;
    let lipschitz = 0.5 * SymmetricEigen::new(gram).eigenvalues.max() + l2;
    let step = 1.0 / lipschitz.max(1e-12);

    let mut theta = vec![0.0; c * m];
    let mut point = theta.clone();
    let mut next = theta.clone();
    let mut grad = theta.clone();
    let mut probs = vec![0.0; c];
    let mut t = 1.0f64;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        gradient(&x, &y, &point, l2, &mut probs, &mut grad);
        if grad.iter().fold(0.0f64, |a, g| a.max(g.abs())) < tolerance {
            theta.copy_from_slice(&point);
            converged = true;
            break;
        }
        let mut uphill = 0.0;
        for i in 0..theta.len() {
            next[i] = point[i] - step * grad[i];
            uphill += grad[i] * (next[i] - theta[i]);
        }
        // restart momentum when it points uphill
        if uphill > 0.0 {
            t = 1.0;
            point.copy_from_slice(&theta);
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for i in 0..theta.len() {
            point[i] = next[i] + beta * (next[i] - theta[i]);
        }
        std::mem::swap(&mut theta, &mut next);
        t = t_next;
    }
    let full = DMatrix::from_row_slice(c, m, &theta);
    let weights = full.columns(0, d).into_owned();
    let bias = full.column(d) - &weights * center;
    Ok(LogisticModel {
        classes,
        weights,
        bias,
        iterations,
        converged,
    })
}
