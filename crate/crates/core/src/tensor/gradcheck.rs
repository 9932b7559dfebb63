use super::Tensor;

/// Central-difference gradient estimate of `f` at `params`.
///
/// Each coordinate is perturbed by `±eps` in turn, giving
/// `(f(p + eps·e_i) − f(p − eps·e_i)) / (2·eps)`. Errors from `f` propagate.
pub fn finite_difference<E>(
    mut f: impl FnMut(&[Tensor]) -> Result<f64, E>,
    params: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>, E> {
    assert!(eps > 0.0, "finite_difference: eps must be positive");
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_difference(
            |p| Ok::<_, Infallible>(p[0].data()[0].powi(2)),
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_difference(
            |_| Ok::<_, Infallible>(4.2),
            &[Tensor::vector(&[1.0, -2.0, 0.5])],
            1e-5,
        )
        .unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}
