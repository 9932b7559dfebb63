use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{ClassStatistics, FewShotError};

/// Gaussian estimate for a novel class seeded by one support feature.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Position of the seeding feature within its episode's support set.
    pub source_support_index: usize,
    /// Base classes that contributed, nearest first.
    pub neighbors: Vec<u32>,
}

/// Borrows statistics from the `k` base classes whose means lie closest (in
/// Euclidean distance, ties to the lower class id) to `support`:
/// μ' = (Σ μ_i + x̃) / (k + 1) and Σ' = Σ Σ_i / k + α·I.
pub fn calibrate(
    support: &DVector<f64>,
    base: &[ClassStatistics],
    k: usize,
    alpha: f64,
) -> Result<CalibratedDistribution, FewShotError> {
    if base.is_empty() {
        return Err(FewShotError::EmptyBase);
    }
    if k == 0 || k > base.len() {
        return Err(FewShotError::InvalidK {
            k,
            available: base.len(),
        });
    }
    let d = support.len();
    if let Some(b) = base.iter().find(|b| b.mean.len() != d) {
        return Err(FewShotError::Dimension {
            expected: d,
            got: b.mean.len(),
        });
    }
    let mut ranked: Vec<(f64, u32, usize)> = base
        .iter()
        .enumerate()
        .map(|(i, b)| ((&b.mean - support).norm_squared(), b.class_id, i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let chosen = &ranked[..k];

    let mut mean = support.clone();
    let mut covariance = DMatrix::zeros(d, d);
    for &(_, _, i) in chosen {
        mean += &base[i].mean;
        covariance += &base[i].covariance;
    }
    mean /= (k + 1) as f64;
    covariance /= k as f64;
    for i in 0..d {
        covariance[(i, i)] += alpha;
    }
    Ok(CalibratedDistribution {
        mean,
        covariance,
        source_support_index: 0,
        neighbors: chosen.iter().map(|c| c.1).collect(),
    })
}

/// A factor `L` with `L·Lᵀ = Σ`: Cholesky when Σ is positive definite,
/// otherwise the eigendecomposition with negative rounding noise clipped.
fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, FewShotError> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min < -1e-8 * max.abs().max(f64::MIN_POSITIVE) || !min.is_finite() {
        return Err(FewShotError::NotPsd { min, max });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// `n` draws from N(μ', Σ') as μ' + L·z with z standard normal.
pub fn sample_augmented(
    dist: &CalibratedDistribution,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<DVector<f64>>, FewShotError> {
    let l = covariance_factor(&dist.covariance)?;
    let d = dist.mean.len();
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &dist.mean + &l * z
        })
        .collect())
}
