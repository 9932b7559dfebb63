use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::RetrievalError;
use crate::tensor::Tensor;

/// Every ordered pair `(i, j)` with `i != j`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Margin-loss pairs for unit rows of `emb` (`[B, C]`).
///
/// Every positive pair is kept. For each positive, one negative for the same
/// anchor is drawn with weight proportional to the inverse density of
/// pairwise distances between uniform points on the C-sphere,
/// q(d) ∝ d^(C−2)·(1 − d²/4)^((C−3)/2), evaluated at max(d, `cutoff`).
/// Negatives at distance ≥ `nonzero_cutoff` get zero weight; if every
/// negative does, the draw is uniform.
pub fn distance_weighted_pairs(
    emb: &Tensor,
    labels: &[u32],
    cutoff: f64,
    nonzero_cutoff: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>, RetrievalError> {
    if emb.rank() != 2 || emb.shape()[0] != labels.len() {
        return Err(RetrievalError::Invalid(format!(
            "embeddings {:?} for {} labels",
            emb.shape(),
            labels.len()
        )));
    }
    let (b, c) = (labels.len(), emb.shape()[1]);
    let n = c as f64;
    let row = |i: usize| &emb.data()[i * c..(i + 1) * c];
    let mut pairs = Vec::new();
    for i in 0..b {
        let negatives: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
        let positives: Vec<usize> = (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
        if negatives.is_empty() || positives.is_empty() {
            continue;
        }
        let log_w: Vec<f64> = negatives
            .iter()
            .map(|&k| {
                let d = distance(row(i), row(k)).max(cutoff);
                if d >= nonzero_cutoff {
                    return f64::NEG_INFINITY;
                }
                let inner = (1.0 - 0.25 * d * d).max(1e-8);
                -((n - 2.0) * d.ln() + 0.5 * (n - 3.0) * inner.ln())
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = if top.is_finite() {
            log_w.iter().map(|&l| (l - top).exp()).collect()
        } else {
            vec![1.0; negatives.len()]
        };
        let total: f64 = weights.iter().sum();
        for &j in &positives {
            pairs.push((i, j));
            let mut u = rng.random::<f64>() * total;
            let mut pick = negatives.len() - 1;
            for (idx, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = idx;
                    break;
                }
                u -= w;
            }
            pairs.push((i, negatives[pick]));
        }
    }
    Ok(pairs)
}

/// Draws batches of P classes × Q samples.
#[derive(Clone, Debug)]
pub struct ClassBalancedSampler {
    by_class: Vec<(u32, Vec<usize>)>,
    classes_per_batch: usize,
    samples_per_class: usize,
}

impl ClassBalancedSampler {
    /// Classes with fewer than two samples cannot supply positives and are
    /// left out.
    pub fn new(labels: &[u32], classes_per_batch: usize, samples_per_class: usize) -> Result<Self, RetrievalError> {
        let mut map = std::collections::BTreeMap::<u32, Vec<usize>>::new();
        for (i, &l) in labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        let by_class: Vec<_> = map.into_iter().filter(|(_, v)| v.len() >= 2).collect();
        if by_class.len() < classes_per_batch.max(2) {
            return Err(RetrievalError::Invalid(format!(
                "{} classes with two or more samples, batches need {}",
                by_class.len(),
                classes_per_batch.max(2)
            )));
        }
        if samples_per_class == 0 {
            return Err(RetrievalError::Invalid("samples_per_class must be positive".into()));
        }
        Ok(Self {
            by_class,
            classes_per_batch,
            samples_per_class,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    /// Indices grouped by class. Samples are drawn without replacement, or
    /// with replacement once a class runs out.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        let picked: Vec<_> = self.by_class.choose_multiple(rng, self.classes_per_batch).collect();
        for (_, members) in picked {
            let mut pool = members.clone();
            pool.shuffle(rng);
            for q in 0..self.samples_per_class {
                out.push(if q < pool.len() {
                    pool[q]
                } else {
                    pool[rng.random_range(0..pool.len())]
                });
            }
        }
        out
    }
}
