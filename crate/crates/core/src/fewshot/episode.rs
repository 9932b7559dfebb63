use nalgebra::DVector;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{calibrate, fit_logistic, sample_augmented, ClassStatistics, FewShotConfig, FewShotError};
use crate::data::EmbeddingStore;

/// One N-way K-shot task with labelled support and query features.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub support: Vec<DVector<f64>>,
    pub support_labels: Vec<u32>,
    pub query: Vec<DVector<f64>>,
    pub query_labels: Vec<u32>,
}

impl Episode {
    /// Checks the set sizes and that exactly `way` classes appear, each with
    /// `shot` support and `query_per_class` query features.
    pub fn validate(&self) -> Result<(), FewShotError> {
        let fail = |m: String| Err(FewShotError::Invalid(m));
        if self.support.len() != self.support_labels.len() || self.query.len() != self.query_labels.len() {
            return fail("features and labels differ in length".into());
        }
        let mut classes = self.support_labels.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() != self.way {
            return fail(format!("{} support classes for a {}-way task", classes.len(), self.way));
        }
        for c in &classes {
            let s = self.support_labels.iter().filter(|l| *l == c).count();
            let q = self.query_labels.iter().filter(|l| *l == c).count();
            if s != self.shot || q != self.query_per_class {
                return fail(format!("class {c} has {s} support and {q} query features"));
            }
        }
        if self.query_labels.len() != self.way * self.query_per_class {
            return fail("query labels outside the support classes".into());
        }
        Ok(())
    }
}

/// Anything that can deal out episodes from a seeded generator.
pub trait TaskSource: Sync {
    fn sample(&self, cfg: &FewShotConfig, rng: &mut ChaCha8Rng) -> Result<Episode, FewShotError>;
}

/// Episodes drawn from the novel-class rows of an embedding store.
pub struct EmbeddingTasks {
    by_class: Vec<(u32, Vec<DVector<f64>>)>,
}

impl EmbeddingTasks {
    pub fn new(store: &EmbeddingStore) -> Self {
        let by_class = super::group_by_class(store)
            .into_iter()
            .map(|(c, rows)| (c, rows.into_iter().map(DVector::from_vec).collect()))
            .collect();
        Self { by_class }
    }
}

impl TaskSource for EmbeddingTasks {
    fn sample(&self, cfg: &FewShotConfig, rng: &mut ChaCha8Rng) -> Result<Episode, FewShotError> {
        let need = cfg.shot + cfg.query_per_class;
        let eligible: Vec<&(u32, Vec<DVector<f64>>)> = self.by_class.iter().filter(|(_, r)| r.len() >= need).collect();
        if eligible.len() < cfg.way {
            return Err(FewShotError::Invalid(format!(
                "{} classes have {need} samples, a {}-way task needs {}",
                eligible.len(),
                cfg.way,
                cfg.way
            )));
        }
        let mut ep = Episode {
            way: cfg.way,
            shot: cfg.shot,
            query_per_class: cfg.query_per_class,
            support: Vec::new(),
            support_labels: Vec::new(),
            query: Vec::new(),
            query_labels: Vec::new(),
        };
        for ci in index::sample(rng, eligible.len(), cfg.way) {
            let (label, rows) = eligible[ci];
            let picks = index::sample(rng, rows.len(), need).into_vec();
            for (j, &r) in picks.iter().enumerate() {
                if j < cfg.shot {
                    ep.support.push(rows[r].clone());
                    ep.support_labels.push(*label);
                } else {
                    ep.query.push(rows[r].clone());
                    ep.query_labels.push(*label);
                }
            }
        }
        Ok(ep)
    }
}

/// Calibrates every support feature, draws `n_augment` samples from each
/// calibrated Gaussian, trains logistic regression on support plus samples
/// and returns the top-1 query accuracy. With `n_augment = 0` no
/// calibration happens and the classifier sees only the support set.
pub fn run_episode(
    episode: &Episode,
    base: &[ClassStatistics],
    cfg: &FewShotConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, FewShotError> {
    episode.validate()?;
    let mut features = episode.support.clone();
    let mut labels = episode.support_labels.clone();
    if cfg.n_augment > 0 {
        for (i, (x, &y)) in episode.support.iter().zip(&episode.support_labels).enumerate() {
            let mut dist = calibrate(x, base, cfg.k, cfg.alpha)?;
            dist.source_support_index = i;
            features.extend(sample_augmented(&dist, cfg.n_augment, rng)?);
            labels.extend(std::iter::repeat_n(y, cfg.n_augment));
        }
    }
    let model = fit_logistic(&features, &labels, cfg.l2, cfg.max_iter, cfg.tolerance)?;
    let correct = episode
        .query
        .iter()
        .zip(&episode.query_labels)
        .filter(|(q, &y)| model.predict(q) == y)
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewShotSummary {
    pub tasks: usize,
    pub mean: f64,
    /// 1.96·s/√n with the sample standard deviation s; undefined for one task.
    pub ci95: Option<f64>,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Mean and 95% confidence halfwidth of per-task accuracies.
pub fn summarize(accuracies: Vec<f64>) -> FewShotSummary {
    let n = accuracies.len();
    let mean = pairwise_sum(&accuracies) / n as f64;
    let ci95 = (n > 1).then(|| {
        let sq: Vec<f64> = accuracies.iter().map(|a| (a - mean) * (a - mean)).collect();
        let std = (pairwise_sum(&sq) / (n - 1) as f64).sqrt();
        1.96 * std / (n as f64).sqrt()
    });
    FewShotSummary {
        tasks: n,
        mean,
        ci95,
        accuracies,
    }
}

fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    rng
}

/// Runs `task(index, rng)` for every index, each with its own generator
/// derived from `(seed, index)`. Tasks may run in parallel; results are
/// gathered in index order, so the summary does not depend on scheduling.
pub fn evaluate_tasks(
    num_tasks: usize,
    seed: u64,
    task: impl Fn(usize, &mut ChaCha8Rng) -> Result<f64, FewShotError> + Sync,
) -> Result<FewShotSummary, FewShotError> {
    if num_tasks == 0 {
        return Err(FewShotError::Invalid("no tasks to evaluate".into()));
    }
    let accuracies = (0..num_tasks)
        .into_par_iter()
        .map(|i| task(i, &mut task_rng(seed, i)))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(summarize(accuracies))
}

/// Mean accuracy and confidence interval over `cfg.tasks` episodes.
pub fn evaluate_fewshot(
    source: &impl TaskSource,
    base: &[ClassStatistics],
    cfg: &FewShotConfig,
    seed: u64,
) -> Result<FewShotSummary, FewShotError> {
    cfg.validate()?;
    evaluate_tasks(cfg.tasks, seed, |_, rng| {
        let episode = source.sample(cfg, rng)?;
        run_episode(&episode, base, cfg, rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_arithmetic() {
        let s = summarize(vec![1.0; 10]);
        assert_eq!((s.mean, s.ci95), (1.0, Some(0.0)));
        let s = summarize(vec![0.8, 0.6]);
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.ci95.unwrap() - 0.196).abs() < 1e-3);
        assert_eq!(summarize(vec![0.5]).ci95, None);
    }
}
