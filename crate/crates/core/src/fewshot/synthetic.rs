use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Episode, FewShotConfig, FewShotError, TaskSource};

/// A Gaussian task family in which each novel class resembles a group of
/// base classes: the group's members sit around a common center and share
/// one anisotropic covariance, and the novel class is centered near the
/// same point with that same covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTasksConfig {
    pub dim: usize,
    /// Number of groups, which is also the number of novel classes.
    pub groups: usize,
    pub bases_per_group: usize,
    /// Standard deviation of group centers around the origin.
    pub center_scale: f64,
    /// Distance of each base mean from its group center.
    pub base_offset: f64,
    /// Distance of the novel mean from its group center.
    pub novel_offset: f64,
    /// Covariance eigenvalues decay geometrically from `eigen_max` to `eigen_min`.
    pub eigen_max: f64,
    pub eigen_min: f64,
    /// Features drawn per base class for its statistics.
    pub base_samples: usize,
}

impl Default for SyntheticTasksConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            groups: 16,
            bases_per_group: 2,
            center_scale: 2.0,
            base_offset: 1.0,
            novel_offset: 1.0,
            eigen_max: 4.0,
            eigen_min: 0.05,
            base_samples: 200,
        }
    }
}

pub struct SyntheticTasks {
    /// Base-class features keyed by class id (groups × bases_per_group classes).
    pub base_features: BTreeMap<u32, Vec<Vec<f64>>>,
    novel: Vec<(DVector<f64>, DMatrix<f64>)>,
}

fn gaussian_vector(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    let v = gaussian_vector(rng, d);
    let n = v.norm();
    v / n
}

impl SyntheticTasks {
    pub fn new(cfg: &SyntheticTasksConfig, seed: u64) -> Result<Self, FewShotError> {
        let d = cfg.dim;
        if d == 0 || cfg.groups < 2 || cfg.bases_per_group == 0 || cfg.base_samples < 2 {
            return Err(FewShotError::Invalid("degenerate synthetic task family".into()));
        }
        if !(cfg.eigen_min > 0.0 && cfg.eigen_max >= cfg.eigen_min) {
            return Err(FewShotError::Invalid("eigenvalues must satisfy 0 < min <= max".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ratio = if d > 1 {
            (cfg.eigen_min / cfg.eigen_max).powf(1.0 / (d - 1) as f64)
        } else {
            1.0
        };
        let mut base_features = BTreeMap::new();
        let mut novel = Vec::with_capacity(cfg.groups);
        for g in 0..cfg.groups {
            let center = gaussian_vector(&mut rng, d) * cfg.center_scale;
            let q = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
            let roots = DVector::from_fn(d, |i, _| (cfg.eigen_max * ratio.powi(i as i32)).sqrt());
            let factor = &q * DMatrix::from_diagonal(&roots);
            for b in 0..cfg.bases_per_group {
                let mean = &center + unit_vector(&mut rng, d) * cfg.base_offset;
                let rows = (0..cfg.base_samples)
                    .map(|_| (&mean + &factor * gaussian_vector(&mut rng, d)).as_slice().to_vec())
                    .collect();
                base_features.insert((g * cfg.bases_per_group + b) as u32, rows);
            }
            let mean = &center + unit_vector(&mut rng, d) * cfg.novel_offset;
            novel.push((mean, factor));
        }
        Ok(Self { base_features, novel })
    }
}

impl TaskSource for SyntheticTasks {
    fn sample(&self, cfg: &FewShotConfig, rng: &mut ChaCha8Rng) -> Result<Episode, FewShotError> {
        if cfg.way > self.novel.len() {
            return Err(FewShotError::Invalid(format!(
                "{}-way task from {} novel classes",
                cfg.way,
                self.novel.len()
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
        for c in index::sample(rng, self.novel.len(), cfg.way) {
            let (mean, factor) = &self.novel[c];
            let d = mean.len();
            for j in 0..cfg.shot + cfg.query_per_class {
                let x = mean + factor * gaussian_vector(rng, d);
                if j < cfg.shot {
                    ep.support.push(x);
                    ep.support_labels.push(c as u32);
                } else {
                    ep.query.push(x);
                    ep.query_labels.push(c as u32);
                }
            }
        }
        Ok(ep)
    }
}
