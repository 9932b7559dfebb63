use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::FewShotError;
use crate::data::EmbeddingStore;

/// Gaussian summary of one base class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStatistics {
    pub class_id: u32,
    pub mean: DVector<f64>,
    /// Unbiased (n − 1) covariance, exactly symmetric.
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

/// Rows of `store` grouped by label, in ascending label order.
pub fn group_by_class(store: &EmbeddingStore) -> BTreeMap<u32, Vec<Vec<f64>>> {
    let mut out: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for (row, &label) in store.rows().zip(store.labels()) {
        out.entry(label).or_default().push(row.to_vec());
    }
    out
}

/// Mean and unbiased covariance for every class, via a single Welford pass.
/// Only the upper triangle is accumulated; the lower one is mirrored so the
/// result is symmetric bit for bit.
pub fn class_statistics(features: &BTreeMap<u32, Vec<Vec<f64>>>) -> Result<Vec<ClassStatistics>, FewShotError> {
    let dim = features.values().flatten().next().map(Vec::len);
    let mut out = Vec::with_capacity(features.len());
    for (&class_id, rows) in features {
        if rows.len() < 2 {
            return Err(FewShotError::TooFewSamples {
                class_id,
                count: rows.len(),
            });
        }
        let d = dim.expect("non-empty");
        let mut mean = vec![0.0; d];
        let mut m2 = DMatrix::<f64>::zeros(d, d);
        let mut delta = vec![0.0; d];
        for (n, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(FewShotError::Dimension {
                    expected: d,
                    got: row.len(),
                });
            }
            let n = (n + 1) as f64;
            for i in 0..d {
                delta[i] = row[i] - mean[i];
                mean[i] += delta[i] / n;
            }
            for j in 0..d {
                let after = row[j] - mean[j];
                for i in 0..=j {
                    m2[(i, j)] += delta[i] * after;
                }
            }
        }
        let denom = (rows.len() - 1) as f64;
        for j in 0..d {
            for i in 0..=j {
                let v = m2[(i, j)] / denom;
                m2[(i, j)] = v;
                m2[(j, i)] = v;
            }
        }
        out.push(ClassStatistics {
            class_id,
            mean: DVector::from_vec(mean),
            covariance: m2,
            count: rows.len(),
        });
    }
    Ok(out)
}
