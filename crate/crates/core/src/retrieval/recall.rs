use rayon::prelude::*;

use super::{EmbeddingBatch, RetrievalError};

/// 1-based rank of the nearest same-label gallery item for every query.
/// Neighbors are ordered by Euclidean distance, ties by gallery index.
fn first_hit_ranks(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    exclude_self: bool,
) -> Result<Vec<Option<usize>>, RetrievalError> {
    if queries.dim() != gallery.dim() {
        return Err(RetrievalError::Invalid(format!(
            "query dimension {} differs from gallery dimension {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    if exclude_self && queries.len() != gallery.len() {
        return Err(RetrievalError::Invalid(
            "self-exclusion needs queries and gallery to be the same set".into(),
        ));
    }
    Ok((0..queries.len())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let mut order: Vec<(f64, usize)> = (0..gallery.len())
                .filter(|&j| !(exclude_self && j == i))
                .map(|j| {
                    let d: f64 = q.iter().zip(gallery.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d.sqrt(), j)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order
                .iter()
                .position(|&(_, j)| gallery.labels[j] == queries.labels[i])
                .map(|p| p + 1)
        })
        .collect())
}

fn usable(queries: &EmbeddingBatch, gallery: &EmbeddingBatch, k: usize, exclude_self: bool) -> Result<(), RetrievalError> {
    let available = gallery.len() - usize::from(exclude_self && !gallery.is_empty());
    if k == 0 || k > available {
        return Err(RetrievalError::KTooLarge { k, available });
    }
    if queries.is_empty() {
        return Err(RetrievalError::Invalid("no queries".into()));
    }
    Ok(())
}

/// Fraction of queries with a same-label item among their `k` nearest
/// gallery neighbors. With `exclude_self`, query i is gallery item i and is
/// not its own neighbor.
pub fn recall_at_k(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    k: usize,
    exclude_self: bool,
) -> Result<f64, RetrievalError> {
    Ok(recall_curve(queries, gallery, &[k], exclude_self)?[0].1)
}

/// `(k, Recall@k)` for every cutoff, from one neighbor ranking per query.
pub fn recall_curve(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    ks: &[usize],
    exclude_self: bool,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    for &k in ks {
        usable(queries, gallery, k, exclude_self)?;
    }
    let ranks = first_hit_ranks(queries, gallery, exclude_self)?;
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n))
        .collect())
}
