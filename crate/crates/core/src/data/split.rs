use std::collections::HashSet;

use super::{DataError, Dataset};

/// How [`split_classes`] partitions a dataset's classes.
#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    /// Consecutive runs of the class list; each subset receives the share
    /// given by its fraction, with boundaries rounded cumulatively so the
    /// counts always add up.
    Fractions(Vec<f64>),
    /// Explicit class ids; the lists must be disjoint and cover every class.
    Lists(Vec<Vec<u32>>),
}

/// Class-disjoint subsets of `ds`. Every sample lands in exactly one subset.
pub fn split_classes(ds: &Dataset, split: &Split) -> Result<Vec<Dataset>, DataError> {
    let ids: Vec<u32> = ds.classes().iter().map(|c| c.id).collect();
    let lists = match split {
        Split::Fractions(fr) => {
            if fr.is_empty() || fr.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
                return Err(DataError::Split("fractions must be finite and non-negative".into()));
            }
            let total: f64 = fr.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(DataError::Split(format!("fractions sum to {total}, not 1")));
            }
            let n = ids.len() as f64;
            let mut cum = 0.0;
            let mut start = 0;
            let mut lists = Vec::with_capacity(fr.len());
            for (i, f) in fr.iter().enumerate() {
                cum += f;
                let end = if i + 1 == fr.len() {
                    ids.len()
                } else {
                    ((cum * n).round() as usize).clamp(start, ids.len())
                };
                lists.push(ids[start..end].to_vec());
                start = end;
            }
            lists
        }
        Split::Lists(lists) => {
            let known: HashSet<u32> = ids.iter().copied().collect();
            let mut seen = HashSet::new();
            for id in lists.iter().flatten() {
                if !known.contains(id) {
                    return Err(DataError::Split(format!("unknown class {id}")));
                }
                if !seen.insert(*id) {
                    return Err(DataError::Split(format!("class {id} appears in more than one list")));
                }
            }
            if seen.len() != known.len() {
                return Err(DataError::Split(format!(
                    "lists cover {} of {} classes",
                    seen.len(),
                    known.len()
                )));
            }
            lists.clone()
        }
    };
    lists.iter().map(|l| ds.subset(l)).collect()
}
