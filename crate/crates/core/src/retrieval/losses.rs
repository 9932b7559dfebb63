use super::{EmbeddingBatch, ProxyBank, RetrievalError};
use crate::tensor::{Graph, Tensor, Var};

fn slot(classes: &[u32], label: u32) -> Result<usize, RetrievalError> {
    classes
        .iter()
        .position(|&c| c == label)
        .ok_or(RetrievalError::MissingProxy(label))
}

fn distinct(labels: &[u32]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// Margin loss over the given ordered pairs `(anchor, other)` of rows of
/// `emb` (`[B, C]`):
/// Σ [α + y(D − β_anchor)]₊ divided by the number of nonzero terms, where
/// y = +1 for same-label pairs and −1 otherwise and D is the Euclidean
/// distance. `beta` holds one boundary per entry of `beta_classes`.
pub fn margin_loss_in(
    g: &mut Graph,
    emb: Var,
    labels: &[u32],
    beta: Var,
    beta_classes: &[u32],
    alpha: f64,
    pairs: &[(usize, usize)],
) -> Result<Var, RetrievalError> {
    if distinct(labels) < 2 {
        return Err(RetrievalError::SingleClass);
    }
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let slots = is
        .iter()
        .map(|&i| slot(beta_classes, labels[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let signs: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| if labels[i] == labels[j] { 1.0 } else { -1.0 })
        .collect();

    let a = g.index_select(emb, &is)?;
    let b = g.index_select(emb, &js)?;
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.sum_axis(sq, 1)?;
    let dist = g.sqrt(sq)?;
    let boundary = g.index_select(beta, &slots)?;
    let gap = g.sub(dist, boundary)?;
    let y = g.constant(Tensor::vector(&signs));
    let t = g.mul(y, gap)?;
    let t = g.add_scalar(t, alpha);
    let hinge = g.relu(t);
    let active = g.value(hinge).data().iter().filter(|&&v| v > 0.0).count();
    let total = g.sum(hinge);
    Ok(if active == 0 {
        total
    } else {
        g.scale(total, 1.0 / active as f64)
    })
}

pub fn margin_loss(
    batch: &EmbeddingBatch,
    beta: &Tensor,
    beta_classes: &[u32],
    alpha: f64,
    pairs: &[(usize, usize)],
) -> Result<Tensor, RetrievalError> {
    let mut g = Graph::new();
    let e = g.constant(batch.embeddings.clone());
    let b = g.constant(beta.clone());
    let l = margin_loss_in(&mut g, e, &batch.labels, b, beta_classes, alpha, pairs)?;
    Ok(g.value(l).clone())
}

/// Proxy-NCA: mean over rows of d(φ, p_y) + log Σ_{z≠y} exp(−d(φ, p_z)),
/// with d the squared Euclidean distance to the unit-normalized proxy.
pub fn proxy_nca_loss_in(
    g: &mut Graph,
    emb: Var,
    labels: &[u32],
    proxies: Var,
    proxy_classes: &[u32],
) -> Result<Var, RetrievalError> {
    let z = proxy_classes.len();
    if z < 2 {
        return Err(RetrievalError::TooFewProxies(z));
    }
    let targets = labels
        .iter()
        .map(|&l| slot(proxy_classes, l))
        .collect::<Result<Vec<_>, _>>()?;
    let bsz = labels.len();

    let sq = g.mul(proxies, proxies)?;
    let norms = g.sum_axis(sq, 1)?;
    let norms = g.sqrt(norms)?;
    let pt = g.transpose(proxies)?;
    let unit_t = g.div(pt, norms)?;
    let unit = g.transpose(unit_t)?;

    let cross = g.matmul(emb, unit_t)?;
    let cross = g.scale(cross, -2.0);
    let usq = g.mul(unit, unit)?;
    let usq = g.sum_axis(usq, 1)?;
    let dist = g.add(cross, usq)?;
    let esq = g.mul(emb, emb)?;
    let esq = g.sum_axis(esq, 1)?;
    let dist_t = g.transpose(dist)?;
    let dist_t = g.add(dist_t, esq)?;
    let dist = g.transpose(dist_t)?;

    let mut total: Option<Var> = None;
    for (k, &y) in targets.iter().enumerate() {
        let row = g.slice(dist, 0, k, k + 1)?;
        let row = g.reshape(row, &[z])?;
        let pos = g.index_select(row, &[y])?;
        let pos = g.sum(pos);
        let others: Vec<usize> = (0..z).filter(|&i| i != y).collect();
        let neg = g.index_select(row, &others)?;
        let neg = g.neg(neg);
        let lse = g.logsumexp(neg, 0)?;
        let term = g.add(pos, lse)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| RetrievalError::Invalid("empty batch".into()))?;
    Ok(g.scale(total, 1.0 / bsz as f64))
}

pub fn proxy_nca_loss(batch: &EmbeddingBatch, bank: &ProxyBank) -> Result<Tensor, RetrievalError> {
    let mut g = Graph::new();
    let e = g.constant(batch.embeddings.clone());
    let p = g.constant(bank.proxies.clone());
    let l = proxy_nca_loss_in(&mut g, e, &batch.labels, p, &bank.classes)?;
    Ok(g.value(l).clone())
}

/// Multi-similarity loss weights and the mining margin ε.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsMining {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

/// Mined (positives, negatives) per anchor from a B×B similarity matrix.
///
/// Negatives survive when more similar than the least similar positive
/// minus ε; positives survive when less similar than the most similar
/// negative plus ε. An anchor without positives keeps all its negatives
/// and vice versa.
pub fn ms_mined_pairs(sim: &[f64], labels: &[u32], epsilon: f64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            let row = &sim[i * b..(i + 1) * b];
            let pos: Vec<usize> = (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
            let neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
            let min_pos = pos.iter().map(|&k| row[k]).fold(f64::INFINITY, f64::min);
            let max_neg = neg.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
            let no_pos = pos.is_empty();
            let no_neg = neg.is_empty();
            let kept_neg = neg.into_iter().filter(|&k| no_pos || row[k] > min_pos - epsilon).collect();
            let kept_pos = pos.into_iter().filter(|&k| no_neg || row[k] < max_neg + epsilon).collect();
            (kept_pos, kept_neg)
        })
        .collect()
}

/// log(1 + Σ exp(scale·(s − λ))) over the selected entries of `row`.
fn soft_term(g: &mut Graph, row: Var, picks: &[usize], scale: f64, lambda: f64) -> Result<Var, RetrievalError> {
    let s = g.index_select(row, picks)?;
    let s = g.add_scalar(s, -lambda);
    let s = g.scale(s, scale);
    let zero = g.constant(Tensor::vector(&[0.0]));
    let all = g.concat(&[zero, s], 0)?;
    Ok(g.logsumexp(all, 0)?)
}

/// Multi-similarity loss on cosine similarities of unit rows of `emb`,
/// averaged over anchors that keep at least one mined pair.
pub fn multi_similarity_loss_in(
    g: &mut Graph,
    emb: Var,
    labels: &[u32],
    p: MsMining,
) -> Result<Var, RetrievalError> {
    let b = labels.len();
    let et = g.transpose(emb)?;
    let sim = g.matmul(emb, et)?;
    let mined = ms_mined_pairs(g.value(sim).data(), labels, p.epsilon);
    let mut total: Option<Var> = None;
    let mut anchors = 0;
    for (i, (pos, neg)) in mined.iter().enumerate() {
        if pos.is_empty() && neg.is_empty() {
            continue;
        }
        anchors += 1;
        let row = g.slice(sim, 0, i, i + 1)?;
        let row = g.reshape(row, &[b])?;
        let mut terms = Vec::new();
        if !pos.is_empty() {
            let t = soft_term(g, row, pos, -p.alpha, p.lambda)?;
            terms.push(g.scale(t, 1.0 / p.alpha));
        }
        if !neg.is_empty() {
            let t = soft_term(g, row, neg, p.beta, p.lambda)?;
            terms.push(g.scale(t, 1.0 / p.beta));
        }
        for t in terms {
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
    }
    Ok(match total {
        Some(t) => g.scale(t, 1.0 / anchors as f64),
        None => g.constant(Tensor::scalar(0.0)),
    })
}

pub fn multi_similarity_loss(batch: &EmbeddingBatch, p: MsMining) -> Result<Tensor, RetrievalError> {
    let mut g = Graph::new();
    let e = g.constant(batch.embeddings.clone());
    let l = multi_similarity_loss_in(&mut g, e, &batch.labels, p)?;
    Ok(g.value(l).clone())
}
