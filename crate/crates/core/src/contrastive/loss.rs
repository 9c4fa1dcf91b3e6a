//! Cosine similarity, the memory-bank pruner and the InfoNCE objective.

use crate::embedder::EmbeddingVector;
use crate::scalar::{dot, gemm, l2_norm, Scalar};

use super::bank::MemoryBank;
use super::ContrastError;

/// Normalized dot product.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T, ContrastError> {
    if a.len() != b.len() {
        return Err(ContrastError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(ContrastError::Embed(crate::embedder::EmbedError::ZeroNorm));
    }
    let s = dot(a, b) / (na * nb);
    Ok(s.max(-T::one()).min(T::one()))
}

/// Whether a negative with similarity `sim` to the anchor survives pruning.
///
/// Level 0 keeps everything. Otherwise negatives strictly more similar than
/// `threshold` are dropped; a similarity exactly at the threshold is kept.
#[inline]
pub fn keeps_negative<T: Scalar>(sim: T, threshold: T, granularity: u32) -> bool {
    granularity == 0 || !(sim > threshold)
}

/// Per-anchor filtered snapshot of the memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedBank<T> {
    pub kept: Vec<EmbeddingVector<T>>,
    pub removed_count: usize,
}

impl<T: Scalar> PrunedBank<T> {
    pub fn empty() -> Self {
        Self {
            kept: Vec::new(),
            removed_count: 0,
        }
    }

    pub fn k_prime(&self) -> usize {
        self.kept.len()
    }
}

/// Removes negatives too similar to the anchor `q`. Both `q` and the bank
/// entries are unit-norm, so the similarity is their dot product. The bank
/// itself is left untouched; kept entries preserve FIFO order.
pub fn prune<T: Scalar>(
    q: &EmbeddingVector<T>,
    bank: &MemoryBank<T>,
    threshold: T,
    granularity: u32,
) -> Result<PrunedBank<T>, ContrastError> {
    if !bank.is_empty() && q.dim() != bank.dim() {
        return Err(ContrastError::DimensionMismatch {
            expected: bank.dim(),
            found: q.dim(),
        });
    }
    let mut kept = Vec::new();
    let mut removed_count = 0;
    for k in bank.iter() {
        if keeps_negative(dot(k, q.values()), threshold, granularity) {
            kept.push(EmbeddingVector::new(k.to_vec()));
        } else {
            removed_count += 1;
        }
    }
    Ok(PrunedBank { kept, removed_count })
}

/// Gradients of the InfoNCE loss with respect to both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
}

/// `-log( exp(q.k/τ) / (exp(q.k/τ) + Σ exp(q.k_i/τ)) )`, evaluated with a
/// max-shifted log-sum-exp.
pub fn info_nce<T: Scalar>(
    q: &EmbeddingVector<T>,
    k: &EmbeddingVector<T>,
    negatives: &PrunedBank<T>,
    temperature: T,
) -> Result<(T, InfoNceGrad<T>), ContrastError> {
    if !(temperature > T::zero()) {
        return Err(ContrastError::NonPositiveTemperature(temperature.as_f64()));
    }
    let d = q.dim();
    for v in std::iter::once(k).chain(negatives.kept.iter()) {
        if v.dim() != d {
            return Err(ContrastError::DimensionMismatch {
                expected: d,
                found: v.dim(),
            });
        }
    }
    let inv_t = T::one() / temperature;
    let pos = dot(q.values(), k.values()) * inv_t;
    let negs: Vec<T> = negatives
        .kept
        .iter()
        .map(|n| dot(q.values(), n.values()) * inv_t)
        .collect();
    let (loss, p_pos, p_negs) = softmax_nll(pos, &negs);

    // dL/dq = ((p0 - 1) k + Σ p_i k_i) / τ ; dL/dk = (p0 - 1) q / τ
    let mut dq: Vec<T> = k.values().iter().map(|v| (p_pos - T::one()) * *v).collect();
    for (p, n) in p_negs.iter().zip(&negatives.kept) {
        for (g, v) in dq.iter_mut().zip(n.values()) {
            *g += *p * *v;
        }
    }
    dq.iter_mut().for_each(|g| *g *= inv_t);
    let dk = q
        .values()
        .iter()
        .map(|v| (p_pos - T::one()) * *v * inv_t)
        .collect();
    Ok((loss, InfoNceGrad { dq, dk }))
}

/// Negative log-softmax of the positive logit, plus the softmax weights.
fn softmax_nll<T: Scalar>(pos: T, negs: &[T]) -> (T, T, Vec<T>) {
    let m = negs.iter().fold(pos, |a, &b| a.max(b));
    let e_pos = (pos - m).exp();
    let e_negs: Vec<T> = negs.iter().map(|&l| (l - m).exp()).collect();
    let mut z = e_pos;
    for e in &e_negs {
        z += *e;
    }
    let loss = (m + z.ln() - pos).max(T::zero());
    (loss, e_pos / z, e_negs.into_iter().map(|e| e / z).collect())
}

/// Result of the batched loss over one memory-bank snapshot.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// Mean loss over the batch.
    pub loss: T,
    /// Gradient of the mean loss w.r.t. each normalized query, `[B, D]`.
    pub d_queries: Vec<T>,
    pub k_prime: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Batched InfoNCE with per-anchor pruning against a shared bank snapshot.
///
/// `queries` and `keys` are row-major `[B, D]`, unit-norm rows.
pub fn batch_info_nce<T: Scalar>(
    queries: &[T],
    keys: &[T],
    bank: &MemoryBank<T>,
    threshold: T,
    granularity: u32,
    temperature: T,
) -> Result<BatchLoss<T>, ContrastError> {
    if !(temperature > T::zero()) {
        return Err(ContrastError::NonPositiveTemperature(temperature.as_f64()));
    }
    let d = bank.dim();
    if queries.len() != keys.len() || queries.len() % d != 0 {
        return Err(ContrastError::DimensionMismatch {
            expected: d,
            found: queries.len(),
        });
    }
    let batch = queries.len() / d;
    let kn = bank.len();
    let inv_t = T::one() / temperature;
    let inv_b = T::one() / T::lit(batch as f64);

    let mut sims = vec![T::zero(); batch * kn];
    gemm(false, true, batch, d, kn, T::one(), queries, bank.raw(), T::zero(), &mut sims);

    let mut weights = vec![T::zero(); batch * kn];
    let mut d_queries = vec![T::zero(); batch * d];
    let mut total = T::zero();
    let mut k_prime = Vec::with_capacity(batch);
    let mut removed = Vec::with_capacity(batch);
    let mut logits = Vec::with_capacity(kn);
    let mut kept_idx = Vec::with_capacity(kn);
    for b in 0..batch {
        let q = &queries[b * d..(b + 1) * d];
        let k = &keys[b * d..(b + 1) * d];
        logits.clear();
        kept_idx.clear();
        for (j, &s) in sims[b * kn..(b + 1) * kn].iter().enumerate() {
            if keeps_negative(s, threshold, granularity) {
                logits.push(s * inv_t);
                kept_idx.push(j);
            }
        }
        k_prime.push(kept_idx.len());
        removed.push(kn - kept_idx.len());
        let pos = dot(q, k) * inv_t;
        let (loss, p_pos, p_negs) = softmax_nll(pos, &logits);
        total += loss;
        let scale = inv_t * inv_b;
        for (&j, p) in kept_idx.iter().zip(&p_negs) {
            weights[b * kn + j] = *p * scale;
        }
        let coef = (p_pos - T::one()) * scale;
        for (g, v) in d_queries[b * d..(b + 1) * d].iter_mut().zip(k) {
            *g = coef * *v;
        }
    }
    gemm(false, false, batch, kn, d, T::one(), &weights, bank.raw(), T::one(), &mut d_queries);
    Ok(BatchLoss {
        loss: total * inv_b,
        d_queries,
        k_prime,
        removed,
    })
}
