//! Exact dense attention and dense Top-K, the reference every sparse path is
//! measured against.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::types::{dot, KvStore};

/// Attention weights over a set of key positions and the aggregated value.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Key positions the weights refer to, in evaluation order.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub output: Vec<f32>,
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// `softmax(q·Kᵀ/√d)·V` over `mask` (all positions when `None`).
pub fn dense_attention(q: &[f32], kv: &KvStore, mask: Option<&[usize]>) -> Result<AttentionOutput> {
    let d = kv.dim();
    if q.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: q.len(),
        });
    }
    if kv.is_empty() {
        return Err(Error::param("attention over an empty KV store"));
    }
    let indices: Vec<usize> = match mask {
        Some(m) => {
            if m.is_empty() {
                return Err(Error::param("attention mask selects no keys"));
            }
            if let Some(&bad) = m.iter().find(|&&i| i >= kv.len()) {
                return Err(Error::param(format!(
                    "mask index {bad} out of range for {} keys",
                    kv.len()
                )));
            }
            m.to_vec()
        }
        None => (0..kv.len()).collect(),
    };

    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = indices.iter().map(|&i| dot(q, kv.key(i)) * scale).collect();
    let weights = softmax(&logits);

    let mut acc = vec![0.0f64; d];
    for (&i, &w) in indices.iter().zip(&weights) {
        for (a, &v) in acc.iter_mut().zip(kv.value(i)) {
            *a += w * v as f64;
        }
    }
    Ok(AttentionOutput {
        indices,
        weights,
        output: acc.into_iter().map(|x| x as f32).collect(),
    })
}

/// Descending by score, ascending by index on ties.
#[inline]
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices of the `k` largest scores under the global tie rule (lower index
/// wins), returned in ascending index order.
pub fn top_k_indices(scores: impl IntoIterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
    if k == 0 {
        return Vec::new();
    }
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, |&a, &b| rank_order(a, b));
        ranked.truncate(k);
    }
    let mut out: Vec<usize> = ranked.into_iter().map(|(i, _)| i).collect();
    out.sort_unstable();
    out
}

/// The `k` keys with the largest `q·k_i`, ties to the lower index.
pub fn dense_topk(q: &[f32], kv: &KvStore, k: usize) -> Result<Vec<usize>> {
    if q.len() != kv.dim() {
        return Err(Error::Dimension {
            expected: kv.dim(),
            actual: q.len(),
        });
    }
    if k == 0 || k > kv.len() {
        return Err(Error::param(format!("top-k size {k} outside 1..={}", kv.len())));
    }
    Ok(top_k_indices(kv.keys().enumerate().map(|(i, key)| (i, dot(q, key))), k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv2() -> KvStore {
        KvStore::from_prefill(2, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn two_key_reference_values() {
        // weights = [e^{1/√2}, 1] / (e^{1/√2} + 1), evaluated independently at high precision
        let out = dense_attention(&[1.0, 0.0], &kv2(), None).unwrap();
        let expected = [0.669_761_549_326_657_f64, 0.330_238_450_673_343];
        for (w, e) in out.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-6, "{w} vs {e}");
        }
        assert!((out.output[0] as f64 - expected[0]).abs() < 1e-6);
        assert!((out.output[1] as f64 - expected[1]).abs() < 1e-6);
    }

    #[test]
    fn single_key_mask() {
        let kv = kv2();
        let out = dense_attention(&[0.3, -2.0], &kv, Some(&[0])).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.output, kv.value(0));
    }

    #[test]
    fn symmetric_logits_give_uniform_weights() {
        let kv = KvStore::from_prefill(2, vec![0.0, 1.0, 0.0, -1.0, 0.0, 1.0], vec![0.0; 6]).unwrap();
        let out = dense_attention(&[1.0, 0.0], &kv, None).unwrap();
        for w in out.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(dense_attention(&[1.0, 0.0], &kv2(), Some(&[])).is_err());
        assert!(dense_attention(&[1.0, 0.0], &kv2(), Some(&[2])).is_err());
    }

    #[test]
    fn full_mask_matches_unmasked_exactly() {
        let kv = kv2();
        let a = dense_attention(&[0.2, 0.7], &kv, None).unwrap();
        let b = dense_attention(&[0.2, 0.7], &kv, Some(&[0, 1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn topk_examples() {
        let scores = [0.1, 0.9, 0.5];
        assert_eq!(top_k_indices(scores.iter().copied().enumerate(), 2), vec![1, 2]);
        assert_eq!(top_k_indices(scores.iter().copied().enumerate(), 3), vec![0, 1, 2]);
        // tie at the boundary goes to the lower index
        assert_eq!(top_k_indices([(0, 1.0), (1, 2.0), (2, 1.0)], 2), vec![0, 1]);
    }

    #[test]
    fn dense_topk_bounds() {
        let kv = kv2();
        assert!(dense_topk(&[1.0, 0.0], &kv, 0).is_err());
        assert!(dense_topk(&[1.0, 0.0], &kv, 3).is_err());
        assert_eq!(dense_topk(&[1.0, 0.0], &kv, 2).unwrap(), vec![0, 1]);
    }
}
