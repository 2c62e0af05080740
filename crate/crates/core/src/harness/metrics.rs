use std::collections::HashSet;

use crate::error::{Error, Result};

/// `|selected ∩ truth| / |truth|`.
pub fn recall_at_k(selected: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::param("recall against an empty ground-truth set"));
    }
    let truth_set: HashSet<usize> = truth.iter().copied().collect();
    let picked: HashSet<usize> = selected.iter().copied().collect();
    let hit = picked.intersection(&truth_set).count();
    Ok(hit as f64 / truth_set.len() as f64)
}

/// Euclidean distance between two equal-length outputs.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Nearest-rank percentile (`p` in (0, 1]) of `values`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        assert!((recall_at_k(&[1, 2, 3], &[2, 3, 4]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&[5, 6], &[6, 5]).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1], &[2]).unwrap(), 0.0);
        assert!(recall_at_k(&[1], &[]).is_err());
    }

    #[test]
    fn percentiles_are_ordered() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), Some(50.0));
        assert_eq!(percentile(&v, 0.9), Some(90.0));
        assert_eq!(percentile(&v, 0.99), Some(99.0));
        assert_eq!(percentile(&[3.0], 0.99), Some(3.0));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
