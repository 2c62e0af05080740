use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Outcome of offering one `(index, score)` pair to a full or partial list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Inserted after evicting the listed key index.
    Evicted(u32),
    Rejected,
}

impl InsertOutcome {
    pub fn applied(self) -> bool {
        !matches!(self, InsertOutcome::Rejected)
    }
}

/// Fixed-capacity list of the best-scoring keys for one (subspace, centroid)
/// pair. Entries are ordered by score descending, key index ascending on
/// equal scores; the capacity never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TopList {
    capacity: usize,
    indices: Vec<u32>,
    scores: Vec<f32>,
}

#[inline]
fn precedes(a: (u32, f32), b: (u32, f32)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Sort order matching `precedes`; inputs are finite.
#[inline]
fn rank(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

impl TopList {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            indices: Vec::with_capacity(capacity),
            scores: Vec::with_capacity(capacity),
        }
    }

    /// The `capacity` best of `scores` (position = key index).
    pub fn from_scores(scores: &[f32], capacity: usize) -> Self {
        Self::from_pairs(scores.iter().enumerate().map(|(i, &s)| (i as u32, s)), capacity)
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f32)>, capacity: usize) -> Self {
        let mut all: Vec<(u32, f32)> = pairs.into_iter().collect();
        if capacity < all.len() && capacity > 0 {
            all.select_nth_unstable_by(capacity - 1, rank);
        }
        all.truncate(capacity);
        all.sort_unstable_by(rank);
        let (indices, scores) = all.into_iter().unzip();
        Self {
            capacity,
            indices,
            scores,
        }
    }

    /// Builds a list from stored entries, re-checking every invariant.
    /// Entries with equal scores are put back in index order.
    pub fn from_stored(capacity: usize, indices: Vec<u32>, scores: Vec<f32>) -> Result<Self> {
        if indices.len() != scores.len() {
            return Err(Error::param("index and score arrays differ in length"));
        }
        if indices.len() > capacity {
            return Err(Error::param(format!(
                "list holds {} entries but capacity is {capacity}",
                indices.len()
            )));
        }
        if let Some(p) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::param(format!("non-finite score at entry {p}")));
        }
        if let Some(p) = scores.windows(2).position(|w| w[0] < w[1]) {
            return Err(Error::param(format!("scores not descending at entry {}", p + 1)));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::param(format!("duplicate key index {}", w[0])));
        }
        let mut pairs: Vec<(u32, f32)> = indices.into_iter().zip(scores).collect();
        // only reorders runs of equal scores
        pairs.sort_by(rank);
        let (indices, scores) = pairs.into_iter().unzip();
        Ok(Self {
            capacity,
            indices,
            scores,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() >= self.capacity
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.scores.iter().copied())
    }

    /// Smallest retained score, if any.
    pub fn min_score(&self) -> Option<f32> {
        self.scores.last().copied()
    }

    pub fn max_score(&self) -> Option<f32> {
        self.scores.first().copied()
    }

    /// Offers a new entry. A full list only accepts entries that rank ahead
    /// of its current last entry, which is then evicted.
    pub fn try_insert(&mut self, index: u32, score: f32) -> InsertOutcome {
        if self.capacity == 0 || !score.is_finite() {
            return InsertOutcome::Rejected;
        }
        let mut evicted = None;
        if self.is_full() {
            let last = (*self.indices.last().unwrap(), *self.scores.last().unwrap());
            if !precedes((index, score), last) {
                return InsertOutcome::Rejected;
            }
            self.indices.pop();
            self.scores.pop();
            evicted = Some(last.0);
        }
        let pos = self
            .indices
            .iter()
            .zip(&self.scores)
            .position(|(&i, &s)| precedes((index, score), (i, s)))
            .unwrap_or(self.indices.len());
        self.indices.insert(pos, index);
        self.scores.insert(pos, score);
        match evicted {
            Some(e) => InsertOutcome::Evicted(e),
            None => InsertOutcome::Inserted,
        }
    }
}
