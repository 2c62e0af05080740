//! Per-step operation and byte counters, and the closed-form cost model they
//! are checked against.

use std::ops::{Add, AddAssign};

/// Work counted for one decode step (or summed over many).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostCounters {
    /// Query→centroid multiply-adds: `C·d` per search.
    pub centroid_dot_ops: u64,
    pub lists_gathered: u64,
    /// Entries read from the gathered lists, at most `m·τ·L` per search.
    pub gathered_entries: u64,
    /// Pairs passed through the sort + segmented sum.
    pub reduce_ops: u64,
    /// Subspaces in which centroid backoff fired.
    pub backoff_subspaces: u64,
    /// `K·d` multiply-adds of sparse attention over the kept keys.
    pub attention_key_ops: u64,
    /// Modeled host→device bytes, amortized over the search period.
    pub h2d_bytes_model: f64,
    pub searches: u64,
    pub inserts_attempted: u64,
    pub inserts_applied: u64,
    /// Multiply-adds scoring the appended key against every centroid.
    pub insert_dot_ops: u64,
}

impl CostCounters {
    /// Search-side work (constant in the context length).
    pub fn search_ops(&self) -> u64 {
        self.centroid_dot_ops + self.gathered_entries + self.reduce_ops
    }

    /// Search plus streaming-update work: the per-step overhead added on
    /// top of attention.
    pub fn overhead_ops(&self) -> u64 {
        self.search_ops() + self.insert_dot_ops
    }
}

impl AddAssign for CostCounters {
    fn add_assign(&mut self, o: Self) {
        self.centroid_dot_ops += o.centroid_dot_ops;
        self.lists_gathered += o.lists_gathered;
        self.gathered_entries += o.gathered_entries;
        self.reduce_ops += o.reduce_ops;
        self.backoff_subspaces += o.backoff_subspaces;
        self.attention_key_ops += o.attention_key_ops;
        self.h2d_bytes_model += o.h2d_bytes_model;
        self.searches += o.searches;
        self.inserts_attempted += o.inserts_attempted;
        self.inserts_applied += o.inserts_applied;
        self.insert_dot_ops += o.insert_dot_ops;
    }
}

impl Add for CostCounters {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

/// Modeled host→device traffic per step: `2·ρ·N·d·B / P` (keys and values
/// of the kept set, amortized over the search period). Results within 1e-9
/// of a whole byte count are snapped to it, so decimal ratios such as 0.07
/// give exact integers where the algebra does.
pub fn h2d_bytes(keep_ratio: f64, context_len: usize, d: usize, bytes_per_elem: usize, period: usize) -> f64 {
    let dense = (2 * context_len * d * bytes_per_elem) as f64;
    let x = dense * keep_ratio / period as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        x
    }
}

/// Same model with an explicit kept-key count: `2·K·d·B / P`.
pub fn h2d_bytes_kept(keep: usize, d: usize, bytes_per_elem: usize, period: usize) -> f64 {
    (2 * keep * d * bytes_per_elem) as f64 / period as f64
}

/// Index size: `m·C·L·(4 + B)` list bytes (u32 index + B-byte score) plus
/// `C·d·B` centroid bytes. For B = 2 this is `6·m·C·L + 2·C·d`.
pub fn table_bytes(m: usize, c: usize, list_len: usize, d: usize, bytes_per_score: usize) -> u64 {
    let lists = m * c * list_len * (4 + bytes_per_score);
    let centroids = c * d * bytes_per_score;
    (lists + centroids) as u64
}

/// Dense KV footprint `2·d·B·N`.
pub fn kv_bytes(context_len: usize, d: usize, bytes_per_elem: usize) -> u64 {
    (2 * d * bytes_per_elem * context_len) as u64
}

/// Closed-form search counters for one search step with `lists_per_subspace`
/// full lists gathered in each subspace: `(C·d, m·τ·L)`.
pub fn search_closed_form(m: usize, c: usize, d: usize, list_len: usize, lists_per_subspace: usize) -> (u64, u64) {
    ((c * d) as u64, (m * lists_per_subspace * list_len) as u64)
}
