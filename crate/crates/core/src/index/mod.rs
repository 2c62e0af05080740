//! Query-centric lookup tables built once over the prefill context.
//!
//! For every subspace `b` the prefill queries are clustered into `C` unit
//! centroids. Every centroid then scores every prefill key slice,
//! `s = ⟨c_j^(b), k_i^(b)⟩`, and keeps the `L` best `(key, score)` pairs in a
//! fixed-capacity [`TopList`]. `L = ⌈α·𝒫⌉` unless overridden.

mod format;
mod toplist;

use rayon::prelude::*;

pub use format::{stored_score_bits, ByteBreakdown, ScoreBits, FORMAT_VERSION, MAGIC};
pub use toplist::{InsertOutcome, TopList};

use crate::clustering::{cosine_kmeans, CentroidSet, ClusterConfig};
use crate::error::{Error, Result};
use crate::types::{ceil_ratio, dot, l2_normalize, KvStore, SubspaceLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    /// List-size ratio: `L = ⌈α·𝒫⌉`.
    pub alpha: f64,
    /// Absolute `L`, overriding `alpha`.
    pub list_len: Option<usize>,
    /// Score against ℓ2-normalized key slices instead of raw ones.
    pub normalize_keys: bool,
    pub cluster: ClusterConfig,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            list_len: None,
            normalize_keys: false,
            cluster: ClusterConfig::default(),
        }
    }
}

impl IndexConfig {
    pub fn list_capacity(&self, prefill_len: usize) -> Result<usize> {
        match self.list_len {
            Some(0) => Err(Error::param("list length override must be at least 1")),
            Some(l) => Ok(l),
            None => {
                if !(self.alpha > 0.0 && self.alpha <= 1.0) {
                    return Err(Error::param(format!("alpha must lie in (0, 1], got {}", self.alpha)));
                }
                Ok(ceil_ratio(self.alpha, prefill_len))
            }
        }
    }
}

/// Centroid score of one key slice.
#[inline]
pub fn score_key(centroid: &[f32], key: &[f32], normalize_keys: bool) -> f32 {
    let s = if normalize_keys {
        let n = l2_normalize(key);
        if n.degenerate {
            0.0
        } else {
            dot(centroid, &n.vector)
        }
    } else {
        dot(centroid, key)
    };
    // fold -0.0 into 0.0 so list ordering sees a single zero
    s as f32 + 0.0
}

/// Scores every key slice against one centroid.
pub fn score_keys<'a>(centroid: &[f32], keys: impl IntoIterator<Item = &'a [f32]>, normalize_keys: bool) -> Vec<f32> {
    keys.into_iter()
        .map(|k| score_key(centroid, k, normalize_keys))
        .collect()
}

/// Per-table outcome of offering one new key to every list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertReport {
    pub attempted: usize,
    pub applied: usize,
    pub evicted: usize,
    /// Multiply-adds spent scoring the key against every centroid.
    pub dot_ops: u64,
}

/// Work done while building an index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    /// Multiply-adds of the clustering objective evaluations and assignments.
    pub cluster_dot_ops: u64,
    /// `𝒫·C·d` multiply-adds of centroid→key scoring.
    pub scoring_dot_ops: u64,
    pub degenerate_queries: Vec<usize>,
    pub objective_traces: Vec<Vec<f64>>,
}

/// The full lookup structure for one KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct CsIndex {
    layout: SubspaceLayout,
    centroid_sets: Vec<CentroidSet>,
    /// Row-major `m × C`: table `(b, j)` is at `b·C + j`.
    tables: Vec<TopList>,
    list_capacity: usize,
    prefill_len: usize,
    /// Position the next streamed key must have.
    keys_seen: usize,
    normalize_keys: bool,
}

impl CsIndex {
    /// Scores keys `0..scored` of `kv` against fixed centroids and keeps
    /// Top-`list_capacity` lists. This is the batch path `build_index` uses
    /// after clustering; it also serves callers that supply their own
    /// centroids.
    pub fn from_centroids(
        layout: SubspaceLayout,
        centroid_sets: Vec<CentroidSet>,
        kv: &KvStore,
        scored: usize,
        list_capacity: usize,
        prefill_len: usize,
        normalize_keys: bool,
    ) -> Result<Self> {
        layout.check_dim(kv.dim())?;
        if centroid_sets.len() != layout.num_subspaces() {
            return Err(Error::param(format!(
                "{} centroid sets for {} subspaces",
                centroid_sets.len(),
                layout.num_subspaces()
            )));
        }
        let c = centroid_sets[0].len();
        for (b, set) in centroid_sets.iter().enumerate() {
            if set.len() != c || set.width() != layout.width(b) {
                return Err(Error::param(format!(
                    "centroid set {b} is {}×{}, expected {c}×{}",
                    set.len(),
                    set.width(),
                    layout.width(b)
                )));
            }
        }
        if scored > kv.len() || prefill_len == 0 || prefill_len > scored {
            return Err(Error::param(format!(
                "cannot score {scored} keys with prefill length {prefill_len} over {} stored",
                kv.len()
            )));
        }
        if list_capacity == 0 {
            return Err(Error::param("list capacity must be at least 1"));
        }
        if scored > u32::MAX as usize {
            return Err(Error::param("key positions must fit in 32 bits"));
        }

        let tables: Vec<TopList> = centroid_sets
            .par_iter()
            .enumerate()
            .flat_map_iter(|(b, set)| {
                let slices: Vec<&[f32]> = (0..scored).map(|i| layout.slice(kv.key(i), b)).collect();
                set.iter()
                    .map(|centroid| {
                        let scores = score_keys(centroid, slices.iter().copied(), normalize_keys);
                        TopList::from_scores(&scores, list_capacity)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        Ok(Self {
            layout,
            centroid_sets,
            tables,
            list_capacity,
            prefill_len,
            keys_seen: scored,
            normalize_keys,
        })
    }

    pub(crate) fn from_parts(
        layout: SubspaceLayout,
        centroid_sets: Vec<CentroidSet>,
        tables: Vec<TopList>,
        list_capacity: usize,
        prefill_len: usize,
        normalize_keys: bool,
    ) -> Result<Self> {
        let keys_seen = tables
            .iter()
            .flat_map(|t| t.indices().iter().map(|&i| i as usize + 1))
            .max()
            .unwrap_or(0)
            .max(prefill_len);
        let index = Self {
            layout,
            centroid_sets,
            tables,
            list_capacity,
            prefill_len,
            keys_seen,
            normalize_keys,
        };
        index.check_invariants()?;
        Ok(index)
    }

    pub fn layout(&self) -> &SubspaceLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn num_subspaces(&self) -> usize {
        self.layout.num_subspaces()
    }

    pub fn num_centroids(&self) -> usize {
        self.centroid_sets[0].len()
    }

    pub fn list_capacity(&self) -> usize {
        self.list_capacity
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    /// `L / 𝒫`, the effective list-size ratio.
    pub fn alpha(&self) -> f64 {
        self.list_capacity as f64 / self.prefill_len as f64
    }

    /// Number of key positions the tables have been offered so far.
    pub fn keys_seen(&self) -> usize {
        self.keys_seen
    }

    pub fn normalize_keys(&self) -> bool {
        self.normalize_keys
    }

    pub fn centroid_sets(&self) -> &[CentroidSet] {
        &self.centroid_sets
    }

    pub fn centroids(&self, b: usize) -> &CentroidSet {
        &self.centroid_sets[b]
    }

    pub fn table(&self, b: usize, j: usize) -> &TopList {
        &self.tables[b * self.num_centroids() + j]
    }

    pub fn tables(&self) -> &[TopList] {
        &self.tables
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    /// Offers key `key_index` to every table. `key_index` must be the next
    /// append position.
    pub fn insert_key(&mut self, key: &[f32], key_index: usize) -> Result<InsertReport> {
        self.layout.check_dim(key.len())?;
        if key_index != self.keys_seen {
            return Err(Error::param(format!(
                "streamed key has position {key_index}, expected {}",
                self.keys_seen
            )));
        }
        let c = self.num_centroids();
        let mut report = InsertReport::default();
        for b in 0..self.layout.num_subspaces() {
            let slice = self.layout.slice(key, b);
            let set = &self.centroid_sets[b];
            for (j, centroid) in set.iter().enumerate() {
                let s = score_key(centroid, slice, self.normalize_keys);
                let outcome = self.tables[b * c + j].try_insert(key_index as u32, s);
                report.attempted += 1;
                report.applied += usize::from(outcome.applied());
                report.evicted += usize::from(matches!(outcome, InsertOutcome::Evicted(_)));
            }
            report.dot_ops += (c * slice.len()) as u64;
        }
        self.keys_seen += 1;
        Ok(report)
    }

    /// Checks the structural invariants: table count, fixed capacities,
    /// centroid shapes.
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.layout.num_subspaces();
        if self.centroid_sets.len() != m {
            return Err(Error::param("centroid set count differs from subspace count"));
        }
        let c = self.num_centroids();
        if self.tables.len() != m * c {
            return Err(Error::param(format!(
                "{} tables, expected m·C = {}",
                self.tables.len(),
                m * c
            )));
        }
        for (b, set) in self.centroid_sets.iter().enumerate() {
            if set.len() != c || set.width() != self.layout.width(b) {
                return Err(Error::param(format!("centroid set {b} has the wrong shape")));
            }
        }
        for (t, table) in self.tables.iter().enumerate() {
            if table.capacity() != self.list_capacity || table.len() > self.list_capacity {
                return Err(Error::param(format!(
                    "table {t} has capacity {} and length {}, expected capacity {}",
                    table.capacity(),
                    table.len(),
                    self.list_capacity
                )));
            }
        }
        Ok(())
    }

    /// Encodes the index in the binary table format.
    pub fn to_bytes(&self, bits: ScoreBits) -> Vec<u8> {
        format::serialize(self, bits)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::deserialize(bytes)
    }

    pub fn byte_breakdown(&self, bits: ScoreBits) -> ByteBreakdown {
        format::byte_breakdown(self, bits)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, bits: ScoreBits) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(bits)).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Clusters the prefill queries per subspace and builds every Top-L list over
/// the prefill keys.
pub fn build_index(
    prefill_queries: &[f32],
    kv: &KvStore,
    layout: &SubspaceLayout,
    cfg: &IndexConfig,
) -> Result<CsIndex> {
    build_index_with_report(prefill_queries, kv, layout, cfg).map(|(index, _)| index)
}

pub fn build_index_with_report(
    prefill_queries: &[f32],
    kv: &KvStore,
    layout: &SubspaceLayout,
    cfg: &IndexConfig,
) -> Result<(CsIndex, BuildReport)> {
    let d = layout.dim();
    layout.check_dim(kv.dim())?;
    if prefill_queries.is_empty() || !prefill_queries.len().is_multiple_of(d) {
        return Err(Error::param(format!(
            "prefill queries must be a non-empty set of rows of width {d}"
        )));
    }
    let prefill_len = kv.prefill_len();
    if prefill_len == 0 {
        return Err(Error::param("index build needs at least one prefill key"));
    }
    if cfg.cluster.centroids == 0 {
        return Err(Error::param("number of centroids must be at least 1"));
    }
    let capacity = cfg.list_capacity(prefill_len)?;

    let fits = (0..layout.num_subspaces())
        .into_par_iter()
        .map(|b| {
            let slices: Vec<f32> = prefill_queries
                .chunks_exact(d)
                .flat_map(|q| layout.slice(q, b).iter().copied())
                .collect();
            cosine_kmeans(&slices, layout.width(b), b, &cfg.cluster)
        })
        .collect::<Result<Vec<_>>>()?;

    let c = cfg.cluster.centroids as u64;
    let mut report = BuildReport {
        scoring_dot_ops: prefill_len as u64 * c * d as u64,
        ..Default::default()
    };
    let mut sets = Vec::with_capacity(fits.len());
    for (b, fit) in fits.into_iter().enumerate() {
        let unit_points = (fit.total - fit.degenerate) as u64;
        let width = layout.width(b) as u64;
        let batch = cfg.cluster.effective_batch(unit_points as usize) as u64;
        // seeding + one objective pass per round + assignments per round
        report.cluster_dot_ops += unit_points * c * width
            + fit.objective.len() as u64 * unit_points * c * width
            + cfg.cluster.iterations as u64 * batch * c * width;
        report.degenerate_queries.push(fit.degenerate);
        report.objective_traces.push(fit.objective);
        sets.push(fit.centroids);
    }

    let index = CsIndex::from_centroids(
        layout.clone(),
        sets,
        kv,
        prefill_len,
        capacity,
        prefill_len,
        cfg.normalize_keys,
    )?;
    Ok((index, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::CentroidSet;

    #[test]
    fn score_examples() {
        let keys = [[2.0f32, 1.0], [0.0, 3.0], [-1.0, 4.0]];
        let s = score_keys(&[1.0, 0.0], keys.iter().map(|k| &k[..]), false);
        assert_eq!(s, vec![2.0, 0.0, -1.0]);
        let zeros = [[0.0f32, 0.0]; 3];
        let s = score_keys(&[0.6, -0.8], zeros.iter().map(|k| &k[..]), false);
        assert!(s.iter().all(|&x| x == 0.0 && x.is_sign_positive()));
        let s = score_keys(&[1.0, 0.0], keys.iter().map(|k| &k[..]), true);
        assert!((s[0] - 2.0 / 5f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn degenerate_configuration_holds_full_sorted_list() {
        let d = 4;
        let keys: Vec<f32> = (0..10).flat_map(|i| [i as f32 - 4.5, 1.0, 0.5, -0.25]).collect();
        let kv = KvStore::from_prefill(d, keys, vec![0.0; 40]).unwrap();
        let queries = vec![1.0, 0.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0];
        let layout = SubspaceLayout::uniform(d, 1).unwrap();
        let cfg = IndexConfig {
            alpha: 1.0,
            cluster: ClusterConfig {
                centroids: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let index = build_index(&queries, &kv, &layout, &cfg).unwrap();
        assert_eq!(index.table_count(), 1);
        let t = index.table(0, 0);
        assert_eq!(t.len(), 10);
        assert!(t.scores().windows(2).all(|w| w[0] >= w[1]));
        let c = index.centroids(0).centroid(0);
        for (i, s) in t.iter() {
            assert_eq!(s, score_key(c, kv.key(i as usize), false));
        }
    }

    #[test]
    fn capacity_from_alpha() {
        let cfg = IndexConfig::default();
        assert_eq!(cfg.list_capacity(1000).unwrap(), 200);
        let bad = IndexConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.list_capacity(10).is_err());
        let fixed = IndexConfig {
            list_len: Some(7),
            ..Default::default()
        };
        assert_eq!(fixed.list_capacity(1000).unwrap(), 7);
    }

    #[test]
    fn streamed_key_must_be_next_position() {
        let kv = KvStore::from_prefill(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 4]).unwrap();
        let layout = SubspaceLayout::uniform(2, 1).unwrap();
        let set = CentroidSet::from_rows(0, 2, vec![1.0, 0.0], 1e-6).unwrap();
        let mut index = CsIndex::from_centroids(layout, vec![set], &kv, 2, 1, 2, false).unwrap();
        assert!(index.insert_key(&[1.0, 1.0], 3).is_err());
        let r = index.insert_key(&[2.0, 1.0], 2).unwrap();
        assert_eq!((r.attempted, r.applied, r.evicted), (1, 1, 1));
        assert_eq!(index.table(0, 0).indices(), &[2]);
        assert_eq!(index.keys_seen(), 3);
    }
}
