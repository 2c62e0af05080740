//! Prefill → decode lifecycle for one KV head (optionally shared by a group
//! of query heads).

use crate::clustering::pool_queries;
use crate::dense::{dense_attention, dense_topk, AttentionOutput};
use crate::error::{Error, Result};
use crate::harness::{h2d_bytes_kept, l2_distance, recall_at_k, CostCounters};
use crate::index::{build_index, CsIndex, IndexConfig, InsertReport};
use crate::retrieval::{decode_search, streaming_insert, RetrievalConfig, SearchState};
use crate::types::{KvStore, SubspaceLayout};
use crate::workload::DecodeToken;

/// Bytes per KV element assumed by the transfer model (16-bit cache).
pub const KV_BYTES_PER_ELEM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStepReport {
    /// Decode step `t` (0-based) at which the query ran.
    pub step: usize,
    /// Context length the query attended over (`𝒫 + t`).
    pub context_len: usize,
    pub keep: usize,
    /// Kept key positions, ascending.
    pub selected: Vec<usize>,
    pub searched: bool,
    pub bumped: bool,
    pub attention: AttentionOutput,
    pub dense_reference: Option<AttentionOutput>,
    pub dense_topk: Option<Vec<usize>>,
    pub recall_at_k: Option<f64>,
    /// `‖o_sparse − o_dense‖₂`.
    pub output_error: Option<f64>,
    pub counters: CostCounters,
}

#[derive(Debug, Clone)]
pub struct Session {
    kv: KvStore,
    index: CsIndex,
    cfg: RetrievalConfig,
    step: usize,
    heads: Vec<SearchState>,
}

impl Session {
    /// Dense prefill plus index build over `𝒫` query/key/value rows.
    pub fn prefill(
        queries: &[f32],
        keys: Vec<f32>,
        values: Vec<f32>,
        layout: &SubspaceLayout,
        index_cfg: &IndexConfig,
        cfg: RetrievalConfig,
    ) -> Result<Self> {
        Self::prefill_group(&[queries], keys, values, layout, index_cfg, cfg)
    }

    /// As [`Session::prefill`] for a group of query heads sharing this KV
    /// head; the heads' prefill queries are pooled per
    /// `index_cfg.cluster.pooling`.
    pub fn prefill_group(
        query_heads: &[&[f32]],
        keys: Vec<f32>,
        values: Vec<f32>,
        layout: &SubspaceLayout,
        index_cfg: &IndexConfig,
        cfg: RetrievalConfig,
    ) -> Result<Self> {
        if query_heads.is_empty() {
            return Err(Error::param("a group needs at least one query head"));
        }
        let d = layout.dim();
        for q in query_heads {
            if q.len() != keys.len() {
                return Err(Error::param(format!(
                    "prefill has {} query rows but {} key rows",
                    q.len() / d,
                    keys.len() / d
                )));
            }
        }
        let kv = KvStore::from_prefill(d, keys, values)?;
        let pooled = pool_queries(query_heads, index_cfg.cluster.pooling)?;
        let index = build_index(&pooled, &kv, layout, index_cfg)?;
        let mut session = Self::from_index(kv, index, cfg)?;
        session.heads = vec![SearchState::new(); query_heads.len()];
        Ok(session)
    }

    /// Resumes from a stored index. `kv` must hold exactly the keys the index
    /// has seen.
    pub fn from_index(kv: KvStore, index: CsIndex, cfg: RetrievalConfig) -> Result<Self> {
        cfg.validate(index.num_subspaces())?;
        if kv.dim() != index.dim() {
            return Err(Error::Dimension {
                expected: index.dim(),
                actual: kv.dim(),
            });
        }
        if kv.prefill_len() != index.prefill_len() {
            return Err(Error::param(format!(
                "index was built over {} prefill keys, cache holds {}",
                index.prefill_len(),
                kv.prefill_len()
            )));
        }
        if kv.len() != index.keys_seen() {
            return Err(Error::param(format!(
                "index has seen {} keys, cache holds {}",
                index.keys_seen(),
                kv.len()
            )));
        }
        Ok(Self {
            step: kv.len() - kv.prefill_len(),
            kv,
            index,
            cfg,
            heads: vec![SearchState::new()],
        })
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn index(&self) -> &CsIndex {
        &self.index
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Current context length `𝒫 + t`.
    pub fn context_len(&self) -> usize {
        self.kv.len()
    }

    pub fn group_size(&self) -> usize {
        self.heads.len()
    }

    /// One decode step for a single-head session.
    pub fn decode_step(
        &mut self,
        q: &[f32],
        new_key: &[f32],
        new_value: &[f32],
        compare_dense: bool,
    ) -> Result<DecodeStepReport> {
        if self.heads.len() != 1 {
            return Err(Error::param(format!(
                "session serves {} query heads; use decode_group_step",
                self.heads.len()
            )));
        }
        Ok(self
            .decode_group_step(&[q], new_key, new_value, compare_dense)?
            .pop()
            .expect("one head"))
    }

    /// One decode step for every query head of the group: each head searches
    /// and attends over the current context, then the shared KV head appends
    /// the new key once. Insert counters are reported on head 0.
    pub fn decode_group_step(
        &mut self,
        queries: &[&[f32]],
        new_key: &[f32],
        new_value: &[f32],
        compare_dense: bool,
    ) -> Result<Vec<DecodeStepReport>> {
        if queries.len() != self.heads.len() {
            return Err(Error::param(format!(
                "expected {} query heads, got {}",
                self.heads.len(),
                queries.len()
            )));
        }
        let d = self.kv.dim();
        for row in queries.iter().chain([&new_key, &new_value]) {
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: row.len(),
                });
            }
        }
        let mut reports = Vec::with_capacity(queries.len());
        for (h, q) in queries.iter().enumerate() {
            reports.push(self.attend(h, q, compare_dense)?);
        }
        let position = self.kv.len();
        self.kv.push(new_key, new_value)?;
        let insert = streaming_insert(new_key, position, &mut self.index)?;
        add_insert(&mut reports[0].counters, &insert);
        self.step += 1;
        Ok(reports)
    }

    fn attend(&mut self, head: usize, q: &[f32], compare_dense: bool) -> Result<DecodeStepReport> {
        let n = self.kv.len();
        let outcome = decode_search(q, &self.index, n, &self.cfg, &mut self.heads[head])?;
        let attention = dense_attention(q, &self.kv, Some(&outcome.selected))?;

        let mut counters = outcome.counters;
        counters.attention_key_ops = (outcome.keep * self.kv.dim()) as u64;
        counters.h2d_bytes_model =
            h2d_bytes_kept(outcome.keep, self.kv.dim(), KV_BYTES_PER_ELEM, self.cfg.search_period);

        let (dense_reference, truth, recall, error) = if compare_dense {
            let dense = dense_attention(q, &self.kv, None)?;
            let truth = dense_topk(q, &self.kv, outcome.keep)?;
            let recall = recall_at_k(&outcome.selected, &truth)?;
            let error = l2_distance(&attention.output, &dense.output);
            (Some(dense), Some(truth), Some(recall), Some(error))
        } else {
            (None, None, None, None)
        };

        Ok(DecodeStepReport {
            step: self.step,
            context_len: n,
            keep: outcome.keep,
            selected: outcome.selected,
            searched: outcome.searched,
            bumped: outcome.bumped,
            attention,
            dense_reference,
            dense_topk: truth,
            recall_at_k: recall,
            output_error: error,
            counters,
        })
    }

    /// Applies `steps` decode steps drawn from `tokens`.
    pub fn run_decode<'a>(
        &mut self,
        tokens: impl IntoIterator<Item = DecodeToken<'a>>,
        steps: usize,
        compare_dense: bool,
    ) -> Result<Vec<DecodeStepReport>> {
        let mut tokens = tokens.into_iter();
        let mut reports = Vec::with_capacity(steps);
        for i in 0..steps {
            let token = tokens.next().ok_or(Error::StreamExhausted { step: i })?;
            reports.push(self.decode_step(token.query, token.key, token.value, compare_dense)?);
        }
        Ok(reports)
    }
}

fn add_insert(counters: &mut CostCounters, insert: &InsertReport) {
    counters.inserts_attempted += insert.attempted as u64;
    counters.inserts_applied += insert.applied as u64;
    counters.insert_dot_ops += insert.dot_ops;
}
