//! Online decode retrieval: nearest centroids → gather lists → reduce by key
//! → recent window + Top-K, with optional centroid backoff and search reuse
//! across a search period.

use std::fmt;
use std::str::FromStr;

use crate::dense::rank_order;
use crate::error::{Error, Result};
use crate::harness::CostCounters;
use crate::index::{CsIndex, InsertReport, TopList};
use crate::types::{ceil_ratio, dot, l2_normalize};

/// A named keep-ratio / search-period pair such as `0.05-step-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub keep_ratio: f64,
    pub search_period: usize,
}

impl Schedule {
    pub const KEEP5_EVERY_STEP: Schedule = Schedule {
        keep_ratio: 0.05,
        search_period: 1,
    };
    pub const KEEP15_EVERY_4: Schedule = Schedule {
        keep_ratio: 0.15,
        search_period: 4,
    };
    pub const KEEP20_EVERY_8: Schedule = Schedule {
        keep_ratio: 0.20,
        search_period: 8,
    };

    pub const PRESETS: [(&'static str, Schedule); 3] = [
        ("0.05-step-1", Self::KEEP5_EVERY_STEP),
        ("0.15-step-4", Self::KEEP15_EVERY_4),
        ("0.20-step-8", Self::KEEP20_EVERY_8),
    ];
}

impl FromStr for Schedule {
    type Err = Error;

    /// Accepts `<keep ratio>-step-<period>`, e.g. `0.15-step-4`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param(format!("schedule {s:?} is not of the form <ratio>-step-<period>"));
        let (ratio, period) = s.split_once("-step-").ok_or_else(bad)?;
        let keep_ratio: f64 = ratio.parse().map_err(|_| bad())?;
        let search_period: usize = period.parse().map_err(|_| bad())?;
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) || search_period == 0 {
            return Err(bad());
        }
        Ok(Schedule {
            keep_ratio,
            search_period,
        })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}-step-{}", self.keep_ratio, self.search_period)
    }
}

/// Temporarily widens the window and keep budget when the query sits far
/// from every centroid. Disabled unless configured.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpPolicy {
    /// Trigger when the weakest subspace's best cosine falls below this.
    pub cosine_below: f64,
    pub extra_window: usize,
    pub extra_keep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    /// ρ: fraction of the current context attended each step.
    pub keep_ratio: f64,
    /// P: steps between index searches.
    pub search_period: usize,
    /// R: newest positions always considered.
    pub recent_window: usize,
    /// Per-subspace weights `w_b`; `None` means all ones.
    pub weights: Option<Vec<f64>>,
    /// τ: centroids taken per subspace when backoff triggers.
    pub backoff_tau: usize,
    /// Backoff triggers when the best cosine in a subspace is below this.
    pub backoff_threshold: f64,
    /// Keep the recent window unconditionally (true) or let it compete on
    /// accumulated score (false).
    pub recent_passthrough: bool,
    pub bump: Option<BumpPolicy>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            keep_ratio: 0.05,
            search_period: 1,
            recent_window: 32,
            weights: None,
            backoff_tau: 1,
            backoff_threshold: f64::NEG_INFINITY,
            recent_passthrough: true,
            bump: None,
        }
    }
}

impl RetrievalConfig {
    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.keep_ratio = schedule.keep_ratio;
        self.search_period = schedule.search_period;
        self
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            keep_ratio: self.keep_ratio,
            search_period: self.search_period,
        }
    }

    /// K = max(1, ⌈ρ·N⌉), capped at N.
    pub fn keep_count(&self, total_len: usize) -> usize {
        ceil_ratio(self.keep_ratio, total_len).min(total_len.max(1))
    }

    pub fn validate(&self, num_subspaces: usize) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::param(format!(
                "keep ratio must lie in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        if self.search_period == 0 {
            return Err(Error::param("search period must be at least 1"));
        }
        if self.backoff_tau == 0 {
            return Err(Error::param("backoff tau must be at least 1"));
        }
        if let Some(w) = &self.weights {
            if w.len() != num_subspaces {
                return Err(Error::param(format!(
                    "{} subspace weights for {num_subspaces} subspaces",
                    w.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::param("subspace weights must be finite"));
            }
        }
        Ok(())
    }

    pub fn subspace_weights(&self, num_subspaces: usize) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; num_subspaces])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidChoice {
    pub centroid: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSelection {
    /// Chosen centroids per subspace, best first.
    pub per_subspace: Vec<Vec<CentroidChoice>>,
    /// Subspaces where backoff took more than one centroid.
    pub backed_off: usize,
    /// Smallest best-cosine over subspaces.
    pub weakest_match: f64,
    /// Multiply-adds spent on query→centroid cosines.
    pub dot_ops: u64,
}

/// Picks the nearest centroid in every subspace, or the τ nearest where
/// the best cosine is below `threshold`. A zero query slice maps to
/// centroid 0.
pub fn select_centroids(q: &[f32], index: &CsIndex, tau: usize, threshold: f64) -> Result<CentroidSelection> {
    let layout = index.layout();
    layout.check_dim(q.len())?;
    let c = index.num_centroids();
    let mut per_subspace = Vec::with_capacity(layout.num_subspaces());
    let mut backed_off = 0;
    let mut weakest = f64::INFINITY;
    let mut dot_ops = 0;

    for b in 0..layout.num_subspaces() {
        let unit = l2_normalize(layout.slice(q, b));
        let set = index.centroids(b);
        dot_ops += (c * set.width()) as u64;
        if unit.degenerate {
            per_subspace.push(vec![CentroidChoice {
                centroid: 0,
                cosine: 0.0,
            }]);
            weakest = weakest.min(0.0);
            continue;
        }
        let cosines: Vec<(usize, f64)> = set.iter().map(|cj| dot(&unit.vector, cj)).enumerate().collect();
        let best = cosines
            .iter()
            .copied()
            .min_by(|&a, &b| rank_order(a, b))
            .expect("at least one centroid");
        weakest = weakest.min(best.1);
        let take = if best.1 < threshold { tau.min(c) } else { 1 };
        let chosen = if take <= 1 {
            vec![best]
        } else {
            backed_off += 1;
            let mut ranked = cosines;
            ranked.sort_by(|&a, &b| rank_order(a, b));
            ranked.truncate(take);
            ranked
        };
        per_subspace.push(
            chosen
                .into_iter()
                .map(|(centroid, cosine)| CentroidChoice { centroid, cosine })
                .collect(),
        );
    }
    Ok(CentroidSelection {
        per_subspace,
        backed_off,
        weakest_match: weakest,
        dot_ops,
    })
}

/// A borrowed list together with the subspace it came from.
#[derive(Debug, Clone, Copy)]
pub struct GatheredList<'a> {
    pub subspace: usize,
    pub centroid: usize,
    pub list: &'a TopList,
}

pub fn gather_lists<'a>(index: &'a CsIndex, selection: &CentroidSelection) -> Vec<GatheredList<'a>> {
    selection
        .per_subspace
        .iter()
        .enumerate()
        .flat_map(|(b, choices)| {
            choices.iter().map(move |ch| GatheredList {
                subspace: b,
                centroid: ch.centroid,
                list: index.table(b, ch.centroid),
            })
        })
        .collect()
}

/// Accumulated centroid scores per key, sorted by key index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    entries: Vec<(u32, f64)>,
    source_counts: Vec<u32>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (u32, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn get(&self, key: u32) -> Option<f64> {
        self.entries
            .binary_search_by_key(&key, |e| e.0)
            .ok()
            .map(|p| self.entries[p].1)
    }

    /// Number of subspaces that contributed to `key`.
    pub fn sources(&self, key: u32) -> u32 {
        self.entries
            .binary_search_by_key(&key, |e| e.0)
            .map(|p| self.source_counts[p])
            .unwrap_or(0)
    }
}

/// `score(i) = Σ_b w_b · s_b(i)` over the subspaces whose gathered lists
/// hold `i`. When backoff gathers several lists in one subspace, `s_b(i)` is
/// the equal-weight mean of the scores `i` has in those lists, so every
/// subspace contributes a single partial estimate. Realized as a stable sort
/// by (key, subspace) followed by a segmented reduction.
pub fn reduce_by_key(lists: &[GatheredList<'_>], weights: &[f64]) -> Result<CandidateSet> {
    let mut pairs: Vec<(u32, usize, f64)> = Vec::with_capacity(lists.iter().map(|l| l.list.len()).sum());
    for g in lists {
        if g.subspace >= weights.len() {
            return Err(Error::param(format!(
                "no weight for subspace {} ({} weights)",
                g.subspace,
                weights.len()
            )));
        }
        pairs.extend(g.list.iter().map(|(i, s)| (i, g.subspace, s as f64)));
    }
    pairs.sort_by_key(|p| (p.0, p.1));

    let mut entries: Vec<(u32, f64)> = Vec::new();
    let mut source_counts = Vec::new();
    let mut rest = pairs.as_slice();
    while let Some(&(i, b, _)) = rest.first() {
        let run = rest.iter().take_while(|p| p.0 == i && p.1 == b).count();
        let partial = rest[..run].iter().map(|p| p.2).sum::<f64>() / run as f64;
        let term = weights[b] * partial;
        match entries.last_mut() {
            Some(last) if last.0 == i => {
                last.1 += term;
                *source_counts.last_mut().unwrap() += 1;
            }
            _ => {
                entries.push((i, term));
                source_counts.push(1);
            }
        }
        rest = &rest[run..];
    }
    Ok(CandidateSet { entries, source_counts })
}

/// Chooses `keep` positions out of `0..total_len`.
///
/// With passthrough the newest `min(window, total_len)` positions are always
/// kept (only the newest `keep` of them if `keep` is smaller) and the
/// remaining slots go to the best-scoring older candidates. Without
/// passthrough the window positions join the candidates with their
/// accumulated score (0 if absent) and everything competes. Slots still open
/// after candidates run out are filled with the most recent unselected
/// positions, so the result always has exactly `keep` entries.
pub fn select_topk_with(
    candidates: &CandidateSet,
    total_len: usize,
    keep: usize,
    window: usize,
    passthrough: bool,
) -> Vec<usize> {
    let keep = keep.min(total_len);
    let window = window.min(total_len);
    let window_start = total_len - window;
    let in_range = candidates.iter().filter(|&(i, _)| (i as usize) < total_len);

    let mut selected: Vec<usize> = if passthrough {
        if keep <= window {
            return (total_len - keep..total_len).collect();
        }
        let mut sel: Vec<usize> = (window_start..total_len).collect();
        sel.extend(crate::dense::top_k_indices(
            in_range
                .filter(|&(i, _)| (i as usize) < window_start)
                .map(|(i, s)| (i as usize, s)),
            keep - window,
        ));
        sel
    } else {
        let mut pool: Vec<(usize, f64)> = in_range.map(|(i, s)| (i as usize, s)).collect();
        for i in window_start..total_len {
            if candidates.get(i as u32).is_none() {
                pool.push((i, 0.0));
            }
        }
        crate::dense::top_k_indices(pool, keep)
    };

    if selected.len() < keep {
        selected.sort_unstable();
        let mut fill = Vec::new();
        let mut pos = total_len;
        while selected.len() + fill.len() < keep && pos > 0 {
            pos -= 1;
            if selected.binary_search(&pos).is_err() {
                fill.push(pos);
            }
        }
        selected.extend(fill);
    }
    selected.sort_unstable();
    selected
}

/// `select_topk_with` using the keep ratio, window and passthrough mode of
/// `cfg` against the current context length.
pub fn select_topk(candidates: &CandidateSet, total_len: usize, cfg: &RetrievalConfig) -> Vec<usize> {
    select_topk_with(
        candidates,
        total_len,
        cfg.keep_count(total_len),
        cfg.recent_window,
        cfg.recent_passthrough,
    )
}

/// Decode-side search state for one head: step counter and the candidate
/// set reused between searches.
#[derive(Debug, Clone, Default)]
pub struct SearchState {
    step: usize,
    cached: Option<CandidateSet>,
    bumped: bool,
}

impl SearchState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn cached(&self) -> Option<&CandidateSet> {
        self.cached.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub selected: Vec<usize>,
    pub keep: usize,
    pub searched: bool,
    pub bumped: bool,
    pub counters: CostCounters,
}

/// Runs one decode-step search. Every `search_period`-th call (starting with
/// the first) searches the index; the calls in between reuse the cached
/// candidate scores. Window and K always follow the current `total_len`.
pub fn decode_search(
    q: &[f32],
    index: &CsIndex,
    total_len: usize,
    cfg: &RetrievalConfig,
    state: &mut SearchState,
) -> Result<SearchOutcome> {
    if total_len == 0 {
        return Err(Error::param("cannot select keys from an empty context"));
    }
    let mut counters = CostCounters::default();
    let search_now = state.step.is_multiple_of(cfg.search_period) || state.cached.is_none();
    if search_now {
        let selection = select_centroids(q, index, cfg.backoff_tau, cfg.backoff_threshold)?;
        let lists = gather_lists(index, &selection);
        let weights = cfg.subspace_weights(index.num_subspaces());
        let candidates = reduce_by_key(&lists, &weights)?;

        let gathered: usize = lists.iter().map(|g| g.list.len()).sum();
        counters.searches = 1;
        counters.centroid_dot_ops = selection.dot_ops;
        counters.lists_gathered = lists.len() as u64;
        counters.gathered_entries = gathered as u64;
        counters.reduce_ops = gathered as u64;
        counters.backoff_subspaces = selection.backed_off as u64;
        state.bumped = cfg
            .bump
            .as_ref()
            .is_some_and(|bump| selection.weakest_match < bump.cosine_below);
        state.cached = Some(candidates);
    }

    let (extra_window, extra_keep) = match (&cfg.bump, state.bumped) {
        (Some(bump), true) => (bump.extra_window, bump.extra_keep),
        _ => (0, 0),
    };
    let keep = (cfg.keep_count(total_len) + extra_keep).min(total_len);
    let candidates = state.cached.as_ref().expect("search populated the cache");
    let selected = select_topk_with(
        candidates,
        total_len,
        keep,
        cfg.recent_window + extra_window,
        cfg.recent_passthrough,
    );
    state.step += 1;
    Ok(SearchOutcome {
        selected,
        keep,
        searched: search_now,
        bumped: state.bumped,
        counters,
    })
}

/// Offers a freshly appended key to every `(subspace, centroid)` list.
pub fn streaming_insert(new_key: &[f32], key_index: usize, index: &mut CsIndex) -> Result<InsertReport> {
    index.insert_key(new_key, key_index)
}
