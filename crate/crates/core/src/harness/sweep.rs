use rayon::prelude::*;
use serde::Deserialize;

use super::{mean, percentile, table_bytes, CostCounters};
use crate::clustering::ClusterConfig;
use crate::error::{Error, Result};
use crate::index::IndexConfig;
use crate::retrieval::RetrievalConfig;
use crate::session::{DecodeStepReport, Session};
use crate::types::SubspaceLayout;
use crate::workload::Workload;

/// One point of a parameter grid.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepCell {
    pub m: usize,
    pub centroids: usize,
    pub alpha: f64,
    pub rho: f64,
    pub period: usize,
    pub tau: usize,
    pub window: usize,
    pub backoff_threshold: f64,
    pub iterations: usize,
}

impl Default for SweepCell {
    fn default() -> Self {
        Self {
            m: 8,
            centroids: 64,
            alpha: 0.2,
            rho: 0.05,
            period: 1,
            tau: 1,
            window: 32,
            backoff_threshold: f64::NEG_INFINITY,
            iterations: 10,
        }
    }
}

impl SweepCell {
    pub fn id(&self) -> String {
        format!(
            "m{}-C{}-a{}-r{}-P{}-t{}-R{}-b{}",
            self.m, self.centroids, self.alpha, self.rho, self.period, self.tau, self.window, self.backoff_threshold
        )
    }

    /// Why the cell cannot run on `workload` for `steps` decode steps.
    pub fn infeasible(&self, workload: &Workload, steps: usize) -> Option<String> {
        let d = workload.dim();
        if self.m == 0 || self.m > d {
            return Some(format!("m = {} must lie in 1..={d}", self.m));
        }
        if self.centroids == 0 {
            return Some("C must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Some(format!("alpha = {} must lie in (0, 1]", self.alpha));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Some(format!("rho = {} must lie in (0, 1] (K would be < 1)", self.rho));
        }
        if self.period == 0 {
            return Some("search period must be at least 1".into());
        }
        if self.tau == 0 || self.tau > self.centroids {
            return Some(format!("tau = {} must lie in 1..={}", self.tau, self.centroids));
        }
        if self.iterations == 0 {
            return Some("iterations must be at least 1".into());
        }
        if self.backoff_threshold.is_nan() {
            return Some("backoff threshold is NaN".into());
        }
        if steps > workload.decode_len() {
            return Some(format!(
                "{steps} steps requested, workload has {}",
                workload.decode_len()
            ));
        }
        None
    }

    pub fn index_config(&self, seed: u64) -> IndexConfig {
        IndexConfig {
            alpha: self.alpha,
            cluster: ClusterConfig {
                centroids: self.centroids,
                iterations: self.iterations,
                seed,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            keep_ratio: self.rho,
            search_period: self.period,
            recent_window: self.window,
            backoff_tau: self.tau,
            backoff_threshold: self.backoff_threshold,
            ..Default::default()
        }
    }
}

/// Per-field value lists whose cartesian product forms grid cells.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Axes {
    m: Vec<usize>,
    centroids: Vec<usize>,
    alpha: Vec<f64>,
    rho: Vec<f64>,
    period: Vec<usize>,
    tau: Vec<usize>,
    window: Vec<usize>,
    backoff_threshold: Vec<f64>,
    iterations: Vec<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridFile {
    steps: Option<usize>,
    seeds: Option<Vec<u64>>,
    base: Option<toml::Table>,
    axes: Option<Axes>,
    cell: Vec<toml::Table>,
}

/// A parsed grid file.
///
/// ```toml
/// steps = 64
/// seeds = [0, 1]
/// [base]            # overrides of the defaults for every cell
/// m = 8
/// [axes]            # cartesian product
/// alpha = [0.1, 0.2, 0.4]
/// [[cell]]          # explicit extra cells
/// rho = 0.15
/// period = 4
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
    pub steps: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let file: GridFile = toml::from_str(text).map_err(|e| Error::param(format!("grid file: {e}")))?;
        let base = file.base.unwrap_or_default();
        let base_cell = merge(&toml::Table::new(), &base)?;

        let mut cells = Vec::new();
        if let Some(axes) = &file.axes {
            cells.extend(expand(&base_cell, axes));
        }
        for extra in &file.cell {
            cells.push(merge(&base, extra)?);
        }
        Ok(Self {
            cells,
            steps: file.steps,
            seeds: file.seeds,
        })
    }
}

fn merge(base: &toml::Table, overrides: &toml::Table) -> Result<SweepCell> {
    let mut t = base.clone();
    for (k, v) in overrides {
        t.insert(k.clone(), v.clone());
    }
    toml::Value::Table(t)
        .try_into()
        .map_err(|e| Error::param(format!("grid cell: {e}")))
}

fn expand(base: &SweepCell, axes: &Axes) -> Vec<SweepCell> {
    fn axis<T: Copy>(values: &[T], fallback: T) -> Vec<T> {
        if values.is_empty() {
            vec![fallback]
        } else {
            values.to_vec()
        }
    }
    let mut cells = vec![base.clone()];
    macro_rules! product {
        ($field:ident) => {
            let values = axis(&axes.$field, base.$field);
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| SweepCell {
                        $field: v,
                        ..c.clone()
                    })
                })
                .collect();
        };
    }
    product!(m);
    product!(centroids);
    product!(alpha);
    product!(rho);
    product!(period);
    product!(tau);
    product!(window);
    product!(backoff_threshold);
    product!(iterations);
    cells
}

/// Aggregates of one grid cell over all seeds and steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub id: String,
    pub cell: SweepCell,
    pub seeds: usize,
    pub steps: usize,
    pub mean_recall: f64,
    pub mean_output_error: f64,
    /// Mean per-step overhead (search + insert ops), unnormalized.
    pub cost_mean: f64,
    /// Percentiles of per-step overhead, normalized so the mean is 1.0.
    pub cost_p50: f64,
    pub cost_p90: f64,
    pub cost_p99: f64,
    /// Modeled 16-bit index size.
    pub index_bytes: u64,
    pub totals: CostCounters,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedCell {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutput {
    pub results: Vec<SweepResult>,
    pub skipped: Vec<SkippedCell>,
    /// Property violations found in the step reports.
    pub violations: Vec<String>,
}

/// Runs every feasible cell for every seed, `jobs` cells at a time. Results
/// keep grid order regardless of scheduling.
pub fn sweep(
    cells: &[SweepCell],
    workload: &Workload,
    seeds: &[u64],
    steps: usize,
    jobs: usize,
) -> Result<SweepOutput> {
    if seeds.is_empty() {
        return Err(Error::param("sweep needs at least one seed"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::param(format!("worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<(SweepResult, Vec<String>), SkippedCell>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(cell, workload, seeds, steps))
            .collect()
    });

    let mut out = SweepOutput::default();
    for o in outcomes {
        match o {
            Ok((r, v)) => {
                out.violations
                    .extend(v.into_iter().map(|msg| format!("{}: {msg}", r.id)));
                out.results.push(r);
            }
            Err(skip) => {
                log::warn!("skipping cell {}: {}", skip.id, skip.reason);
                out.skipped.push(skip);
            }
        }
    }
    Ok(out)
}

fn run_cell(
    cell: &SweepCell,
    workload: &Workload,
    seeds: &[u64],
    steps: usize,
) -> std::result::Result<(SweepResult, Vec<String>), SkippedCell> {
    let id = cell.id();
    let skip = |reason: String| SkippedCell { id: id.clone(), reason };
    if let Some(reason) = cell.infeasible(workload, steps) {
        return Err(skip(reason));
    }
    let layout = SubspaceLayout::uniform(workload.dim(), cell.m).map_err(|e| skip(e.to_string()))?;

    let mut recalls = Vec::new();
    let mut errors = Vec::new();
    let mut costs = Vec::new();
    let mut totals = CostCounters::default();
    let mut violations = Vec::new();
    let mut list_len = 0;
    for &seed in seeds {
        let mut session = Session::prefill(
            &workload.prefill_queries,
            workload.prefill_keys.clone(),
            workload.prefill_values.clone(),
            &layout,
            &cell.index_config(seed),
            cell.retrieval_config(),
        )
        .map_err(|e| skip(e.to_string()))?;
        list_len = session.index().list_capacity();
        let reports = session
            .run_decode(workload.tokens(), steps, true)
            .map_err(|e| skip(e.to_string()))?;
        for r in &reports {
            violations.extend(check_report(r, &session, cell.tau));
            recalls.push(r.recall_at_k.unwrap_or(0.0));
            errors.push(r.output_error.unwrap_or(0.0));
            costs.push(r.counters.overhead_ops() as f64);
            totals += r.counters;
        }
    }

    let cost_mean = mean(&costs).unwrap_or(0.0);
    let norm = |p: f64| {
        let v = percentile(&costs, p).unwrap_or(0.0);
        if cost_mean > 0.0 {
            v / cost_mean
        } else {
            0.0
        }
    };
    let result = SweepResult {
        id: id.clone(),
        cell: cell.clone(),
        seeds: seeds.len(),
        steps,
        mean_recall: mean(&recalls).unwrap_or(0.0),
        mean_output_error: mean(&errors).unwrap_or(0.0),
        cost_mean,
        cost_p50: norm(0.5),
        cost_p90: norm(0.9),
        cost_p99: norm(0.99),
        index_bytes: table_bytes(cell.m, cell.centroids, list_len, workload.dim(), 2),
        totals,
    };
    Ok((result, violations))
}

/// Checks the per-step properties that must hold for every report.
pub fn check_report(r: &DecodeStepReport, session: &Session, tau: usize) -> Vec<String> {
    let index = session.index();
    let d = index.dim() as u64;
    let bound = (index.num_subspaces() * tau * index.list_capacity()) as u64;
    let mut v = Vec::new();
    if r.selected.len() != r.keep {
        v.push(format!(
            "step {}: |selected| = {} but K = {}",
            r.step,
            r.selected.len(),
            r.keep
        ));
    }
    if r.counters.gathered_entries > bound {
        v.push(format!(
            "step {}: gathered {} entries, bound m·τ·L = {bound}",
            r.step, r.counters.gathered_entries
        ));
    }
    if r.counters.attention_key_ops != r.keep as u64 * d {
        v.push(format!("step {}: attention ops differ from K·d", r.step));
    }
    if r.keep == r.context_len {
        if let Some(err) = r.output_error.filter(|&e| e > 1e-6) {
            v.push(format!("step {}: full keep but output error {err:e}", r.step));
        }
    }
    if let Some(rec) = r.recall_at_k {
        if !(0.0..=1.0).contains(&rec) {
            v.push(format!("step {}: recall {rec} outside [0, 1]", r.step));
        }
    }
    v
}
