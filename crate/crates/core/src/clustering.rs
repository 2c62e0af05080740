//! Cosine (spherical) k-means over per-subspace query slices, seeded with
//! k-means++.
//!
//! Points are ℓ2-normalized before fitting and centroids are renormalized
//! after every update, so all centroids stay on the unit sphere. On the
//! sphere `‖x − c‖² = 2 − 2⟨x, c⟩`, which makes the nearest centroid the one
//! with the largest inner product.
//!
//! Two update modes share the same entry point:
//! - full batch (batch size ≥ number of points): Lloyd iterations, each
//!   centroid set to the normalized mean of its members. The objective is
//!   non-increasing.
//! - mini batch: each round samples a batch, and every sampled point pulls
//!   its centroid's running mean with learning rate `1/count`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{dot, l2_normalize};

pub const DEFAULT_MAX_BATCH: usize = 4096;

/// How prefill queries of a grouped-query attention group feed clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryPooling {
    /// All query heads sharing the KV head are pooled into one point set.
    #[default]
    Group,
    /// Only the given query head is clustered.
    QueryHead(usize),
}

/// Concatenates (or picks) per-head query rows according to `pooling`.
pub fn pool_queries(heads: &[&[f32]], pooling: QueryPooling) -> Result<Vec<f32>> {
    match pooling {
        QueryPooling::Group => Ok(heads.concat()),
        QueryPooling::QueryHead(h) => heads
            .get(h)
            .map(|rows| rows.to_vec())
            .ok_or_else(|| Error::param(format!("query head {h} not in group of {}", heads.len()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Centroids per subspace (C).
    pub centroids: usize,
    /// Assignment/update rounds (I).
    pub iterations: usize,
    /// Samples per round. `None` means `min(4096, n)`.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub pooling: QueryPooling,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            centroids: 64,
            iterations: 10,
            batch_size: None,
            seed: 0,
            pooling: QueryPooling::Group,
        }
    }
}

impl ClusterConfig {
    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(DEFAULT_MAX_BATCH).clamp(1, n.max(1))
    }
}

/// The C unit-norm centroids of one subspace, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    subspace: usize,
    width: usize,
    centroids: Vec<f32>,
}

impl CentroidSet {
    /// Wraps already-normalized centroid rows, checking width and unit norm
    /// within `norm_tol`.
    pub fn from_rows(subspace: usize, width: usize, centroids: Vec<f32>, norm_tol: f64) -> Result<Self> {
        if width == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(width) {
            return Err(Error::param(format!(
                "centroid buffer of {} floats does not hold whole rows of width {width}",
                centroids.len()
            )));
        }
        for (j, c) in centroids.chunks_exact(width).enumerate() {
            let norm = dot(c, c).sqrt();
            if (norm - 1.0).abs() > norm_tol {
                return Err(Error::param(format!(
                    "centroid {j} of subspace {subspace} has norm {norm}"
                )));
            }
        }
        Ok(Self {
            subspace,
            width,
            centroids,
        })
    }

    pub fn subspace(&self) -> usize {
        self.subspace
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.width..(j + 1) * self.width]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.centroids.chunks_exact(self.width)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.centroids
    }

    fn set(&mut self, j: usize, v: &[f32]) {
        self.centroids[j * self.width..(j + 1) * self.width].copy_from_slice(v);
    }
}

/// Index of the centroid with the largest cosine to `point`, ties to the
/// lower index. A zero point maps to centroid 0.
pub fn assign_nearest(point: &[f32], centroids: &CentroidSet) -> usize {
    let n = l2_normalize(point);
    if n.degenerate {
        return 0;
    }
    argmax_dot(&n.vector, centroids).0
}

fn argmax_dot(unit: &[f32], centroids: &CentroidSet) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(unit, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum()
}

/// Sum over unit points of the squared distance to the nearest centroid.
pub fn objective(unit_points: &[f32], centroids: &CentroidSet) -> f64 {
    unit_points
        .chunks_exact(centroids.width)
        .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// k-means++ seeding over unit `points` (row-major, `width` wide): the
/// first centroid uniformly, each next one with probability proportional to
/// the squared distance to the nearest centroid chosen so far. When every
/// remaining point coincides with a chosen centroid the rest are filled with
/// copies, flagged in [`Seeding::duplicates`].
pub fn kmeanspp_seed<R: Rng + ?Sized>(
    points: &[f32],
    width: usize,
    c: usize,
    subspace: usize,
    rng: &mut R,
) -> Result<Seeding> {
    if width == 0 || points.len() < width {
        return Err(Error::param("k-means++ needs at least one point"));
    }
    if c == 0 {
        return Err(Error::param("number of centroids must be at least 1"));
    }
    let n = points.len() / width;
    let row = |i: usize| &points[i * width..(i + 1) * width];

    let mut chosen: Vec<usize> = Vec::with_capacity(c);
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(chosen[0]))).collect();

    while chosen.len() < c {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in nearest.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total weight implies a positive entry");
        chosen.push(pick);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(row(i), row(pick)));
        }
    }

    let distinct = chosen.len();
    let mut centroids = Vec::with_capacity(c * width);
    let mut duplicate = Vec::with_capacity(c);
    for slot in 0..c {
        let src = chosen[slot % distinct];
        let v = l2_normalize(row(src));
        centroids.extend_from_slice(&v.vector);
        duplicate.push(slot >= distinct);
    }
    Ok(Seeding {
        centroids: CentroidSet {
            subspace,
            width,
            centroids,
        },
        duplicates: duplicate,
    })
}

#[derive(Debug, Clone)]
pub struct Seeding {
    pub centroids: CentroidSet,
    /// Centroids that copy an earlier one because there were too few
    /// distinct points to seed them.
    pub duplicates: Vec<bool>,
}

/// A fitted subspace clustering plus bookkeeping.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: CentroidSet,
    /// Seeded duplicates that were never re-seeded by empty-cluster repair.
    pub duplicates: Vec<bool>,
    /// Number of zero-norm input points excluded from fitting.
    pub degenerate: usize,
    pub total: usize,
    /// Objective after seeding, then after each round.
    pub objective: Vec<f64>,
    pub full_batch: bool,
}

/// Normalizes raw subspace rows, dropping zero rows. Returns the unit rows
/// and the number dropped.
pub fn normalize_rows(points: &[f32], width: usize) -> (Vec<f32>, usize) {
    let mut out = Vec::with_capacity(points.len());
    let mut degenerate = 0;
    for p in points.chunks_exact(width) {
        let n = l2_normalize(p);
        if n.degenerate {
            degenerate += 1;
        } else {
            out.extend_from_slice(&n.vector);
        }
    }
    (out, degenerate)
}

/// Fits `cfg.centroids` unit centroids to the raw subspace rows in `points`.
/// Randomness comes from `cfg.seed` on stream `subspace`, so subspaces can be
/// fit independently and in any order.
pub fn cosine_kmeans(points: &[f32], width: usize, subspace: usize, cfg: &ClusterConfig) -> Result<KMeansFit> {
    if width == 0 || points.is_empty() || !points.len().is_multiple_of(width) {
        return Err(Error::param("clustering input must be a non-empty set of whole rows"));
    }
    let total = points.len() / width;
    let (unit, degenerate) = normalize_rows(points, width);
    if unit.is_empty() {
        return Err(Error::AllDegenerate { subspace });
    }
    if degenerate * 2 > total {
        log::warn!("subspace {subspace}: {degenerate} of {total} query slices have zero norm and were skipped");
    }
    let n = unit.len() / width;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(subspace as u64);

    let Seeding {
        mut centroids,
        mut duplicates,
    } = kmeanspp_seed(&unit, width, cfg.centroids, subspace, &mut rng)?;
    let mut trace = vec![objective(&unit, &centroids)];
    let batch = cfg.effective_batch(n);
    let full_batch = batch >= n;

    if full_batch {
        for _ in 0..cfg.iterations {
            for j in lloyd_round(&unit, &mut centroids) {
                duplicates[j] = false;
            }
            trace.push(objective(&unit, &centroids));
        }
    } else {
        let c = centroids.len();
        let mut counts = vec![0u64; c];
        let mut running: Vec<f64> = centroids.as_flat().iter().map(|&x| x as f64).collect();
        for _ in 0..cfg.iterations {
            let sample = index::sample(&mut rng, n, batch).into_vec();
            for j in minibatch_round(&unit, &sample, &mut centroids, &mut counts, &mut running) {
                duplicates[j] = false;
            }
            trace.push(objective(&unit, &centroids));
        }
    }

    Ok(KMeansFit {
        centroids,
        duplicates,
        degenerate,
        total,
        objective: trace,
        full_batch,
    })
}

/// One full-batch round: assign every point, move each centroid to its
/// members' normalized mean, re-seed empty clusters at the worst-fit points.
fn lloyd_round(unit: &[f32], centroids: &mut CentroidSet) -> Vec<usize> {
    let width = centroids.width;
    let c = centroids.len();
    let mut sums = vec![0.0f64; c * width];
    let mut counts = vec![0usize; c];
    let mut misfit: Vec<(usize, f64)> = Vec::with_capacity(unit.len() / width);

    for (i, p) in unit.chunks_exact(width).enumerate() {
        let (j, _) = argmax_dot(p, centroids);
        counts[j] += 1;
        for (s, &x) in sums[j * width..(j + 1) * width].iter_mut().zip(p) {
            *s += x as f64;
        }
        misfit.push((i, sq_dist(p, centroids.centroid(j))));
    }

    for j in 0..c {
        if counts[j] == 0 {
            continue;
        }
        if let Some(v) = normalize_f64(&sums[j * width..(j + 1) * width]) {
            centroids.set(j, &v);
        }
    }
    repair_empty(unit, centroids, &counts, misfit)
}

fn minibatch_round(
    unit: &[f32],
    sample: &[usize],
    centroids: &mut CentroidSet,
    counts: &mut [u64],
    running: &mut [f64],
) -> Vec<usize> {
    let width = centroids.width;
    let c = centroids.len();
    let rows: Vec<&[f32]> = sample.iter().map(|&i| &unit[i * width..(i + 1) * width]).collect();
    let assigned: Vec<usize> = rows.iter().map(|p| argmax_dot(p, centroids).0).collect();

    let mut touched = vec![false; c];
    let mut misfit = Vec::with_capacity(sample.len());
    for ((p, &j), &i) in rows.iter().zip(&assigned).zip(sample) {
        misfit.push((i, sq_dist(p, centroids.centroid(j))));
        counts[j] += 1;
        touched[j] = true;
        let eta = 1.0 / counts[j] as f64;
        for (m, &x) in running[j * width..(j + 1) * width].iter_mut().zip(p.iter()) {
            *m = (1.0 - eta) * *m + eta * x as f64;
        }
    }
    for j in (0..c).filter(|&j| touched[j]) {
        if let Some(v) = normalize_f64(&running[j * width..(j + 1) * width]) {
            centroids.set(j, &v);
        }
    }

    let never: Vec<usize> = counts.iter().map(|&n| n as usize).collect();
    let repaired = repair_empty(unit, centroids, &never, misfit);
    for &j in &repaired {
        let cj: Vec<f64> = centroids.centroid(j).iter().map(|&x| x as f64).collect();
        running[j * width..(j + 1) * width].copy_from_slice(&cj);
    }
    repaired
}

/// Moves each centroid with zero count onto the point that currently fits
/// its centroid worst. Returns the repaired centroid ids.
fn repair_empty(
    unit: &[f32],
    centroids: &mut CentroidSet,
    counts: &[usize],
    mut misfit: Vec<(usize, f64)>,
) -> Vec<usize> {
    let empty: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return empty;
    }
    let width = centroids.width;
    // worst fit first, lower point index on ties
    misfit.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut repaired = Vec::new();
    for (&j, &(i, dist)) in empty.iter().zip(&misfit) {
        if dist <= 0.0 {
            break;
        }
        let p = unit[i * width..(i + 1) * width].to_vec();
        centroids.set(j, &p);
        repaired.push(j);
    }
    repaired
}

fn normalize_f64(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x / norm) as f32).collect())
}
