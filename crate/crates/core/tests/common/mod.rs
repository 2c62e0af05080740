#![allow(dead_code)]

use csattn::clustering::ClusterConfig;
use csattn::types::{KvStore, SubspaceLayout};
use csattn::{build_index, CsIndex, IndexConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn oracle_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

pub fn unit(v: &[f32]) -> Vec<f32> {
    let n = oracle_dot(v, v).sqrt();
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

/// Indices of the `k` largest scores, score descending then index ascending.
pub fn sorted_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Random layout of `d` into `m` positive widths.
pub fn random_layout(rng: &mut ChaCha8Rng, d: usize, m: usize) -> SubspaceLayout {
    let mut cuts: Vec<usize> = (1..d).collect();
    for i in (1..cuts.len()).rev() {
        let j = rng.random_range(0..=i);
        cuts.swap(i, j);
    }
    let mut cuts: Vec<usize> = cuts[..m - 1].to_vec();
    cuts.sort_unstable();
    let mut sizes = vec![];
    let mut prev = 0;
    for c in cuts.into_iter().chain([d]) {
        sizes.push(c - prev);
        prev = c;
    }
    SubspaceLayout::from_sizes(sizes).unwrap()
}

pub struct Instance {
    pub queries: Vec<f32>,
    pub kv: KvStore,
    pub layout: SubspaceLayout,
    pub index: CsIndex,
}

pub fn instance(seed: u64, n: usize, d: usize, m: usize, c: usize, alpha: f64) -> Instance {
    let mut r = rng(seed);
    let queries = gaussian(&mut r, n * d);
    let keys = gaussian(&mut r, n * d);
    let values = gaussian(&mut r, n * d);
    let kv = KvStore::from_prefill(d, keys, values).unwrap();
    let layout = SubspaceLayout::uniform(d, m).unwrap();
    let cfg = IndexConfig {
        alpha,
        cluster: ClusterConfig {
            centroids: c,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let index = build_index(&queries, &kv, &layout, &cfg).unwrap();
    Instance {
        queries,
        kv,
        layout,
        index,
    }
}
