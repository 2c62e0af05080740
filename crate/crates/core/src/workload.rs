//! Query/key/value streams for one head: a prefill block and a decode tail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::check_finite;

/// One decode step's inputs.
#[derive(Debug, Clone, Copy)]
pub struct DecodeToken<'a> {
    pub query: &'a [f32],
    pub key: &'a [f32],
    pub value: &'a [f32],
}

/// Flat row-major Q/K/V rows for the prefill and decode phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    d: usize,
    pub prefill_queries: Vec<f32>,
    pub prefill_keys: Vec<f32>,
    pub prefill_values: Vec<f32>,
    pub decode_queries: Vec<f32>,
    pub decode_keys: Vec<f32>,
    pub decode_values: Vec<f32>,
}

impl Workload {
    pub fn new(d: usize, prefill: [Vec<f32>; 3], decode: [Vec<f32>; 3]) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("head dimension must be positive"));
        }
        for (phase, rows) in [("prefill", &prefill), ("decode", &decode)] {
            for r in rows.iter() {
                if r.len() % d != 0 {
                    return Err(Error::Dimension {
                        expected: d,
                        actual: r.len() % d,
                    });
                }
                check_finite(r)?;
            }
            if rows[0].len() != rows[1].len() || rows[1].len() != rows[2].len() {
                return Err(Error::param(format!(
                    "{phase} query/key/value counts differ: {}/{}/{}",
                    rows[0].len() / d,
                    rows[1].len() / d,
                    rows[2].len() / d
                )));
            }
        }
        let [prefill_queries, prefill_keys, prefill_values] = prefill;
        let [decode_queries, decode_keys, decode_values] = decode;
        Ok(Self {
            d,
            prefill_queries,
            prefill_keys,
            prefill_values,
            decode_queries,
            decode_keys,
            decode_values,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_keys.len() / self.d
    }

    pub fn decode_len(&self) -> usize {
        self.decode_keys.len() / self.d
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = DecodeToken<'_>> {
        let d = self.d;
        self.decode_queries
            .chunks_exact(d)
            .zip(self.decode_keys.chunks_exact(d))
            .zip(self.decode_values.chunks_exact(d))
            .map(|((query, key), value)| DecodeToken { query, key, value })
    }
}

/// Parameters of the planted-cluster generator.
///
/// Queries follow a topic (one of `clusters` random unit directions) that
/// changes every `segment_len` tokens. A `plant_fraction` share of keys is
/// aligned with a random topic at `plant_strength`; the rest is isotropic
/// noise of unit expected norm. Values are standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub prefill_len: usize,
    pub decode_len: usize,
    pub d: usize,
    pub clusters: usize,
    pub seed: u64,
    pub segment_len: usize,
    pub plant_fraction: f64,
    pub plant_strength: f64,
    pub query_noise: f64,
}

impl SyntheticSpec {
    pub fn new(prefill_len: usize, d: usize, clusters: usize) -> Self {
        Self {
            prefill_len,
            decode_len: 0,
            d,
            clusters,
            seed: 0,
            segment_len: 32,
            plant_fraction: 0.5,
            plant_strength: 2.0,
            query_noise: 0.3,
        }
    }

    pub fn with_decode(mut self, decode_len: usize) -> Self {
        self.decode_len = decode_len;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn generate(&self) -> Result<Workload> {
        if self.d == 0 || self.clusters == 0 || self.prefill_len == 0 || self.segment_len == 0 {
            return Err(Error::param(
                "synthetic workload needs positive length, dimension, clusters and segment length",
            ));
        }
        if !(0.0..=1.0).contains(&self.plant_fraction) {
            return Err(Error::param("plant fraction must lie in [0, 1]"));
        }
        let d = self.d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let topics: Vec<Vec<f32>> = (0..self.clusters).map(|_| unit_gaussian(&mut rng, d)).collect();
        let noise_scale = 1.0 / (d as f64).sqrt();

        let mut gen = Generator {
            spec: self,
            topics: &topics,
            noise_scale,
            topic: 0,
            pos: 0,
        };
        let prefill = gen.block(&mut rng, self.prefill_len);
        let decode = gen.block(&mut rng, self.decode_len);
        Workload::new(d, prefill, decode)
    }
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    topics: &'a [Vec<f32>],
    noise_scale: f64,
    topic: usize,
    pos: usize,
}

impl Generator<'_> {
    fn block(&mut self, rng: &mut ChaCha8Rng, n: usize) -> [Vec<f32>; 3] {
        let d = self.spec.d;
        let mut q = Vec::with_capacity(n * d);
        let mut k = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for _ in 0..n {
            if self.pos.is_multiple_of(self.spec.segment_len) {
                self.topic = rng.random_range(0..self.topics.len());
            }
            self.pos += 1;

            let dir = &self.topics[self.topic];
            for &u in dir.iter() {
                let e: f64 = rng.sample(StandardNormal);
                q.push((u as f64 + self.spec.query_noise * self.noise_scale * e) as f32);
            }

            let planted = rng.random_bool(self.spec.plant_fraction);
            let target = rng.random_range(0..self.topics.len());
            for i in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let base = if planted {
                    self.spec.plant_strength * self.topics[target][i] as f64
                } else {
                    0.0
                };
                k.push((base + self.noise_scale * e) as f32);
            }

            for _ in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                v.push(e as f32);
            }
        }
        [q, k, v]
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}
