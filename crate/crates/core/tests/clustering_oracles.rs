mod common;

use common::{gaussian, oracle_dot, rng};
use csattn::clustering::{assign_nearest, cosine_kmeans, kmeanspp_seed, ClusterConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn circle(theta: f64) -> [f32; 2] {
    [theta.cos() as f32, theta.sin() as f32]
}

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// 50 points within ±10° of angle 0 and 50 within ±10° of angle π.
fn antipodal_caps() -> Vec<[f32; 2]> {
    let mut r = rng(99);
    let half = 10f64.to_radians();
    (0..100)
        .map(|i| {
            let center = if i < 50 { 0.0 } else { std::f64::consts::PI };
            circle(center + r.random_range(-half..half))
        })
        .collect()
}

#[test]
fn kmeanspp_seeds_one_centroid_per_cap() {
    let pts = antipodal_caps();
    let flat: Vec<f32> = pts.concat();

    // Exact probability that the second seed lands in the other cap: the
    // first is uniform, the second is drawn proportional to squared distance.
    let exact: f64 = (0..100)
        .map(|i| {
            let total: f64 = (0..100).map(|j| sq(&pts[i], &pts[j])).sum();
            let other: f64 = (0..100)
                .filter(|&j| (j < 50) != (i < 50))
                .map(|j| sq(&pts[i], &pts[j]))
                .sum();
            other / total
        })
        .sum::<f64>()
        / 100.0;

    let trials = 1000;
    let mut hits = 0;
    for seed in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = kmeanspp_seed(&flat, 2, 2, 0, &mut r).unwrap();
        let side = |c: &[f32]| c[0] > 0.0;
        if side(s.centroids.centroid(0)) != side(s.centroids.centroid(1)) {
            hits += 1;
        }
    }
    let freq = hits as f64 / trials as f64;
    let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
    assert!(exact >= 0.99, "exact split probability {exact}");
    assert!(freq >= 0.99, "observed {freq}");
    assert!(
        (freq - exact).abs() <= 4.0 * sigma + 1e-3,
        "observed {freq} vs exact {exact}"
    );
}

/// Plain Lloyd on the sphere, written independently of the library.
fn lloyd_oracle(unit: &[[f32; 3]], mut cents: Vec<[f64; 3]>, rounds: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let assign = |cents: &[[f64; 3]], p: &[f32; 3]| -> usize {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (j, c) in cents.iter().enumerate() {
            let s: f64 = (0..3).map(|t| c[t] * p[t] as f64).sum();
            if s > best_s {
                best_s = s;
                best = j;
            }
        }
        best
    };
    for _ in 0..rounds {
        let mut sums = vec![[0.0f64; 3]; cents.len()];
        for p in unit {
            let j = assign(&cents, p);
            for t in 0..3 {
                sums[j][t] += p[t] as f64;
            }
        }
        for (c, s) in cents.iter_mut().zip(&sums) {
            let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
            if n > 0.0 {
                *c = [s[0] / n, s[1] / n, s[2] / n];
            }
        }
    }
    let labels = unit.iter().map(|p| assign(&cents, p)).collect();
    (cents, labels)
}

#[test]
fn separated_clusters_match_lloyd_oracle_and_planted_partition() {
    let mut r = rng(5);
    let noisy = |r: &mut ChaCha8Rng, axis: [f32; 3]| -> [f32; 3] {
        let v = [
            axis[0] + r.random_range(-0.2..0.2),
            axis[1] + r.random_range(-0.2..0.2),
            axis[2] + r.random_range(-0.2..0.2),
        ];
        let n = oracle_dot(&v, &v).sqrt() as f32;
        [v[0] / n, v[1] / n, v[2] / n]
    };
    // two clusters around orthogonal-plus axes: angular gap well above 90°
    let mut pts = vec![];
    for _ in 0..20 {
        pts.push(noisy(&mut r, [1.0, 0.2, 0.0]));
    }
    for _ in 0..20 {
        pts.push(noisy(&mut r, [-0.6, 1.0, 0.0]));
    }
    let planted: Vec<usize> = (0..40).map(|i| i / 20).collect();
    let flat: Vec<f32> = pts.concat();

    for seed in 0..20 {
        let cfg = ClusterConfig {
            centroids: 2,
            iterations: 10,
            seed,
            ..Default::default()
        };
        let fit = cosine_kmeans(&flat, 3, 0, &cfg).unwrap();
        assert!(fit.full_batch);

        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(0);
        let seeded = kmeanspp_seed(&flat, 3, 2, 0, &mut r).unwrap().centroids;
        let init: Vec<[f64; 3]> = seeded.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
        let (cents, labels) = lloyd_oracle(&pts, init, 10);

        for (j, c) in cents.iter().enumerate() {
            for (got, want) in fit.centroids.centroid(j).iter().zip(c) {
                assert!((*got as f64 - want).abs() < 1e-5, "seed {seed}");
            }
        }
        let got: Vec<usize> = pts.iter().map(|p| assign_nearest(p, &fit.centroids)).collect();
        assert_eq!(got, labels);
        // same partition up to label swap
        let same = got == planted;
        let swapped = got.iter().zip(&planted).all(|(a, b)| a != b);
        assert!(same || swapped, "seed {seed}: {got:?}");
    }
}

#[test]
fn full_batch_objective_never_increases() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let pts = gaussian(&mut r, 300 * 6);
        let cfg = ClusterConfig {
            centroids: 8,
            iterations: 15,
            seed,
            ..Default::default()
        };
        let fit = cosine_kmeans(&pts, 6, 0, &cfg).unwrap();
        assert!(fit.full_batch);
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-7, "seed {seed}: {:?}", fit.objective);
        }
    }
}

#[test]
fn minibatch_does_not_diverge() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let pts = gaussian(&mut r, 2000 * 4);
        let cfg = ClusterConfig {
            centroids: 16,
            iterations: 10,
            batch_size: Some(256),
            seed,
            ..Default::default()
        };
        let fit = cosine_kmeans(&pts, 4, 0, &cfg).unwrap();
        assert!(!fit.full_batch);
        let (first, last) = (fit.objective[0], *fit.objective.last().unwrap());
        assert!(last <= first + 1e-3, "{first} -> {last}");
    }
}

#[test]
fn fits_are_deterministic_and_unit_norm() {
    let mut r = rng(8);
    let pts = gaussian(&mut r, 500 * 5);
    for batch in [None, Some(64)] {
        let cfg = ClusterConfig {
            centroids: 12,
            iterations: 6,
            batch_size: batch,
            seed: 3,
            ..Default::default()
        };
        let a = cosine_kmeans(&pts, 5, 2, &cfg).unwrap();
        let b = cosine_kmeans(&pts, 5, 2, &cfg).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.objective, b.objective);
        for c in a.centroids.iter() {
            assert!((oracle_dot(c, c).sqrt() - 1.0).abs() < 1e-5);
        }
        let other = cosine_kmeans(&pts, 5, 2, &ClusterConfig { seed: 4, ..cfg.clone() }).unwrap();
        assert_ne!(a.centroids, other.centroids);
    }
}

#[test]
fn too_few_distinct_points_still_reach_zero_objective() {
    // 3 distinct directions, 5 centroids: seeding has to duplicate
    let pts = [[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0]].repeat(4).concat();
    let cfg = ClusterConfig {
        centroids: 5,
        iterations: 3,
        ..Default::default()
    };
    let fit = cosine_kmeans(&pts, 2, 0, &cfg).unwrap();
    assert_eq!(fit.centroids.len(), 5);
    assert_eq!(*fit.objective.last().unwrap(), 0.0);
}
