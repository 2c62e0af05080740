mod common;

use common::{gaussian, instance, oracle_dot, rng, sorted_topk};
use csattn::clustering::ClusterConfig;
use csattn::harness::{check_report, mean, search_closed_form};
use csattn::retrieval::select_centroids;
use csattn::{
    CsIndex, DecodeStepReport, IndexConfig, RetrievalConfig, Session, SubspaceLayout, SyntheticSpec, Workload,
};

fn index_cfg(alpha: f64, centroids: usize, seed: u64) -> IndexConfig {
    IndexConfig {
        alpha,
        cluster: ClusterConfig {
            centroids,
            seed,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn session(w: &Workload, m: usize, icfg: &IndexConfig, cfg: RetrievalConfig) -> Session {
    let layout = SubspaceLayout::uniform(w.dim(), m).unwrap();
    Session::prefill(
        &w.prefill_queries,
        w.prefill_keys.clone(),
        w.prefill_values.clone(),
        &layout,
        icfg,
        cfg,
    )
    .unwrap()
}

fn decode(
    w: &Workload,
    m: usize,
    icfg: &IndexConfig,
    cfg: RetrievalConfig,
    steps: usize,
) -> (Session, Vec<DecodeStepReport>) {
    let mut s = session(w, m, icfg, cfg);
    let reports = s.run_decode(w.tokens(), steps, true).unwrap();
    (s, reports)
}

fn mean_recall(reports: &[DecodeStepReport]) -> f64 {
    let r: Vec<f64> = reports.iter().map(|r| r.recall_at_k.unwrap()).collect();
    mean(&r).unwrap()
}

fn mean_error(reports: &[DecodeStepReport]) -> f64 {
    let e: Vec<f64> = reports.iter().map(|r| r.output_error.unwrap()).collect();
    mean(&e).unwrap()
}

#[test]
fn nearest_centroid_is_exhaustive_argmax() {
    let inst = instance(2, 400, 32, 4, 64, 0.1);
    let mut r = rng(77);
    for _ in 0..50 {
        let q = gaussian(&mut r, 32);
        let sel = select_centroids(&q, &inst.index, 1, f64::NEG_INFINITY).unwrap();
        assert_eq!(sel.backed_off, 0);
        for b in 0..4 {
            let qb = inst.layout.slice(&q, b);
            let scores: Vec<f64> = inst.index.centroids(b).iter().map(|c| oracle_dot(c, qb)).collect();
            let want = sorted_topk(&scores, 1)[0];
            assert_eq!(sel.per_subspace[b].len(), 1);
            assert_eq!(sel.per_subspace[b][0].centroid, want);
        }
        assert_eq!(sel.dot_ops, 64 * 32);
    }
}

#[test]
fn forced_backoff_takes_tau_best_centroids() {
    let inst = instance(3, 200, 16, 4, 3, 0.2);
    let mut r = rng(5);
    let q = gaussian(&mut r, 16);
    for (tau, want) in [(1, 1), (2, 2), (3, 3), (7, 3)] {
        let sel = select_centroids(&q, &inst.index, tau, f64::INFINITY).unwrap();
        for b in 0..4 {
            let qb = inst.layout.slice(&q, b);
            let scores: Vec<f64> = inst.index.centroids(b).iter().map(|c| oracle_dot(c, qb)).collect();
            let got: Vec<usize> = sel.per_subspace[b].iter().map(|c| c.centroid).collect();
            assert_eq!(got, sorted_topk(&scores, want), "tau {tau}");
        }
        assert_eq!(sel.backed_off, if want > 1 { 4 } else { 0 });
    }
    // never triggers below the worst possible cosine
    let sel = select_centroids(&q, &inst.index, 3, -2.0).unwrap();
    assert!(sel.per_subspace.iter().all(|s| s.len() == 1));
}

/// Independent replay of one decode step: lists are rebuilt over all `n`
/// keys, nearest centroids picked exhaustively, scores summed, then the
/// newest `window` positions plus the best older candidates are kept.
fn replay_selection(index: &CsIndex, keys: &[Vec<f32>], q: &[f32], keep: usize, window: usize) -> Vec<usize> {
    let layout = index.layout();
    let n = keys.len();
    let cap = index.list_capacity();
    let mut score: Vec<Option<f64>> = vec![None; n];
    for b in 0..layout.num_subspaces() {
        let cents = index.centroids(b);
        let qb = layout.slice(q, b);
        let qs: Vec<f64> = cents.iter().map(|c| oracle_dot(c, qb)).collect();
        let j = sorted_topk(&qs, 1)[0];
        let ks: Vec<f64> = keys
            .iter()
            .map(|k| oracle_dot(cents.centroid(j), layout.slice(k, b)) as f32 as f64)
            .collect();
        for i in sorted_topk(&ks, cap) {
            *score[i].get_or_insert(0.0) += ks[i];
        }
    }
    let keep = keep.min(n);
    let window = window.min(n);
    if keep <= window {
        return (n - keep..n).collect();
    }
    let start = n - window;
    let mut older: Vec<(usize, f64)> = (0..start).filter_map(|i| score[i].map(|s| (i, s))).collect();
    older.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut sel: Vec<usize> = (start..n)
        .chain(older.iter().take(keep - window).map(|p| p.0))
        .collect();
    let mut pos = n;
    while sel.len() < keep {
        pos -= 1;
        if !sel.contains(&pos) {
            sel.push(pos);
        }
    }
    sel.sort_unstable();
    sel
}

fn replay_dense(q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>], mask: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = mask.iter().map(|&i| oracle_dot(q, &keys[i]) * scale).collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; q.len()];
    for (&i, wi) in mask.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(&values[i]) {
            *o += wi / z * *v as f64;
        }
    }
    out
}

#[test]
fn decode_matches_from_scratch_replay() {
    let (n0, d, m, steps) = (64, 16, 4, 32);
    let w = SyntheticSpec::new(n0, d, 4)
        .with_decode(steps)
        .with_seed(12)
        .generate()
        .unwrap();
    let icfg = index_cfg(0.25, 4, 1);
    let cfg = RetrievalConfig {
        keep_ratio: 0.25,
        recent_window: 4,
        ..Default::default()
    };
    let (s, reports) = decode(&w, m, &icfg, cfg, steps);
    let rows = |v: &[f32]| v.chunks_exact(d).map(|r| r.to_vec()).collect::<Vec<_>>();
    let mut keys = rows(&w.prefill_keys);
    let mut values = rows(&w.prefill_values);
    let (dq, dk, dv) = (rows(&w.decode_queries), rows(&w.decode_keys), rows(&w.decode_values));

    for (t, r) in reports.iter().enumerate() {
        let n = keys.len();
        assert_eq!(r.context_len, n);
        let keep = ((0.25 * n as f64).ceil() as usize).max(1);
        assert_eq!(r.keep, keep);
        let want = replay_selection(s.index(), &keys, &dq[t], keep, 4);
        assert_eq!(r.selected, want, "step {t}");

        let logits: Vec<f64> = keys.iter().map(|k| oracle_dot(&dq[t], k)).collect();
        let truth = sorted_topk(&logits, keep);
        let hits = truth.iter().filter(|i| want.contains(i)).count();
        assert_eq!(r.recall_at_k.unwrap(), hits as f64 / keep as f64);

        let all: Vec<usize> = (0..n).collect();
        let sparse = replay_dense(&dq[t], &keys, &values, &want);
        let dense = replay_dense(&dq[t], &keys, &values, &all);
        let err = sparse
            .iter()
            .zip(&dense)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((r.output_error.unwrap() - err).abs() <= 1e-5, "step {t}");

        keys.push(dk[t].clone());
        values.push(dv[t].clone());
    }
}

#[test]
fn long_decode_keeps_every_invariant() {
    let w = SyntheticSpec::new(256, 32, 8)
        .with_decode(128)
        .with_seed(4)
        .generate()
        .unwrap();
    let cfg = RetrievalConfig {
        backoff_tau: 2,
        backoff_threshold: 0.5,
        ..Default::default()
    };
    let (s, reports) = decode(&w, 4, &index_cfg(0.2, 16, 0), cfg, 128);
    for r in &reports {
        assert!(check_report(r, &s, 2).is_empty(), "{:?}", check_report(r, &s, 2));
        assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
        assert!(*r.selected.last().unwrap() < r.context_len);
    }
    assert_eq!(s.context_len(), 256 + 128);
    s.index().check_invariants().unwrap();
}

#[test]
fn search_period_reuses_candidates() {
    let w = SyntheticSpec::new(128, 16, 4).with_decode(8).generate().unwrap();
    let cfg = RetrievalConfig {
        search_period: 4,
        ..Default::default()
    };
    let (_, reports) = decode(&w, 4, &index_cfg(0.2, 8, 0), cfg, 8);
    let searched: Vec<bool> = reports.iter().map(|r| r.searched).collect();
    assert_eq!(searched, [true, false, false, false, true, false, false, false]);
    for r in &reports {
        if !r.searched {
            assert_eq!(r.counters.search_ops(), 0);
            assert_eq!(r.counters.gathered_entries, 0);
        }
        assert_eq!(r.keep, ((0.05 * r.context_len as f64).ceil() as usize).max(1));
    }
}

#[test]
fn longer_lists_do_not_lower_recall() {
    let w = SyntheticSpec::new(2048, 32, 8)
        .with_decode(32)
        .with_seed(2)
        .generate()
        .unwrap();
    let recalls: Vec<f64> = [0.1, 0.2, 0.4]
        .iter()
        .map(|&alpha| {
            let per_seed: Vec<f64> = (0..3)
                .map(|seed| mean_recall(&decode(&w, 8, &index_cfg(alpha, 32, seed), RetrievalConfig::default(), 32).1))
                .collect();
            mean(&per_seed).unwrap()
        })
        .collect();
    assert!(recalls.windows(2).all(|p| p[1] >= p[0]), "{recalls:?}");
}

#[test]
fn full_keep_reproduces_dense_attention() {
    let w = SyntheticSpec::new(128, 16, 4).with_decode(16).generate().unwrap();
    let cfg = RetrievalConfig {
        keep_ratio: 1.0,
        ..Default::default()
    };
    let (_, reports) = decode(&w, 4, &index_cfg(0.2, 8, 0), cfg, 16);
    for r in &reports {
        assert_eq!(r.keep, r.context_len);
        assert_eq!(r.recall_at_k, Some(1.0));
        assert!(r.output_error.unwrap() <= 1e-6);
    }
}

#[test]
fn error_shrinks_as_more_keys_are_kept() {
    let w = SyntheticSpec::new(512, 32, 8)
        .with_decode(32)
        .with_seed(6)
        .generate()
        .unwrap();
    let icfg = index_cfg(0.2, 16, 0);
    let errors: Vec<f64> = [0.05, 0.25, 0.6, 1.0]
        .iter()
        .map(|&rho| {
            let cfg = RetrievalConfig {
                keep_ratio: rho,
                ..Default::default()
            };
            mean_error(&decode(&w, 4, &icfg, cfg, 32).1)
        })
        .collect();
    assert!(errors.windows(2).all(|p| p[1] < p[0]), "{errors:?}");
    assert!(errors[3] <= 1e-6);
}

#[test]
fn search_cost_does_not_grow_with_context() {
    let (n0, d, m, c) = (32, 16, 4, 8);
    let steps = 10 * n0;
    let w = SyntheticSpec::new(n0, d, 4).with_decode(steps).generate().unwrap();
    let icfg = index_cfg(0.25, c, 0);
    let (s, reports) = decode(&w, m, &icfg, RetrievalConfig::default(), steps);
    let l = s.index().list_capacity();
    let (dots, gathered) = search_closed_form(m, c, d, l, 1);
    let (first, last) = (&reports[0].counters, &reports[steps - 1].counters);
    for k in [first, last] {
        assert_eq!(k.centroid_dot_ops, dots);
        assert_eq!(k.gathered_entries, gathered);
        assert_eq!(k.lists_gathered, m as u64);
        assert_eq!(k.insert_dot_ops, (c * d) as u64);
        assert_eq!(k.inserts_attempted, (m * c) as u64);
    }
    assert_eq!(first.search_ops(), last.search_ops());
    assert_eq!(first.overhead_ops(), last.overhead_ops());
    assert!(last.attention_key_ops > first.attention_key_ops);
}

#[test]
fn grouped_heads_share_one_index() {
    let w = SyntheticSpec::new(128, 16, 4)
        .with_decode(8)
        .with_seed(8)
        .generate()
        .unwrap();
    let mut r = rng(3);
    let other = gaussian(&mut r, w.prefill_queries.len());
    let layout = SubspaceLayout::uniform(16, 4).unwrap();
    let icfg = index_cfg(0.2, 8, 0);
    let mut group = Session::prefill_group(
        &[&w.prefill_queries, &other],
        w.prefill_keys.clone(),
        w.prefill_values.clone(),
        &layout,
        &icfg,
        RetrievalConfig::default(),
    )
    .unwrap();
    assert_eq!(group.group_size(), 2);
    assert!(group
        .decode_step(
            &w.decode_queries[..16],
            &w.decode_keys[..16],
            &w.decode_values[..16],
            false
        )
        .is_err());

    let extra = gaussian(&mut r, 16);
    for (t, tok) in w.tokens().enumerate() {
        let reports = group
            .decode_group_step(&[tok.query, &extra], tok.key, tok.value, true)
            .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].counters.inserts_attempted, 32);
        assert_eq!(reports[1].counters.inserts_attempted, 0);
        for rep in &reports {
            assert_eq!(rep.context_len, 128 + t);
            assert_eq!(rep.selected.len(), rep.keep);
        }
    }
    assert_eq!(group.context_len(), 136);
    assert_eq!(group.index().keys_seen(), 136);
}
