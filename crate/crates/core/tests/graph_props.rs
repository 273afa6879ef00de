use std::collections::{BTreeMap, BTreeSet};

use cgfl_core::graph::{
    apply_label_rate, propagation_matrix, sample_episode, synth_sbm, ClassSplit, Graph,
    LabeledPool, SbmConfig,
};
use cgfl_core::rng::seeded;
use cgfl_core::Tensor;
use proptest::prelude::*;

fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..12).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..30)))
}

fn loop_free_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    random_graph().prop_map(|(n, e)| (n, e.into_iter().filter(|(u, v)| u != v).collect()))
}

proptest! {
    #[test]
    fn stored_edges_are_canonical((n, raw) in random_graph()) {
        let built = Graph::new(n, raw.clone(), Tensor::zeros(n, 2));
        if raw.iter().any(|(u, v)| u == v) {
            prop_assert!(built.is_err());
            return Ok(());
        }
        let g = built.unwrap();
        let unique: BTreeSet<(usize, usize)> = raw
            .iter()
            .map(|&(u, v)| (u.min(v), u.max(v)))
            .collect();
        prop_assert_eq!(g.num_edges(), unique.len());
        for &(u, v) in g.edges() {
            prop_assert!(u != v && u < n && v < n);
            prop_assert!(unique.contains(&(u.min(v), u.max(v))));
        }
    }

    #[test]
    fn propagation_is_symmetric_with_bounded_row_sums((n, raw) in loop_free_graph()) {
        let g = Graph::new(n, raw, Tensor::zeros(n, 1)).unwrap();
        let a = propagation_matrix(&g);
        prop_assert!(a.max_abs_diff(&a.transpose()) < 1e-15);
        for r in 0..n {
            let s: f64 = a.row(r).iter().sum();
            prop_assert!(s > 0.0 && s <= n as f64 + 1e-12);
        }
    }

    #[test]
    fn episodes_partition_their_classes(
        counts in prop::collection::vec(4usize..9, 2..6),
        n_way in 2usize..4,
        k in 1usize..3,
        q in 1usize..3,
        seed: u64,
    ) {
        prop_assume!(n_way <= counts.len());
        let mut pairs = Vec::new();
        let mut next = 0;
        for (class, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                pairs.push((next, class));
                next += 1;
            }
        }
        let pool = LabeledPool::from_pairs(pairs.iter().copied());
        let classes: BTreeSet<usize> = (0..counts.len()).collect();
        let ep = sample_episode(&pool, &classes, n_way, k, q, &mut seeded(seed, 0)).unwrap();
        prop_assert_eq!(ep.support.len(), n_way * k);
        prop_assert_eq!(ep.query.len(), n_way * q);
        prop_assert_eq!(ep.classes.iter().collect::<BTreeSet<_>>().len(), n_way);
        let support: BTreeSet<usize> = ep.support_instances().into_iter().collect();
        prop_assert_eq!(support.len(), n_way * k);
        prop_assert!(ep.query_instances().iter().all(|i| !support.contains(i)));
        let label_of: BTreeMap<usize, usize> = pairs.iter().copied().collect();
        for &(inst, local) in ep.support.iter().chain(&ep.query) {
            prop_assert!(local < n_way);
            prop_assert_eq!(label_of[&inst], ep.classes[local]);
        }
        for c in 0..n_way {
            prop_assert_eq!(ep.support.iter().filter(|p| p.1 == c).count(), k);
        }
    }

    #[test]
    fn class_split_rejects_overlap(base in prop::collection::btree_set(0usize..8, 1..5), novel in prop::collection::btree_set(0usize..8, 1..5)) {
        let ok = ClassSplit::new(base.clone(), novel.clone()).is_ok();
        prop_assert_eq!(ok, base.is_disjoint(&novel));
    }
}

#[test]
fn sbm_densities_match_probabilities() {
    let cfg = SbmConfig::default();
    let per = cfg.nodes_per_block;
    let (mut within, mut within_pairs, mut across, mut across_pairs) =
        (0usize, 0usize, 0usize, 0usize);
    for seed in 0..100 {
        let g = synth_sbm(&SbmConfig {
            seed,
            ..cfg.clone()
        })
        .unwrap();
        let n = g.num_nodes();
        for u in 0..n {
            for v in u + 1..n {
                let same = u / per == v / per;
                let e = g.has_edge(u, v) as usize;
                if same {
                    within += e;
                    within_pairs += 1;
                } else {
                    across += e;
                    across_pairs += 1;
                }
            }
        }
    }
    let p_in = within as f64 / within_pairs as f64;
    let p_out = across as f64 / across_pairs as f64;
    assert!((p_in - 0.9).abs() <= 0.05, "within-block density {p_in}");
    assert!((p_out - 0.05).abs() <= 0.01, "across-block density {p_out}");
}

#[test]
fn sbm_labels_follow_blocks() {
    let g = synth_sbm(&SbmConfig::default()).unwrap();
    let labels = g.node_labels().unwrap();
    assert!(labels.iter().enumerate().all(|(i, &l)| l == i / 25));
}

#[test]
fn class_pairs_are_uniform() {
    let pool = LabeledPool::from_pairs((0..50).map(|i| (i, i % 5)));
    let classes: BTreeSet<usize> = (0..5).collect();
    let mut rng = seeded(11, 0);
    let mut freq: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let trials = 10_000;
    for _ in 0..trials {
        let ep = sample_episode(&pool, &classes, 2, 1, 1, &mut rng).unwrap();
        let (a, b) = (ep.classes[0], ep.classes[1]);
        *freq.entry((a.min(b), a.max(b))).or_default() += 1;
    }
    assert_eq!(freq.len(), 10);
    let expected = trials as f64 / 10.0;
    for (pair, &count) in &freq {
        assert!(
            (count as f64 - expected).abs() <= 0.1 * expected,
            "pair {pair:?} drawn {count} times"
        );
    }
}

#[test]
fn label_rate_subsets_differ_but_keep_counts() {
    let pool = LabeledPool::from_pairs((0..60).map(|i| (i, i % 3)));
    let a = apply_label_rate(&pool, 0.3, &mut seeded(1, 0)).unwrap();
    let b = apply_label_rate(&pool, 0.3, &mut seeded(2, 0)).unwrap();
    assert_ne!(a, b);
    for c in 0..3 {
        assert_eq!(a.count(c), 6);
        assert_eq!(b.count(c), 6);
        assert!(a.instances(c).iter().all(|i| pool.instances(c).contains(i)));
    }
}
