use std::collections::BTreeSet;

use cgfl_core::augment::{augment, make_view_pair, shared_nodes, AugSet, AugmentConfig, MaskMode};
use cgfl_core::graph::Graph;
use cgfl_core::rng::seeded;
use cgfl_core::Tensor;
use proptest::prelude::*;

/// Ring plus chords on 200 nodes, all-ones features.
fn big_graph() -> Graph {
    let n = 200;
    let edges = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 7) % n)]);
    Graph::new(n, edges, Tensor::filled(n, 10, 1.0)).unwrap()
}

#[test]
fn empirical_rates_match_configuration() {
    let g = big_graph();
    let cfg = AugmentConfig::default();
    let mut rng = seeded(5, 0);
    let (mut dropped, mut nodes) = (0usize, 0usize);
    let (mut removed, mut eligible) = (0usize, 0usize);
    let (mut masked, mut cols) = (0usize, 0usize);
    for _ in 0..10_000 {
        let v = augment(&g, &cfg, &mut rng).unwrap();
        dropped += g.num_nodes() - v.graph.num_nodes();
        nodes += g.num_nodes();
        for &(a, b) in g.edges() {
            if let (Some(x), Some(y)) = (v.view_index(a), v.view_index(b)) {
                eligible += 1;
                removed += !v.graph.has_edge(x, y) as usize;
            }
        }
        let f = v.graph.features();
        masked += (0..f.cols()).filter(|&c| f.get(0, c) == 0.0).count();
        cols += f.cols();
    }
    let rate = |a: usize, b: usize| a as f64 / b as f64;
    assert!((rate(dropped, nodes) - 0.15).abs() <= 0.02);
    assert!((rate(removed, eligible) - 0.15).abs() <= 0.02);
    assert!((rate(masked, cols) - 0.20).abs() <= 0.02);
}

#[test]
fn entry_masking_rate() {
    let g = big_graph();
    let cfg = AugmentConfig {
        enabled: AugSet {
            node_drop: false,
            edge_remove: false,
            feature_mask: true,
        },
        mask_mode: MaskMode::Entry,
        ..Default::default()
    };
    let mut rng = seeded(6, 0);
    let (mut zeros, mut total) = (0usize, 0usize);
    for _ in 0..500 {
        let v = augment(&g, &cfg, &mut rng).unwrap();
        zeros += v
            .graph
            .features()
            .data()
            .iter()
            .filter(|&&x| x == 0.0)
            .count();
        total += v.graph.features().len();
    }
    assert!((zeros as f64 / total as f64 - 0.20).abs() <= 0.02);
}

#[test]
fn paired_views_almost_always_differ() {
    let g = big_graph();
    let cfg = AugmentConfig::default();
    let mut rng = seeded(8, 0);
    let trials = 1000;
    let differ = (0..trials)
        .filter(|_| {
            let (a, b) = make_view_pair(&g, &cfg, &mut rng).unwrap();
            a != b
        })
        .count();
    assert!(differ as f64 / trials as f64 > 0.99);
}

fn small_graph() -> impl Strategy<Value = Graph> {
    (1usize..15).prop_flat_map(|n| {
        let edges = prop::collection::vec((0..n, 0..n), 0..40);
        let feats = prop::collection::vec(-2.0..2.0f64, n * 3);
        (Just(n), edges, feats).prop_map(|(n, e, f)| {
            let e: Vec<_> = e.into_iter().filter(|(u, v)| u != v).collect();
            Graph::new(n, e, Tensor::new(n, 3, f).unwrap()).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn views_are_consistent(
        g in small_graph(),
        nd in 0.0..0.9f64,
        er in 0.0..=1.0f64,
        fm in 0.0..=1.0f64,
        seed: u64,
    ) {
        let cfg = AugmentConfig {
            node_drop_rate: nd,
            edge_remove_rate: er,
            feature_mask_rate: fm,
            ..Default::default()
        };
        let v = augment(&g, &cfg, &mut seeded(seed, 0)).unwrap();
        let kept: Vec<usize> = v.kept_nodes.iter().flatten().copied().collect();
        prop_assert_eq!(kept.len(), v.graph.num_nodes());
        prop_assert_eq!(kept.iter().collect::<BTreeSet<_>>().len(), kept.len());
        prop_assert!(v.graph.num_nodes() >= 1);
        for (view, &orig) in v.view_nodes.iter().enumerate() {
            prop_assert_eq!(v.view_index(orig), Some(view));
            for c in 0..3 {
                let x = v.graph.features().get(view, c);
                prop_assert!(x == 0.0 || x == g.features().get(orig, c));
            }
        }
        for &(a, b) in v.graph.edges() {
            prop_assert!(g.has_edge(v.view_nodes[a], v.view_nodes[b]));
        }
    }

    #[test]
    fn shared_nodes_resolve_through_both_maps(g in small_graph(), seed: u64) {
        let (a, b) = make_view_pair(&g, &AugmentConfig::default(), &mut seeded(seed, 0)).unwrap();
        let shared = shared_nodes(&a, &b);
        prop_assert!(!shared.is_empty());
        for (orig, ia, ib) in shared {
            prop_assert_eq!(a.view_nodes[ia], orig);
            prop_assert_eq!(b.view_nodes[ib], orig);
        }
    }
}
