use cgfl_core::encoder::{
    encode_nodes, project, readout, EncoderDims, EncoderParams, HeadVars, OnlineHead, TargetHead,
};
use cgfl_core::graph::Graph;
use cgfl_core::rng::seeded;
use cgfl_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn dims(d_in: usize) -> EncoderDims {
    EncoderDims {
        d_in,
        d_hidden: 6,
        d_out: 4,
        d_proj: 3,
    }
}

fn graph_strategy() -> impl Strategy<Value = Graph> {
    (2usize..10).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..n), 0..25),
            prop::collection::vec(-2.0..2.0f64, n * 3),
        )
            .prop_map(|(n, e, f)| {
                let e: Vec<_> = e.into_iter().filter(|(u, v)| u != v).collect();
                Graph::new(n, e, Tensor::new(n, 3, f).unwrap()).unwrap()
            })
    })
}

fn relabel(g: &Graph, perm: &[usize]) -> Graph {
    // Node `i` of the original becomes node `perm[i]`.
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let features = g.features().select_rows(&inv);
    let edges = g.edges().iter().map(|&(u, v)| (perm[u], perm[v]));
    Graph::new(g.num_nodes(), edges, features).unwrap()
}

fn pooled(params: &EncoderParams, g: &Graph) -> Tensor {
    let mut t = Tape::new();
    let vars = params.attach(&mut t, false);
    let trace = encode_nodes(&mut t, &vars, g).unwrap();
    let r = readout(&mut t, trace.out).unwrap();
    t.value(r).clone()
}

proptest! {
    #[test]
    fn readout_ignores_node_order(g in graph_strategy(), seed: u64) {
        let params = EncoderParams::init(&dims(3), &mut seeded(seed, 0));
        let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
        perm.shuffle(&mut seeded(seed, 1));
        let a = pooled(&params, &g);
        let b = pooled(&params, &relabel(&g, &perm));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn node_outputs_follow_relabeling(g in graph_strategy(), seed: u64) {
        let params = EncoderParams::init(&dims(3), &mut seeded(seed, 0));
        let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
        perm.shuffle(&mut seeded(seed, 1));
        let a = params.embed(&g).unwrap();
        let b = params.embed(&relabel(&g, &perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..a.cols() {
                prop_assert!((a.get(i, c) - b.get(p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_map_to_projection_width(n in 1usize..8, seed: u64) {
        let d = dims(3);
        let mut rng = seeded(seed, 0);
        let online = OnlineHead::init(&d, true, &mut rng);
        let target = TargetHead::init(&d, &mut rng);
        let emb = Tensor::from_fn(n, d.d_out, |r, c| (r as f64 - c as f64) * 0.3);
        let mut t = Tape::new();
        let e = t.constant(emb);
        let on = HeadVars::Online(online.attach(&mut t, false));
        let tg = target.attach(&mut t, false);
        let zo = project(&mut t, &on, e).unwrap();
        let zt = project(&mut t, &tg, e).unwrap();
        prop_assert_eq!(t.value(zo).shape(), (n, d.d_proj));
        prop_assert_eq!(t.value(zt).shape(), (n, d.d_proj));
    }
}

/// Integer-valued rows sum exactly, so any order gives the same bits.
#[test]
fn readout_is_bit_exact_under_shuffles() {
    let n = 40;
    let rows: Vec<[f64; 3]> = (0..n)
        .map(|i| [i as f64, (i * i % 17) as f64 - 8.0, 3.0 * i as f64])
        .collect();
    let reference = {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&rows));
        let r = readout(&mut t, x).unwrap();
        t.value(r).clone()
    };
    let mut rng = seeded(4, 0);
    for _ in 0..100 {
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&shuffled));
        let r = readout(&mut t, x).unwrap();
        assert_eq!(t.value(r), &reference);
    }
}

#[test]
fn first_layer_gradient_matches_finite_differences() {
    let g = Graph::new(
        5,
        [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)],
        Tensor::from_fn(5, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin()),
    )
    .unwrap();
    let params = EncoderParams::init(&dims(3), &mut seeded(12, 0));
    let total = |p: &EncoderParams| p.embed(&g).unwrap().sum();

    let mut t = Tape::new();
    let vars = params.attach(&mut t, true);
    let trace = encode_nodes(&mut t, &vars, &g).unwrap();
    let s = t.sum(trace.out).unwrap();
    t.backward(s).unwrap();
    let grad = t.grad(vars.conv1.weight).unwrap().clone();

    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for j in 0..grad.len() {
        let mut up = params.clone();
        up.conv1.weight.data_mut()[j] += h;
        let mut down = params.clone();
        down.conv1.weight.data_mut()[j] -= h;
        let numeric = (total(&up) - total(&down)) / (2.0 * h);
        diff += (grad.data()[j] - numeric).powi(2);
        norm += grad.data()[j].abs().max(numeric.abs()).powi(2);
    }
    assert!(
        diff.sqrt() <= 1e-4 * norm.sqrt(),
        "relative error {}",
        diff.sqrt() / norm.sqrt()
    );
}
