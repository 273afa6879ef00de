use cgfl_core::encoder::{Affine, EncoderDims, EncoderParams, Layer};
use cgfl_core::graph::Graph;
use cgfl_core::infoprobe::{
    compare_reports, comparison_csv, gaussian_entropy, probe_layer, probe_model, ProbeConfig,
    SigmaField,
};
use cgfl_core::rng::seeded;
use cgfl_core::Tensor;
use proptest::prelude::*;

fn tiny_graph() -> Graph {
    Graph::new(
        4,
        [(0, 1), (1, 2), (2, 3)],
        Tensor::from_rows(&[
            [1.0, 0.5, -0.2],
            [0.3, 2.0, 0.1],
            [-1.0, 0.7, 0.9],
            [0.4, -0.3, 1.5],
        ]),
    )
    .unwrap()
}

fn identity_encoder(d: usize) -> EncoderParams {
    EncoderParams {
        conv1: Affine::identity(d, d),
        conv2: Affine::identity(d, d),
        fc: Affine::identity(d, d),
    }
}

proptest! {
    #[test]
    fn sigma_stays_positive_and_capped(rho in prop::collection::vec(-30.0..30.0f64, 1..8), cap in 0.5..20.0f64) {
        let n = rho.len();
        let field = SigmaField::from_rho(Tensor::new(n, 1, rho).unwrap(), cap).unwrap();
        for s in field.sigma() {
            prop_assert!(s > 0.0 && s <= cap);
        }
    }

    #[test]
    fn entropy_grows_with_any_sigma(
        sigma in prop::collection::vec(0.01..5.0f64, 1..6),
        pick in 0usize..6,
        bump in 1e-3..2.0f64,
        d in 1usize..20,
    ) {
        let i = pick % sigma.len();
        let mut larger = sigma.clone();
        larger[i] += bump;
        prop_assert!(gaussian_entropy(&larger, d) > gaussian_entropy(&sigma, d));
    }
}

#[test]
fn negligible_entropy_weight_shrinks_sigma() {
    let cfg = ProbeConfig {
        entropy_weight: 1e-8,
        steps: 200,
        ..Default::default()
    };
    let r = probe_layer(
        &identity_encoder(3),
        &tiny_graph(),
        Layer::Gnn2,
        &cfg,
        &mut seeded(1, 0),
    )
    .unwrap();
    assert!(
        r.sigma.iter().all(|&s| s <= cfg.sigma_init),
        "{:?}",
        r.sigma
    );
}

#[test]
fn comparison_orders_zero_above_identity() {
    let g = tiny_graph();
    let cfg = ProbeConfig::default();
    let zero = EncoderParams::zeros(&EncoderDims {
        d_in: 3,
        d_hidden: 3,
        d_out: 3,
        d_proj: 1,
    });
    let a = probe_model(&zero, &g, &cfg, &mut seeded(2, 0)).unwrap();
    let b = probe_model(&identity_encoder(3), &g, &cfg, &mut seeded(2, 0)).unwrap();
    let deltas = compare_reports(&a, &b).unwrap();
    assert_eq!(deltas.len(), 3);
    assert!(deltas.iter().all(|d| d.delta > 0.0));
    assert!(compare_reports(&a, &a)
        .unwrap()
        .iter()
        .all(|d| d.delta == 0.0));
    assert!(comparison_csv(&deltas).starts_with("layer,H_a,H_b,delta\n"));
}

#[test]
fn repeated_probes_agree() {
    let cfg = ProbeConfig {
        steps: 50,
        ..Default::default()
    };
    let enc = identity_encoder(3);
    let a = probe_model(&enc, &tiny_graph(), &cfg, &mut seeded(3, 0)).unwrap();
    let b = probe_model(&enc, &tiny_graph(), &cfg, &mut seeded(3, 0)).unwrap();
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert!((x.entropy - y.entropy).abs() <= 1e-9);
    }
}
