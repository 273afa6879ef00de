use cgfl_core::augment::AugmentConfig;
use cgfl_core::encoder::{EncoderDims, EncoderParams, OnlineHead, ParamSet, TargetHead};
use cgfl_core::graph::{synth_sbm, SbmConfig};
use cgfl_core::pretrain::{
    contrastive_loss, ema_update, pretrain_step, ContrastiveState, Corpus, PretrainConfig,
};
use cgfl_core::rng::seeded;
use cgfl_core::{Tape, Tensor};
use proptest::prelude::*;

fn loss(z: &Tensor, h: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (a, b) = (t.constant(z.clone()), t.constant(h.clone()));
    let l = contrastive_loss(&mut t, a, b).unwrap();
    t.value(l).item()
}

fn nonzero_rows(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
        .prop_filter("rows must be nonzero", |rows| {
            rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3))
        })
        .prop_map(|rows| Tensor::from_rows(&rows))
}

fn dims() -> EncoderDims {
    EncoderDims {
        d_in: 3,
        d_hidden: 4,
        d_out: 3,
        d_proj: 2,
    }
}

proptest! {
    #[test]
    fn loss_ignores_positive_row_scales(
        z in nonzero_rows(5, 4),
        h in nonzero_rows(5, 4),
        scales in prop::collection::vec(0.01..100.0f64, 5),
    ) {
        let scaled = |x: &Tensor| Tensor::from_fn(5, 4, |r, c| scales[r] * x.get(r, c));
        let base = loss(&z, &h);
        prop_assert!((loss(&scaled(&z), &h) - base).abs() < 1e-9);
        prop_assert!((loss(&z, &scaled(&h)) - base).abs() < 1e-9);
        prop_assert!((loss(&h, &z) - base).abs() < 1e-12);
        prop_assert!((0.0..=4.0 + 1e-12).contains(&base));
    }

    #[test]
    fn orthogonal_rows_give_two(a in 0.1..5.0f64, b in 0.1..5.0f64) {
        let z = Tensor::from_rows(&[[a, 0.0], [0.0, -b]]);
        let h = Tensor::from_rows(&[[0.0, b], [a, 0.0]]);
        prop_assert!((loss(&z, &h) - 2.0).abs() < 1e-12);
    }

    /// Every target entry after an update lies between its old value and
    /// the online value.
    #[test]
    fn ema_stays_between_target_and_online(tau in 0.0..=1.0f64, seed: u64) {
        let mut rng = seeded(seed, 0);
        let online = EncoderParams::init(&dims(), &mut rng);
        let head = OnlineHead::init(&dims(), true, &mut rng);
        let before = EncoderParams::init(&dims(), &mut rng);
        let before_head = TargetHead::init(&dims(), &mut rng);
        let (mut target, mut target_head) = (before.clone(), before_head.clone());
        ema_update(&mut target, &mut target_head, &online, &head, tau);
        let triples = target.tensors().into_iter().zip(before.tensors()).zip(online.tensors());
        for ((now, old), on) in triples {
            for ((x, o), p) in now.data().iter().zip(old.data()).zip(on.data()) {
                prop_assert!(*x >= o.min(*p) - 1e-15 && *x <= o.max(*p) + 1e-15);
            }
        }
    }
}

#[test]
fn target_moves_only_through_ema() {
    let g = synth_sbm(&SbmConfig::default()).unwrap();
    let corpus = Corpus::Nodes(g.without_labels());
    let d = EncoderDims {
        d_in: g.feature_dim(),
        ..dims()
    };
    let cfg = PretrainConfig {
        tau: 1.0,
        ..Default::default()
    };
    let mut rng = seeded(3, 0);
    let mut state = ContrastiveState::new(&d, &cfg, &mut rng);
    let (target0, online0) = (state.target.clone(), state.online.clone());
    for _ in 0..5 {
        pretrain_step(
            &mut state,
            &corpus,
            &AugmentConfig::default(),
            &cfg,
            cfg.lr,
            &mut rng,
        )
        .unwrap();
    }
    assert_eq!(state.target, target0);
    assert_ne!(state.online, online0);
}
