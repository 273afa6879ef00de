use cgfl_core::tensor::{AdamConfig, AdamState};
use cgfl_core::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

proptest! {
    #[test]
    fn matmul_agrees_with_triple_loop(
        (a, b) in (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
    ) {
        let got = a.matmul(&b).unwrap();
        prop_assert_eq!(got.shape(), (a.rows(), b.cols()));
        prop_assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn normalized_rows_have_unit_length(x in matrix(5, 4)) {
        prop_assume!((0..5).all(|r| x.row(r).iter().any(|v| v.abs() > 1e-3)));
        let mut t = Tape::new();
        let v = t.constant(x);
        let n = t.l2norm_rows(v).unwrap();
        for r in 0..5 {
            let len: f64 = t.value(n).row(r).iter().map(|v| v * v).sum();
            prop_assert!((len - 1.0).abs() < 1e-12);
        }
    }

    /// `sum(l2norm(exp(x) W) * R)` against central differences with step 1e-5.
    #[test]
    fn composite_gradient_matches_finite_differences(x in matrix(3, 4), w in matrix(4, 3), r in matrix(3, 3)) {
        let f = |x: &Tensor, want: bool| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            let rv = t.constant(r.clone());
            let e = t.exp(xv).unwrap();
            let h = t.matmul(e, wv).unwrap();
            let n = t.l2norm_rows(h).unwrap();
            let p = t.mul(n, rv).unwrap();
            let s = t.sum(p).unwrap();
            let value = t.value(s).item();
            if want {
                t.backward(s).unwrap();
                (value, t.take_grad(xv))
            } else {
                (value, None)
            }
        };
        let grad = f(&x, true).1.unwrap();
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0, 0.0);
        for j in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[j] += h;
            let mut down = x.clone();
            down.data_mut()[j] -= h;
            let numeric = (f(&up, false).0 - f(&down, false).0) / (2.0 * h);
            diff += (grad.data()[j] - numeric).powi(2);
            norm += grad.data()[j].abs().max(numeric.abs()).powi(2);
        }
        prop_assert!(diff.sqrt() <= 1e-4 * norm.sqrt().max(1e-12));
    }

    /// Several Adam steps against the recurrence written out by hand.
    #[test]
    fn adam_follows_the_recurrence(
        p0 in matrix(2, 3),
        grads in prop::collection::vec(matrix(2, 3), 1..6),
        lr in 1e-4..0.5f64,
    ) {
        let cfg = AdamConfig::default();
        let mut p = p0.clone();
        let mut state = AdamState::new([&p], cfg);
        let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
        let mut expect = p0.data().to_vec();
        for (t, g) in grads.iter().enumerate() {
            state.step(&mut [&mut p], vec![Some(g.clone())], lr).unwrap();
            prop_assert_eq!(state.step_count(), t as u64 + 1);
            let t = t as i32 + 1;
            for j in 0..6 {
                m[j] = 0.9 * m[j] + 0.1 * g.data()[j];
                v[j] = 0.999 * v[j] + 0.001 * g.data()[j] * g.data()[j];
                let m_hat = m[j] / (1.0 - 0.9f64.powi(t));
                let v_hat = v[j] / (1.0 - 0.999f64.powi(t));
                expect[j] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            }
        }
        let expect = Tensor::new(2, 3, expect).unwrap();
        prop_assert!(p.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn reused_input_accumulates_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_rows(&[[1.5, -2.0]]));
    let y = t.add(x, x).unwrap();
    let z = t.mul(y, x).unwrap();
    let s = t.sum(z).unwrap();
    t.backward(s).unwrap();
    // d/dx sum(2x * x) = 4x
    assert_eq!(t.grad(x).unwrap(), &Tensor::from_rows(&[[6.0, -8.0]]));
}
