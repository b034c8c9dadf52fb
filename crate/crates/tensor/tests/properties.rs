use proptest::prelude::*;
use saits_tensor::{Tape, Tensor, MASK_SENTINEL};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(
        a in prop::collection::vec(-10.0f64..10.0, 25),
        b in prop::collection::vec(-10.0f64..10.0, 25),
    ) {
        let tape = Tape::new();
        let va = tape.constant(Tensor::new([5, 5], a.clone()).unwrap());
        let vb = tape.constant(Tensor::new([5, 5], b.clone()).unwrap());
        let got = va.matmul(vb).unwrap().value();
        let want = naive_matmul(&a, &b, 5, 5, 5);
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        x in prop::collection::vec(-50.0f64..50.0, 24),
        masked in prop::collection::vec(any::<bool>(), 24),
    ) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new([4, 6], x).unwrap());
        // keep one unmasked entry per row
        let mask = Tensor::from_fn([4, 6], |i| if masked[i] && i % 6 != 0 { MASK_SENTINEL } else { 0.0 });
        let y = v.softmax_last(Some(&mask)).unwrap().value();
        for row in y.data().chunks(6) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        for (p, m) in y.data().iter().zip(mask.data()) {
            if *m != 0.0 {
                prop_assert!(*p < 1e-300);
            }
        }
    }

    #[test]
    fn broadcast_gradient_sums_over_broadcast_axis(
        base in prop::collection::vec(-5.0f64..5.0, 4),
        upstream in prop::collection::vec(-5.0f64..5.0, 12),
    ) {
        let tape = Tape::new();
        let b = tape.param(Tensor::new([4], base).unwrap());
        let zeros = tape.constant(Tensor::zeros([3, 4]));
        let weights = tape.constant(Tensor::new([3, 4], upstream.clone()).unwrap());
        let loss = zeros.add(b).unwrap().mul(weights).unwrap().sum();
        tape.backward(loss).unwrap();
        let g = b.grad().unwrap();
        for j in 0..4 {
            let want: f64 = (0..3).map(|i| upstream[i * 4 + j]).sum();
            prop_assert!((g.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_ops_stay_finite(x in prop::collection::vec(-1e3f64..1e3, 16)) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new([4, 4], x).unwrap());
        let mut mask = Tensor::zeros([4, 4]);
        for i in 0..4 {
            mask.set(&[i, i], MASK_SENTINEL);
        }
        let y = v.softmax_last(Some(&mask)).unwrap().sigmoid().matmul(v).unwrap();
        prop_assert!(y.value().all_finite());
    }
}
