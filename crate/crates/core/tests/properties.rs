use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saits::data::{mcar_count, window, RawSeries, Standardizer};
use saits::nn::{Ctx, EncoderLayer, FeedForward, LayerDims, LayerNorm, ParamStore};
use saits::tensor::{Tape, Tensor};

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, data in prop::collection::vec(-50.0f64..50.0, 8 * 4)) {
        let width = 8;
        let x = tensor(vec![rows, width], data[..rows * width].to_vec());
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", width);
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store.bind_frozen(&tape));
        let y = ln.forward(&cx, tape.constant(x.clone())).unwrap().value();
        for (row, out) in x.data().chunks(width).zip(y.data().chunks(width)) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let out_mean = out.iter().sum::<f64>() / width as f64;
            let out_var = out.iter().map(|v| v * v).sum::<f64>() / width as f64;
            prop_assert!(out_mean.abs() < 1e-9);
            prop_assert!((out_var - var / (var + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn feed_forward_commutes_with_row_permutation(seed in 0u64..1000, shift in 1usize..5) {
        let (steps, d) = (5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", d, 6, &mut rng);
        let x = Tensor::from_fn(vec![steps, d], |i| ((i * 7 + seed as usize) % 11) as f64 - 5.0);
        let perm: Vec<usize> = (0..steps).map(|i| (i + shift) % steps).collect();
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store.bind_frozen(&tape));
        let y = ffn.forward(&cx, tape.constant(x.clone())).unwrap().value();
        let yp = ffn.forward(&cx, tape.constant(x.select0(&perm).unwrap())).unwrap().value();
        prop_assert_eq!(y.select0(&perm).unwrap(), yp);
    }

    #[test]
    fn standardizer_round_trips_observed_values(data in prop::collection::vec(-1e3f64..1e3, 24), holes in prop::collection::vec(any::<bool>(), 24)) {
        let x = tensor(vec![8, 3], data);
        let mut mask: Vec<f64> = holes.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect();
        // At least two distinct observations per feature.
        for j in 0..3 {
            mask[j] = 1.0;
            mask[3 + j] = 1.0;
        }
        prop_assume!((0..3).all(|j| x.data()[j] != x.data()[3 + j]));
        let mask = tensor(vec![8, 3], mask);
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let s = Standardizer::fit(&x, &mask, &names).unwrap();
        let z = s.transform(&x, &mask);
        let back = s.inverse(&z);
        for i in 0..24 {
            if mask.data()[i] == 1.0 {
                prop_assert!((back.data()[i] - x.data()[i]).abs() <= 1e-9 * x.data()[i].abs().max(1.0));
            } else {
                prop_assert_eq!(z.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn window_count_follows_length_and_stride(len in 1usize..60, steps in 1usize..12, stride in 1usize..6) {
        let raw = RawSeries {
            features: vec!["v".into()],
            rows: (0..len).map(|i| vec![Some(i as f64)]).collect(),
            sample_ids: None,
        };
        match window(&raw, steps, stride) {
            Ok(s) => {
                prop_assert!(len >= steps);
                prop_assert_eq!(s.len(), (len - steps) / stride + 1);
                prop_assert_eq!(s.x.get(&[s.len() - 1, 0, 0]), (((len - steps) / stride) * stride) as f64);
            }
            Err(_) => prop_assert!(len < steps),
        }
    }

    #[test]
    fn mcar_count_is_rounded_and_clamped(rate in 0.0f64..1.0, n in 0usize..500) {
        let k = mcar_count(rate, n);
        if rate == 0.0 || n == 0 {
            prop_assert_eq!(k, 0);
        } else {
            prop_assert!(k >= 1 && k <= n);
            prop_assert!(k == 1 || (k as f64 - rate * n as f64).abs() <= 0.5);
        }
    }
}

#[test]
fn dropout_keeps_the_expected_fraction() {
    let n = 100_000;
    let p = 0.3;
    let tape = Tape::new();
    let cx = Ctx::train(&tape, Vec::new(), ChaCha8Rng::seed_from_u64(1));
    let y = cx.dropout(tape.constant(Tensor::ones(vec![n])), p).unwrap().value();
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    // Five binomial standard deviations.
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((kept - (1.0 - p)).abs() < 5.0 * sd, "kept {kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-15));
}

#[test]
fn encoder_layer_is_deterministic_in_evaluation() {
    let dims = LayerDims {
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        d_k: 4,
        d_v: 4,
    };
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, "layer", dims, &mut ChaCha8Rng::seed_from_u64(2));
    let x = Tensor::from_fn(vec![2, 5, 8], |i| (i as f64 * 0.37).sin());
    let run = || {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store.bind_frozen(&tape));
        let out = layer.forward(&cx, tape.constant(x.clone()), true, 0.5).unwrap();
        (out.values.value().clone(), out.weights.value().clone())
    };
    assert_eq!(run(), run());
}
