//! Randomized invariants across the crate.

use cvgan::capsule::{route, squash_vector, RoutingOptions};
use cvgan::degrade::{blend, transmission_value};
use cvgan::generator::LatentCode;
use cvgan::losses::{adaptive_lambda, gdl, LAMBDA_DELTA};
use cvgan::metrics::{inception_score, psnr_from_mse};
use cvgan::tensor::kernels::{conv2d_forward, conv2d_grad_input, conv_transpose2d_forward, ConvGeom};
use cvgan::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn vec_f64(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coupling_rows_are_distributions(data in vec_f64(3 * 4 * 5, -3.0, 3.0), iters in 1usize..5) {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::new(&[3, 4, 5], data).unwrap());
        let r = route(&mut tape, u, &RoutingOptions::new(iters)).unwrap();
        for step in &r.steps {
            let c = tape.value(step.coupling);
            for row in c.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn squash_is_bounded_and_keeps_direction(s in vec_f64(6, -50.0, 50.0)) {
        let v = squash_vector(&s);
        let n_s = dot(&s, &s).sqrt();
        let n_v = dot(&v, &v).sqrt();
        prop_assert!(n_v < 1.0);
        if n_s > 1e-6 {
            prop_assert!((dot(&s, &v) / (n_s * n_v) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squash_length_grows_with_input_length(s in vec_f64(4, -2.0, 2.0), k in 1.01f64..4.0) {
        prop_assume!(dot(&s, &s) > 1e-6);
        let scaled: Vec<f64> = s.iter().map(|v| v * k).collect();
        let a = squash_vector(&s);
        let b = squash_vector(&scaled);
        prop_assert!(dot(&b, &b) > dot(&a, &a));
    }

    #[test]
    fn blend_stays_between_scene_and_ambient(
        j in vec_f64(3 * 4, 0.0, 1.0),
        t in vec_f64(4, 0.0, 1.0),
        a in vec_f64(3, 0.0, 1.0),
    ) {
        let clean = Tensor::new(&[3, 2, 2], j.clone()).unwrap();
        let tt = Tensor::new(&[3, 2, 2], t.iter().cycle().take(12).cloned().collect()).unwrap();
        let ambient = [a[0], a[1], a[2]];
        let out = blend(&clean, &tt, &ambient).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let al = ambient[i / 4];
            prop_assert!(v >= j[i].min(al) && v <= j[i].max(al));
        }
    }

    #[test]
    fn transmission_decreases_with_depth(d in 0.0f64..10.0, extra in 1e-3f64..5.0, nu in 1e-3f64..2.0) {
        prop_assert!(transmission_value(d + extra, nu) < transmission_value(d, nu));
    }

    #[test]
    fn psnr_falls_as_error_grows(mse in 1e-8f64..10.0, k in 1.001f64..100.0) {
        prop_assert!(psnr_from_mse(mse * k, 1.0) < psnr_from_mse(mse, 1.0));
    }

    #[test]
    fn latent_codes_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut x = seed;
        let payload: Vec<f32> = (0..n).map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f32::from_bits((x >> 32) as u32)
        }).collect();
        let code = LatentCode::new(&shape, payload).unwrap();
        let back = LatentCode::from_bytes(&code.to_bytes()).unwrap();
        prop_assert_eq!(back.shape(), code.shape());
        prop_assert!(back.payload().iter().zip(code.payload()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gdl_ignores_constant_offsets(y in vec_f64(2 * 5 * 5, 0.0, 1.0), c in -2.0f64..2.0) {
        let yt = Tensor::new(&[2, 5, 5], y.clone()).unwrap();
        let shifted = Tensor::new(&[2, 5, 5], y.iter().map(|v| v + c).collect()).unwrap();
        prop_assert!(gdl(&yt, &shifted, 1).unwrap() < 1e-12);
        prop_assert!(gdl(&yt, &yt, 1).unwrap() == 0.0);
    }

    #[test]
    fn lambda_is_scale_invariant_up_to_delta(r in 1e-2f64..10.0, g in 1e-2f64..10.0, k in 0.1f64..10.0) {
        let a = adaptive_lambda(r, g, LAMBDA_DELTA);
        let b = adaptive_lambda(k * r, k * g, LAMBDA_DELTA);
        prop_assert!((a - b).abs() <= a * 1e-3);
    }

    #[test]
    fn convolution_adjoints_agree(
        x in vec_f64(2 * 6 * 6, -1.0, 1.0),
        w in vec_f64(3 * 2 * 3 * 3, -1.0, 1.0),
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let g = ConvGeom { channels: 2, height: 6, width: 6, kernel: 3, stride, pad };
        let y = conv2d_forward(&x, &w, 3, &g);
        let probe: Vec<f64> = (0..y.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let back = conv2d_grad_input(&probe, &w, 3, &g);
        prop_assert!((dot(&y, &probe) - dot(&x, &back)).abs() < 1e-9);
        let t = conv_transpose2d_forward(&probe, &w, 3, &g);
        prop_assert_eq!(t, back);
    }

    #[test]
    fn softmax_rows_are_distributions(data in vec_f64(4 * 6, -30.0, 30.0), axis in 0usize..2) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[4, 6], data).unwrap());
        let p = tape.softmax(x, axis).unwrap();
        let v = tape.value(p);
        let (rows, cols) = (4, 6);
        if axis == 1 {
            for r in 0..rows {
                prop_assert!((v.data()[r * cols..(r + 1) * cols].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        } else {
            for c in 0..cols {
                prop_assert!(((0..rows).map(|r| v.data()[r * cols + c]).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inception_score_lies_between_one_and_class_count(
        raw in prop::collection::vec(vec_f64(5, 0.01, 1.0), 2..12),
    ) {
        let probs: Vec<Vec<f64>> = raw
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let (m, _) = inception_score(&probs, 1).unwrap();
        prop_assert!((1.0 - 1e-12..=5.0 + 1e-12).contains(&m));
    }
}
