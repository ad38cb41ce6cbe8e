use merge_gate_core::numerics::{cross_entropy, finite_difference_check, rms_norm, softmax_one, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn fd_check_of_sum_is_exact() {
    let err = finite_difference_check(|g, v| Ok(g.sum(v)), &randn(&[3, 4], 1), 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn fd_check_softmax_one_sum_of_squares() {
    let err = finite_difference_check(
        |g, v| {
            let s = g.softmax_one(v);
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        },
        &randn(&[6], 2),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_check_rms_norm_sum() {
    let err = finite_difference_check(
        |g, v| {
            let gain = g.constant(Tensor::from_f64(vec![8], &[1.0, 0.5, 2.0, -1.0, 1.5, 0.3, 0.7, 1.1])?);
            let y = g.rms_norm(v, gain, 1e-6)?;
            Ok(g.sum(y))
        },
        &randn(&[8], 3),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn fd_check_attention_then_cross_entropy() {
    let k = randn(&[4, 4], 11);
    let v = randn(&[4, 5], 12);
    let err = finite_difference_check(
        |g, x| {
            let kc = g.constant(k.clone());
            let vc = g.constant(v.clone());
            let s = g.matmul(x, kc, true)?;
            let a = g.softmax_one(s);
            let o = g.matmul(a, vc, false)?;
            g.cross_entropy(o, &[Some(0), Some(3), Some(4)])
        },
        &randn(&[3, 4], 10),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn rms_norm_scaled_gain() {
    let x = Tensor::from_f64(vec![3], &[1.0, 2.0, 2.0]).unwrap();
    let gain = Tensor::from_f64(vec![3], &[2.0, 2.0, 2.0]).unwrap();
    let y = rms_norm(&x, &gain, 0.0).unwrap();
    // mean square 3, rms sqrt 3
    let r = 3f64.sqrt();
    for (a, b) in y.data().iter().zip([2.0 / r, 4.0 / r, 4.0 / r]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_limits() {
    let l: Tensor<f64> = Tensor::from_f64(vec![1, 3], &[80.0, 0.0, 0.0]).unwrap();
    assert!(cross_entropy(&l, &[0], 99).unwrap() < 1e-30);
    let u: Tensor<f64> = Tensor::from_f64(vec![1, 4], &[0.3; 4]).unwrap();
    assert!((cross_entropy(&u, &[2], 99).unwrap() - 4f64.ln()).abs() < 1e-12);
    let ignored: Tensor<f64> = Tensor::from_f64(vec![2, 3], &[2.0, 0.0, 0.0, 5.0, 1.0, 1.0]).unwrap();
    let want = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    assert!((cross_entropy(&ignored, &[0, 99], 99).unwrap() - want).abs() < 1e-12);
    assert!(cross_entropy(&ignored, &[99, 99], 99).is_err());
}

#[test]
fn graph_rejects_broadcast_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, b, false).is_err());
}

proptest! {
    // above ~36 the missing mass e^-max drops below f64 resolution at 1.0
    #[test]
    fn softmax_one_rows_sum_below_one(xs in prop::collection::vec(-60.0f64..30.0, 1..9)) {
        let n = xs.len();
        let y = softmax_one(&Tensor::from_f64(vec![n], &xs).unwrap(), 0).unwrap();
        let s: f64 = y.data().iter().sum();
        prop_assert!(s < 1.0, "sum {}", s);
        prop_assert!(y.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_one_is_not_shift_invariant(xs in prop::collection::vec(-5.0f64..5.0, 1..9)) {
        let n = xs.len();
        let a = softmax_one(&Tensor::from_f64(vec![n], &xs).unwrap(), 0).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x - 30.0).collect();
        let b = softmax_one(&Tensor::from_f64(vec![n], &shifted).unwrap(), 0).unwrap();
        let (sa, sb): (f64, f64) = (a.data().iter().sum(), b.data().iter().sum());
        prop_assert!(sb < sa);
        prop_assert!(sb < 9.0 * (-25f64).exp());
    }

    #[test]
    fn softmax_one_gradient_matches_differences(
        rows in 1usize..4, cols in 1usize..8, seed in 0u64..1000,
    ) {
        let x = randn(&[rows, cols], seed);
        let err = finite_difference_check(|g, v| {
            let s = g.softmax_one(v);
            let w: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.37).sin()).collect();
            g.weighted_sum(s, w)
        }, &x, 1e-6).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn rms_norm_output_has_unit_rms(xs in prop::collection::vec(-10.0f64..10.0, 2..9)) {
        prop_assume!(xs.iter().any(|x| x.abs() > 1e-3));
        let n = xs.len();
        let ones = Tensor::full(&[n], 1.0);
        let y = rms_norm(&Tensor::from_f64(vec![n], &xs).unwrap(), &ones, 0.0).unwrap();
        let ms = y.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        prop_assert!((ms - 1.0).abs() < 1e-9);
    }
}
