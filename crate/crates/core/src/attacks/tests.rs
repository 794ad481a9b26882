use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::build_model;

fn desk() -> (ModelSpec, Params<f32>) {
    let spec = ModelSpec::desk([1, 8, 8], 3);
    let params = build_model(&spec, 2).unwrap();
    (spec, params)
}

fn batch(seed: u64, n: usize) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(0.0..=1.0));
    let y = (0..n).map(|i| i % 3).collect();
    (x, y)
}

fn linf(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|v| v.abs() as f64).fold(0.0, f64::max)
}

#[test]
fn zero_radius_returns_input_exactly() {
    let (spec, params) = desk();
    let (x, y) = batch(0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::eval()
    };
    assert_eq!(pgd(&spec, &params, &x, &y, &cfg, &mut rng).unwrap().adversarial, x);
    let cfg = AttackConfig {
        steps: 0,
        random_start: false,
        ..AttackConfig::eval()
    };
    let out = pgd(&spec, &params, &x, &y, &cfg, &mut rng).unwrap();
    assert_eq!(out.adversarial, x);
    assert!(out.delta.data().iter().all(|&d| d == 0.0));
}

#[test]
fn one_step_on_a_linear_scorer_follows_the_closed_form_sign() {
    // logits = x·W + b; ∂CE/∂x = W (softmax − onehot)
    let spec = ModelSpec::linear([1, 2, 2], 2);
    let w = vec![0.5, -1.0, 2.0, 0.3, -0.7, 0.7, 0.0, 0.0];
    let b = vec![0.1, 0.0];
    let params = Params::new(vec![
        ("dense0.weight".into(), Tensor::<f64>::new(vec![4, 2], w.clone()).unwrap()),
        ("dense0.bias".into(), Tensor::from_vec(b.clone())),
    ]);
    let xv = vec![0.5, 0.2, 0.99, 0.4];
    let x = Tensor::new(vec![1, 1, 2, 2], xv.clone()).unwrap();
    let y = [0];
    let z: Vec<f64> = (0..2)
        .map(|c| (0..4).map(|i| xv[i] * w[i * 2 + c]).sum::<f64>() + b[c])
        .collect();
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let p: Vec<f64> = e.iter().map(|v| v / (e[0] + e[1])).collect();
    let cfg = AttackConfig {
        epsilon: 0.05,
        alpha: 0.03,
        steps: 1,
        random_start: false,
    };
    let out = pgd(&spec, &params, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for i in 0..4 {
        let g = w[i * 2] * (p[0] - 1.0) + w[i * 2 + 1] * p[1];
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        let want = (xv[i] + cfg.alpha * s).clamp(0.0, 1.0);
        assert!((out.adversarial.data()[i] - want).abs() < 1e-15, "pixel {i}");
    }
    // the zero-weight pixel never moves
    assert_eq!(out.delta.data()[3], 0.0);
}

#[test]
fn large_steps_are_projected_to_the_ball() {
    let (spec, params) = desk();
    let (x, y) = batch(1, 6);
    let cfg = AttackConfig {
        epsilon: 8.0 / 255.0,
        alpha: 1.0,
        steps: 3,
        random_start: true,
    };
    let out = pgd(&spec, &params, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(linf(&out.delta) <= cfg.epsilon + 1e-7);
    // with α ≫ ε every moved coordinate sits on the ball or the box boundary
    for (&a, &xi) in out.adversarial.data().iter().zip(x.data()) {
        let d = (a as f64 - xi as f64).abs();
        assert!(d == 0.0 || (d - cfg.epsilon).abs() < 1e-6 || a == 0.0 || a == 1.0);
    }
}

#[test]
fn worker_count_does_not_change_the_result() {
    let (spec, params) = desk();
    let (x, y) = batch(2, 7);
    let cfg = AttackConfig::train();
    let one = pgd_with_workers(&spec, &params, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(5), 1).unwrap();
    let three = pgd_with_workers(&spec, &params, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(5), 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn bad_inputs_are_rejected() {
    let (spec, params) = desk();
    let (mut x, y) = batch(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(pgd(&spec, &params, &x, &y[..1], &AttackConfig::eval(), &mut rng).is_err());
    let bad = AttackConfig {
        epsilon: -1.0,
        ..AttackConfig::eval()
    };
    assert!(pgd(&spec, &params, &x, &y, &bad, &mut rng).is_err());
    x = x.map(|v| v + 2.0);
    assert!(pgd(&spec, &params, &x, &y, &AttackConfig::eval(), &mut rng).is_err());
}

#[test]
fn non_finite_logits_abort() {
    let (spec, params) = desk();
    let huge = params.map(|_| 1e30);
    let (x, y) = batch(4, 2);
    let r = pgd(&spec, &huge, &x, &y, &AttackConfig::eval(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::NonFinite { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_stay_in_the_ball_and_the_box(
        seed in 0u64..1000,
        eps in 0.0f64..0.2,
        alpha in 0.0f64..0.1,
        steps in 0usize..4,
        random_start in any::<bool>(),
    ) {
        let (spec, params) = desk();
        let (x, y) = batch(seed, 3);
        let cfg = AttackConfig { epsilon: eps, alpha, steps, random_start };
        let out = pgd(&spec, &params, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(linf(&out.delta) <= eps + 1e-7);
        prop_assert!(out.adversarial.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

/// Direct-summation DFT magnitudes of an H×W image.
fn dft_magnitudes(u: &Tensor<f64>, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for p in 0..h {
        for q in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for a in 0..h {
                for b in 0..w {
                    let th = -2.0 * PI * ((p * a) as f64 / h as f64 + (q * b) as f64 / w as f64);
                    re += u.data()[a * w + b] * th.cos();
                    im += u.data()[a * w + b] * th.sin();
                }
            }
            out[p * w + q] = (re * re + im * im).sqrt();
        }
    }
    out
}

#[test]
fn dc_basis_is_constant() {
    let u = fourier_basis::<f64, _>(0, 0, 4, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let c = 1.0 / 32f64.sqrt();
    assert!(u.data().iter().all(|&v| (v - c).abs() < 1e-15));
}

#[test]
fn basis_support_is_the_conjugate_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = fourier_basis::<f64, _>(1, 0, 8, 8, &mut rng).unwrap();
    let mag = dft_magnitudes(&u, 8, 8);
    for (k, &m) in mag.iter().enumerate() {
        if k == 8 || k == 7 * 8 {
            assert!(m > 1.0);
        } else {
            assert!(m < 1e-9, "bin {k}: {m}");
        }
    }
}

#[test]
fn every_basis_on_8x8_is_unit_norm_with_at_most_two_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..8 {
        for j in 0..8 {
            let u = fourier_basis::<f64, _>(i, j, 8, 8, &mut rng).unwrap();
            let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            let support: Vec<usize> = dft_magnitudes(&u, 8, 8)
                .iter()
                .enumerate()
                .filter(|(_, &m)| m > 1e-9)
                .map(|(k, _)| k)
                .collect();
            let pair = [i * 8 + j, ((8 - i) % 8) * 8 + (8 - j) % 8];
            assert!(support.len() <= 2 && support.iter().all(|k| pair.contains(k)), "({i},{j})");
        }
    }
}

#[test]
fn basis_is_reproducible_from_the_seed() {
    let a = fourier_basis::<f32, _>(2, 3, 8, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = fourier_basis::<f32, _>(2, 3, 8, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert!(fourier_basis::<f32, _>(8, 0, 8, 8, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
}

#[test]
fn corruption_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::from_fn(&[3, 4, 4], |i| (i % 5) as f32 / 5.0);
    let none = FourierBasisSpec {
        i: 1,
        j: 2,
        v: 0.0,
        sign: None,
    };
    assert_eq!(fourier_corrupt(&x, &none, &mut rng).unwrap(), x);

    let one = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32 / 16.0);
    let dc = FourierBasisSpec {
        i: 0,
        j: 0,
        v: 4.0,
        sign: Some(1.0),
    };
    let out = fourier_corrupt(&one, &dc, &mut rng).unwrap();
    assert!(out.data().iter().all(|&v| v == 1.0));
}

#[test]
fn corruption_channels_are_independent() {
    let x = Tensor::<f64>::full(&[2, 8, 8], 0.5);
    let spec = FourierBasisSpec {
        i: 1,
        j: 1,
        v: 0.5,
        sign: None,
    };
    let out = fourier_corrupt(&x, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (a, b) = out.data().split_at(64);
    assert_ne!(a, b);
}

#[test]
fn signs_average_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mean = (0..1000).map(|_| draw_sign(&mut rng)).sum::<f64>() / 1000.0;
    assert!(mean.abs() <= 0.1, "{mean}");
}
