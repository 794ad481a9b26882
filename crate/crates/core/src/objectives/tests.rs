use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

fn random_logits(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, c], |_| rng.gen_range(-2.0..2.0))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn ce_oracle(logits: &Tensor<f64>, y: &[usize]) -> f64 {
    rows(logits).iter().zip(y).map(|(r, &t)| -softmax(r)[t].ln()).sum::<f64>() / y.len() as f64
}

fn kl_row_oracle(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (softmax(p), softmax(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn kl_oracle(p: &Tensor<f64>, q: &Tensor<f64>) -> f64 {
    let (p, q) = (rows(p), rows(q));
    p.iter().zip(&q).map(|(a, b)| kl_row_oracle(a, b)).sum::<f64>() / p.len() as f64
}

fn dft_oracle(v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (t, &x) in v.iter().enumerate() {
            let th = -2.0 * PI * (k * t) as f64 / n as f64;
            re[k] += x * th.cos();
            im[k] += x * th.sin();
        }
    }
    (re, im)
}

#[test]
fn ce_examples() {
    let uniform = Tensor::<f64>::zeros(&[3, 5]);
    assert!((ce_loss(&uniform, &[0, 2, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);

    let confident = Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap();
    assert!(ce_loss(&confident, &[1]).unwrap() < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = random_logits(&mut rng, 3, 4);
    let y = [3, 0, 1];
    assert!((ce_loss(&l, &y).unwrap() - ce_oracle(&l, &y)).abs() < 1e-7);

    assert!(ce_loss(&l, &[0, 4, 1]).is_err());
    assert!(ce_loss(&l, &[0, 1]).is_err());
}

#[test]
fn kl_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_logits(&mut rng, 4, 6);
    assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);

    let a = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
    // p = (1/2, 1/2), q = (1/4, 3/4)
    let hand = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((kl_divergence(&a, &b).unwrap() - hand).abs() < 1e-12);

    let q = random_logits(&mut rng, 4, 6);
    assert!((kl_divergence(&p, &q).unwrap() - kl_oracle(&p, &q)).abs() < 1e-10);
    assert!(kl_divergence(&p, &random_logits(&mut rng, 4, 5)).is_err());
}

#[test]
fn sar_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f1 = random_logits(&mut rng, 2, 4);
    let f2 = random_logits(&mut rng, 2, 4);
    let y = [1, 3];
    for m in [DistanceMetric::L1, DistanceMetric::L2, DistanceMetric::Cosine] {
        assert_eq!(sar_loss(&f1, &f2, &y, 0.0, m).unwrap(), ce_loss(&f2, &y).unwrap());
        assert_eq!(sar_loss(&f2, &f2, &y, 0.7, m).unwrap(), ce_loss(&f2, &y).unwrap());
    }

    // independent pipeline: direct DFT per row, manual L1 sums
    let (r1, r2) = (rows(&f1), rows(&f2));
    let mut dis = 0.0;
    for (a, b) in r1.iter().zip(&r2) {
        let (ar, ai) = dft_oracle(a);
        let (br, bi) = dft_oracle(b);
        for k in 0..4 {
            dis += (ar[k] - br[k]).abs() + (ai[k] - bi[k]).abs();
        }
    }
    let want = ce_oracle(&f2, &y) + 0.1 * dis / 2.0;
    let got = sar_loss(&f1, &f2, &y, 0.1, DistanceMetric::L1).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    assert!(sar_loss(&f1, &random_logits(&mut rng, 3, 4), &y, 0.1, DistanceMetric::L1).is_err());
}

#[test]
fn trades_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let nat = random_logits(&mut rng, 3, 5);
    let adv = random_logits(&mut rng, 3, 5);
    let y = [0, 4, 2];
    let ce_nat = ce_loss(&nat, &y).unwrap();
    assert!((trades_loss(&nat, &nat, &y, 6.0).unwrap() - ce_nat).abs() < 1e-15);
    assert_eq!(trades_loss(&nat, &adv, &y, 0.0).unwrap(), ce_nat);
    let want = ce_oracle(&nat, &y) + 6.0 * kl_oracle(&nat, &adv);
    assert!((trades_loss(&nat, &adv, &y, 6.0).unwrap() - want).abs() < 1e-7);
}

fn mart_oracle(nat: &Tensor<f64>, adv: &Tensor<f64>, y: &[usize], lambda: f64) -> f64 {
    let n = y.len() as f64;
    let mut bce = 0.0;
    let mut reg = 0.0;
    for ((a, b), &t) in rows(nat).iter().zip(rows(adv)).zip(y) {
        let pa = softmax(&b);
        let other = pa
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != t)
            .map(|(_, &p)| p)
            .fold(0.0, f64::max);
        bce += -pa[t].ln() - (1.0 - other).max(PROB_FLOOR).ln();
        reg += kl_row_oracle(a, &b) * (1.0 - softmax(a)[t]);
    }
    bce / n + lambda * reg / n
}

#[test]
fn mart_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nat = random_logits(&mut rng, 2, 3);
    let adv = random_logits(&mut rng, 2, 3);
    let y = [2, 0];
    let got = mart_loss(&nat, &adv, &y, 6.0).unwrap();
    assert!((got - mart_oracle(&nat, &adv, &y, 6.0)).abs() < 1e-6);
    let pure = mart_loss(&nat, &adv, &y, 0.0).unwrap();
    assert!((pure - mart_oracle(&nat, &adv, &y, 0.0)).abs() < 1e-12);

    // p_y(nat) → 1 kills the KL weight
    let sure = Tensor::<f64>::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
    let other = Tensor::new(vec![1, 3], vec![0.0, 1.0, -1.0]).unwrap();
    let with = mart_loss(&sure, &other, &[0], 6.0).unwrap();
    let without = mart_loss(&sure, &other, &[0], 0.0).unwrap();
    assert!((with - without).abs() < 1e-18);

    assert!(mart_loss(&nat, &random_logits(&mut rng, 2, 4), &y, 6.0).is_err());
}

#[test]
fn mart_log_is_guarded_when_another_class_is_certain() {
    let adv = Tensor::<f64>::new(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap();
    let v = mart_loss(&adv, &adv, &[0], 6.0).unwrap();
    assert!(v.is_finite());
}

/// Builds each loss on leaf logits and checks it against finite differences.
#[test]
fn every_loss_gradient_matches_finite_differences() {
    type Build = fn(&mut Tape<f64>, Var, Var, &[usize]) -> Result<Var>;
    let cases: [(&str, Build); 8] = [
        ("ce", |t, a, _, y| ce(t, a, y)),
        ("kl", |t, a, b, _| kl(t, a, b)),
        ("sar-l1", |t, a, b, y| sar(t, a, b, y, 0.1, DistanceMetric::L1)),
        ("sar-l2", |t, a, b, y| sar(t, a, b, y, 0.1, DistanceMetric::L2)),
        ("sar-cos", |t, a, b, y| sar(t, a, b, y, 0.1, DistanceMetric::Cosine)),
        ("trades", |t, a, b, y| trades(t, a, b, y, 6.0)),
        ("mart", |t, a, b, y| mart(t, a, b, y, 6.0)),
        ("sarwa", |t, a, b, y| {
            let fixed = t.constant(t.value(a).clone());
            sar(t, fixed, b, y, 0.15, DistanceMetric::L1)
        }),
    ];
    for (name, build) in cases {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.param("nat", random_logits(&mut rng, 3, 4));
            let b = tape.param("adv", random_logits(&mut rng, 3, 4));
            let y: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let loss = build(&mut tape, a, b, &y).unwrap();
            let report = grad_check(&tape, loss, 1e-6).unwrap();
            assert!(report.passed(), "{name} seed {seed}: {:?}", report.failing().collect::<Vec<_>>());
        }
    }
}

#[test]
fn weight_averaged_branch_gets_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[4, 6], |_| rng.gen_range(0.0..1.0)));
    let w_avg = tape.param("wa", Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0)));
    let w = tape.param("w", Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0)));
    let f1 = tape.matmul(x, w_avg).unwrap();
    let f1 = tape.detach(f1).unwrap();
    let f2 = tape.matmul(x, w).unwrap();
    let loss = sar(&mut tape, f1, f2, &[0, 1, 2, 4], 0.15, DistanceMetric::L1).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(w_avg).data().iter().all(|&v| v == 0.0));
    assert!(g.get(w).data().iter().any(|&v| v != 0.0));
}

#[test]
fn objective_names_round_trip() {
    for k in ObjectiveKind::ALL {
        assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
    }
    assert_eq!("at+sarwa".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::AtSarwa);
    assert_eq!("L-model".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::LModel);
    assert!("awp".parse::<ObjectiveKind>().is_err());
}

proptest! {
    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(-5.0f64..5.0, 8), q in prop::collection::vec(-5.0f64..5.0, 8)) {
        let p = Tensor::new(vec![2, 4], p).unwrap();
        let q = Tensor::new(vec![2, 4], q).unwrap();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
    }

    #[test]
    fn losses_are_nonnegative(
        p in prop::collection::vec(-5.0f64..5.0, 6),
        q in prop::collection::vec(-5.0f64..5.0, 6),
        y0 in 0usize..3,
        y1 in 0usize..3,
    ) {
        let nat = Tensor::new(vec![2, 3], p).unwrap();
        let adv = Tensor::new(vec![2, 3], q).unwrap();
        let y = [y0, y1];
        prop_assert!(ce_loss(&adv, &y).unwrap() >= 0.0);
        prop_assert!(sar_loss(&nat, &adv, &y, 0.1, DistanceMetric::L2).unwrap() >= 0.0);
        prop_assert!(trades_loss(&nat, &adv, &y, 6.0).unwrap() >= 0.0);
        prop_assert!(mart_loss(&nat, &adv, &y, 6.0).unwrap() >= 0.0);
    }
}
