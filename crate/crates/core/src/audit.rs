//! Finite-difference audit of every tape primitive and every training loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Part, Tape, Var};
use crate::error::Result;
use crate::models::{build_model, forward, Layer, ModelSpec};
use crate::objectives::{mart, sar, trades};
use crate::rng::{StreamRng, Streams};
use crate::spectral::DistanceMetric;
use crate::tensor::Tensor;

pub const AUDIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditCase {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<AuditCase>,
}

impl AuditReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

type Builder = fn(&mut Tape<f64>, &mut StreamRng) -> Result<Var>;

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn distinct(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Tensor::from_fn(shape, |i| idx[i] as f64 * 0.05 - 0.4)
}

fn labels(rng: &mut StreamRng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |t, r| {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            t.add(a, b)
        }),
        ("sub", |t, r| {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            t.sub(a, b)
        }),
        ("mul", |t, r| {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            t.mul(a, b)
        }),
        ("div", |t, r| {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[3, 4], 1.5, 3.0));
            t.div(a, b)
        }),
        ("neg_scale_shift", |t, r| {
            let a = t.leaf(uniform(r, &[5], -1.0, 1.0));
            let n = t.neg(a)?;
            let s = t.scale(n, 2.5)?;
            t.add_scalar(s, 0.3)
        }),
        ("matmul", |t, r| {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[4, 2], -1.0, 1.0));
            t.matmul(a, b)
        }),
        ("add_bias", |t, r| {
            let a = t.leaf(uniform(r, &[3, 4], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[4], -1.0, 1.0));
            t.add_bias(a, b)
        }),
        ("conv2d", |t, r| {
            let x = t.leaf(uniform(r, &[2, 2, 5, 5], -1.0, 1.0));
            let w = t.leaf(uniform(r, &[3, 2, 3, 3], -1.0, 1.0));
            let b = t.leaf(uniform(r, &[3], -1.0, 1.0));
            t.conv2d(x, w, Some(b), 1)
        }),
        ("relu", |t, r| {
            let a = t.leaf(away_from_zero(r, &[4, 5]));
            t.relu(a)
        }),
        ("abs", |t, r| {
            let a = t.leaf(away_from_zero(r, &[4, 5]));
            t.abs(a)
        }),
        ("sqrt", |t, r| {
            let a = t.leaf(uniform(r, &[6], 1.0, 3.0));
            t.sqrt(a)
        }),
        ("exp", |t, r| {
            let a = t.leaf(uniform(r, &[6], -1.0, 1.0));
            t.exp(a)
        }),
        ("log", |t, r| {
            let a = t.leaf(uniform(r, &[6], 1.0, 3.0));
            t.log_clamped(a, 1e-12)
        }),
        ("max_pool2", |t, r| {
            let a = t.leaf(distinct(r, &[2, 2, 4, 4]));
            t.max_pool2(a)
        }),
        ("avg_pool2", |t, r| {
            let a = t.leaf(uniform(r, &[2, 2, 4, 6], -1.0, 1.0));
            t.avg_pool2(a)
        }),
        ("reshape", |t, r| {
            let a = t.leaf(uniform(r, &[2, 3, 2], -1.0, 1.0));
            let b = t.reshape(a, &[3, 4])?;
            t.flatten(b)
        }),
        ("log_softmax", |t, r| {
            let a = t.leaf(uniform(r, &[3, 5], -2.0, 2.0));
            t.log_softmax(a)
        }),
        ("sum", |t, r| {
            let a = t.leaf(uniform(r, &[3, 5], -2.0, 2.0));
            t.sum(a)
        }),
        ("mean", |t, r| {
            let a = t.leaf(uniform(r, &[3, 5], -2.0, 2.0));
            t.mean(a)
        }),
        ("sum_rows", |t, r| {
            let a = t.leaf(uniform(r, &[3, 5], -2.0, 2.0));
            t.sum_rows(a)
        }),
        ("gather", |t, r| {
            let a = t.leaf(uniform(r, &[4, 3], -2.0, 2.0));
            let idx = labels(r, 4, 3);
            t.gather(a, &idx)
        }),
        ("max_except", |t, r| {
            let a = t.leaf(distinct(r, &[4, 5]));
            let idx = labels(r, 4, 5);
            t.max_except(a, &idx)
        }),
        ("dft_re", |t, r| {
            let a = t.leaf(uniform(r, &[3, 10], -1.0, 1.0));
            t.dft(a, Part::Re)
        }),
        ("dft_im", |t, r| {
            let a = t.leaf(uniform(r, &[3, 7], -1.0, 1.0));
            t.dft(a, Part::Im)
        }),
    ]
}

/// Logits of a smooth conv-dense net on clean and perturbed inputs.
fn model_logits(t: &mut Tape<f64>, r: &mut StreamRng) -> Result<(Var, Var)> {
    let spec = ModelSpec {
        input: [1, 4, 4],
        input_offset: 0.5,
        layers: vec![
            Layer::Conv {
                out_channels: 2,
                kernel: 3,
                padding: 1,
            },
            Layer::Dense { out: 4 },
        ],
        classes: 4,
    };
    let params = build_model::<f64>(&spec, r.gen())?;
    let vars = params.on_tape(t, true);
    let x = uniform(r, &[3, 1, 4, 4], 0.0, 1.0);
    let noise = uniform(r, &[3, 1, 4, 4], -0.03, 0.03);
    let x_adv = Tensor::from_fn(&[3, 1, 4, 4], |i| x.data()[i] + noise.data()[i]);
    let x = t.constant(x);
    let x_adv = t.constant(x_adv);
    let nat = forward(&spec, t, &vars, x)?;
    let adv = forward(&spec, t, &vars, x_adv)?;
    Ok((nat, adv))
}

fn logit_pair(t: &mut Tape<f64>, r: &mut StreamRng) -> (Var, Var) {
    let a = t.leaf(uniform(r, &[3, 4], -2.0, 2.0));
    let b = t.leaf(uniform(r, &[3, 4], -2.0, 2.0));
    (a, b)
}

fn losses() -> Vec<(&'static str, Builder)> {
    vec![
        ("sar_l1", |t, r| {
            let (a, b) = logit_pair(t, r);
            let y = labels(r, 3, 4);
            sar(t, a, b, &y, 0.1, DistanceMetric::L1)
        }),
        ("sar_l2", |t, r| {
            let (a, b) = logit_pair(t, r);
            let y = labels(r, 3, 4);
            sar(t, a, b, &y, 0.1, DistanceMetric::L2)
        }),
        ("sar_cosine", |t, r| {
            let (a, b) = logit_pair(t, r);
            let y = labels(r, 3, 4);
            sar(t, a, b, &y, 0.1, DistanceMetric::Cosine)
        }),
        ("trades", |t, r| {
            let (a, b) = logit_pair(t, r);
            let y = labels(r, 3, 4);
            trades(t, a, b, &y, 6.0)
        }),
        ("mart", |t, r| {
            let (a, b) = logit_pair(t, r);
            let y = labels(r, 3, 4);
            mart(t, a, b, &y, 6.0)
        }),
        ("model_sar", |t, r| {
            let (nat, adv) = model_logits(t, r)?;
            let y = labels(r, 3, 4);
            sar(t, nat, adv, &y, 0.1, DistanceMetric::L1)
        }),
        ("model_trades_sar", |t, r| {
            let (nat, adv) = model_logits(t, r)?;
            let y = labels(r, 3, 4);
            let base = trades(t, nat, adv, &y, 6.0)?;
            let term = sar(t, nat, adv, &y, 0.1, DistanceMetric::L2)?;
            t.add(base, term)
        }),
        ("model_mart", |t, r| {
            let (nat, adv) = model_logits(t, r)?;
            let y = labels(r, 3, 4);
            mart(t, nat, adv, &y, 6.0)
        }),
    ]
}

/// Reduces `out` with fixed random weights so every element reaches the loss.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, rng: &mut StreamRng) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(uniform(rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Runs every case once, each on its own named stream under `seed`.
pub fn audit(seed: u64, tolerance: f64) -> Result<AuditReport> {
    let streams = Streams::new(seed).child("gradcheck");
    let mut cases = Vec::new();
    for (name, build) in primitives().into_iter().chain(losses()) {
        let mut rng = streams.stream(name);
        let mut tape = Tape::<f64>::new();
        let out = build(&mut tape, &mut rng)?;
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            weighted_sum(&mut tape, out, &mut rng)?
        };
        let report = grad_check(&tape, loss, tolerance)?;
        cases.push(AuditCase {
            name: name.to_string(),
            max_rel_error: report.max_rel_error(),
            passed: report.passed(),
        });
    }
    Ok(AuditReport { seed, tolerance, cases })
}
