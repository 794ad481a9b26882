//! L∞ PGD and single-frequency Fourier corruptions.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{forward, ModelSpec, Params};
use crate::objectives::ce;
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ radius in [0,1] pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    /// PGD-10 with random start.
    pub fn train() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: true,
        }
    }

    /// PGD-20 with random start.
    pub fn eval() -> Self {
        Self {
            steps: 20,
            ..Self::train()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite() && self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "attack needs finite epsilon >= 0 and alpha >= 0, got {} and {}",
                self.epsilon, self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T> {
    pub adversarial: Tensor<T>,
    /// `adversarial − x`.
    pub delta: Tensor<T>,
}

/// Gradient of the summed cross-entropy with respect to the input batch.
pub fn input_gradient<T: Scalar>(spec: &ModelSpec, params: &Params<T>, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let input = tape.leaf(x.clone());
    let logits = forward(spec, &mut tape, &vars, input)?;
    let mean = ce(&mut tape, logits, y)?;
    // undo the batch mean so per-sample gradients do not depend on batch size
    let loss = tape.scale(mean, y.len() as f64)?;
    let mut g = tape.backward(loss)?;
    let g = g.take(input);
    if !g.all_finite() {
        return Err(Error::NonFinite { op: "pgd gradient" });
    }
    Ok(g)
}

/// Clamps `v` into the ε-ball around `x` and then into [0,1], repairing any
/// rounding that lands one ulp outside the ball.
fn project<T: Scalar>(x: T, v: f64, eps: f64) -> T {
    let xf = x.f64();
    let lo = (xf - eps).max(0.0);
    let hi = (xf + eps).min(1.0);
    let mut t = T::of(v.clamp(lo, hi));
    while (t.f64() - xf).abs() > eps {
        t = t.step_toward(x);
    }
    t
}

fn check_inputs<T: Scalar>(spec: &ModelSpec, x: &Tensor<T>, y: &[usize]) -> Result<()> {
    if x.rank() != 4 || x.shape()[1..] != spec.input || x.shape()[0] != y.len() {
        return Err(Error::shape(
            "pgd",
            format!("[{},{},{},{}]", y.len(), spec.input[0], spec.input[1], spec.input[2]),
            shape_str(x.shape()),
        ));
    }
    if x.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("pgd input outside [0,1]"));
    }
    Ok(())
}

/// Random start then `steps` signed-gradient ascent steps on CE, each followed
/// by projection onto the ε-ball and the [0,1] box.
pub fn pgd<T: Scalar, R: Rng>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult<T>> {
    pgd_with_workers(spec, params, x, y, cfg, rng, 1)
}

/// [`pgd`] with the batch split across `workers` threads. Samples are
/// independent and the random start is drawn up front, so the result does not
/// depend on the worker count.
pub fn pgd_with_workers<T: Scalar, R: Rng>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
    workers: usize,
) -> Result<AttackResult<T>> {
    cfg.validate()?;
    check_inputs(spec, x, y)?;
    let eps = cfg.epsilon;
    if eps == 0.0 || (cfg.steps == 0 && !cfg.random_start) {
        return Ok(AttackResult {
            adversarial: x.clone(),
            delta: Tensor::zeros(x.shape()),
        });
    }
    let start: Vec<T> = if cfg.random_start {
        x.data()
            .iter()
            .map(|&xi| project(xi, xi.f64() + rng.gen_range(-eps..=eps), eps))
            .collect()
    } else {
        x.data().to_vec()
    };
    let start = Tensor::new(x.shape().to_vec(), start)?;

    let n = y.len();
    let workers = workers.clamp(1, n.max(1));
    let adversarial = if workers == 1 {
        run_steps(spec, params, x, &start, y, cfg)?
    } else {
        let chunk = n.div_ceil(workers);
        let start = &start;
        let parts: Vec<Result<Tensor<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|lo| {
                    let idx: Vec<usize> = (lo..(lo + chunk).min(n)).collect();
                    s.spawn(move || {
                        let xs = x.select_outer(&idx)?;
                        let ss = start.select_outer(&idx)?;
                        run_steps(spec, params, &xs, &ss, &y[idx[0]..idx[0] + idx.len()], cfg)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("pgd worker panicked")).collect()
        });
        Tensor::concat_outer(&parts.into_iter().collect::<Result<Vec<_>>>()?)?
    };
    let delta = adversarial.sub(x)?;
    Ok(AttackResult { adversarial, delta })
}

fn run_steps<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    start: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<T>> {
    let mut cur = start.clone();
    for _ in 0..cfg.steps {
        let g = input_gradient(spec, params, &cur, y)?;
        let next: Vec<T> = cur
            .data()
            .iter()
            .zip(g.data())
            .zip(x.data())
            .map(|((&c, &gi), &xi)| {
                let s = if gi > T::zero() {
                    1.0
                } else if gi < T::zero() {
                    -1.0
                } else {
                    0.0
                };
                project(xi, c.f64() + cfg.alpha * s, cfg.epsilon)
            })
            .collect();
        cur = Tensor::new(x.shape().to_vec(), next)?;
    }
    Ok(cur)
}

/// One frequency of a Fourier corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierBasisSpec {
    pub i: usize,
    pub j: usize,
    /// L2 norm of the added perturbation per channel.
    pub v: f64,
    /// Forces the sign on every channel; `None` draws ±1 per channel.
    pub sign: Option<f64>,
}

/// Whether bin (i, j) is its own conjugate partner.
pub fn self_symmetric(i: usize, j: usize, h: usize, w: usize) -> bool {
    (h - i) % h == i && (w - j) % w == j
}

/// Unit-Frobenius real image whose spectrum is supported on (i, j) and its
/// conjugate bin. Distinct bin pairs get a random phase.
pub fn fourier_basis<T: Scalar, R: Rng>(i: usize, j: usize, h: usize, w: usize, rng: &mut R) -> Result<Tensor<T>> {
    if i >= h || j >= w {
        return Err(Error::invalid(format!("frequency ({i},{j}) outside {h}x{w}")));
    }
    let phase = if self_symmetric(i, j, h, w) {
        0.0
    } else {
        rng.gen_range(0.0..2.0 * PI)
    };
    let raw: Vec<f64> = (0..h * w)
        .map(|k| {
            let (a, b) = (k / w, k % w);
            (2.0 * PI * ((i * a) as f64 / h as f64 + (j * b) as f64 / w as f64) + phase).cos()
        })
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Tensor::from_f64(vec![h, w], &raw.iter().map(|v| v / norm).collect::<Vec<_>>())
}

pub fn draw_sign<R: Rng>(rng: &mut R) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// `clip(x + r·v·U)` with an independent sign and basis per channel.
pub fn fourier_corrupt<T: Scalar, R: Rng>(x: &Tensor<T>, spec: &FourierBasisSpec, rng: &mut R) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::shape("fourier_corrupt", "C x H x W", shape_str(x.shape())));
    };
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let r = match spec.sign {
            Some(s) => s,
            None => draw_sign(rng),
        };
        let u = fourier_basis::<f64, _>(spec.i, spec.j, h, w, rng)?;
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        out.extend(
            plane
                .iter()
                .zip(u.data())
                .map(|(&p, &b)| T::of((p.f64() + r * spec.v * b).clamp(0.0, 1.0))),
        );
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests;
