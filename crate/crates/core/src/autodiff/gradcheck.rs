use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Analytic-vs-numeric comparison for one differentiable leaf.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafReport {
    pub leaf: usize,
    pub name: Option<String>,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.within_tolerance)
    }

    pub fn failing(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| !l.within_tolerance)
    }
}

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `backward` against central finite differences for every
/// differentiable leaf recorded before `loss`.
///
/// The tape is replayed with each leaf element nudged by `±FD_STEP`, so the
/// check costs two forward passes per scalar parameter. Meant for 64-bit tapes.
pub fn grad_check<T: Scalar>(tape: &Tape<T>, loss: Var, tolerance: f64) -> Result<GradCheckReport> {
    let grads = tape.backward(loss)?;
    let mut work = tape.clone();
    let h = FD_STEP;
    let mut leaves = Vec::new();
    for i in 0..=loss.index() {
        let var = Var(i);
        let Some((true, name)) = tape.leaf_info(var) else {
            continue;
        };
        let analytic = grads.get(var);
        let original = tape.value(var).clone();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for j in 0..original.len() {
            let probe = |delta: f64, work: &mut Tape<T>| -> Result<f64> {
                let mut data = original.data().to_vec();
                data[j] = T::of(data[j].f64() + delta);
                work.set_leaf_and_recompute(var, crate::Tensor::new(original.shape().to_vec(), data)?)?;
                Ok(work.value(loss).data()[0].f64())
            };
            let plus = probe(h, &mut work)?;
            let minus = probe(-h, &mut work)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j].f64();
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        work.set_leaf_and_recompute(var, original.clone())?;
        leaves.push(LeafReport {
            leaf: i,
            name: name.map(str::to_owned),
            shape: original.shape().to_vec(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            within_tolerance: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        step: h,
        leaves,
    })
}
