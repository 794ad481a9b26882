//! Classification and robustness losses over `[N, C]` logits.
//!
//! Each loss has a tape form, for training, and a value form that evaluates
//! the same graph on constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{tape_spectral_distance, DistanceMetric};
use crate::tensor::{shape_str, Tensor};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which training objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Natural,
    LModel,
    At,
    AtSar,
    AtSarwa,
    Trades,
    TradesSar,
    TradesSarwa,
    Mart,
    MartSar,
    MartSarwa,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 11] = [
        ObjectiveKind::Natural,
        ObjectiveKind::LModel,
        ObjectiveKind::At,
        ObjectiveKind::AtSar,
        ObjectiveKind::AtSarwa,
        ObjectiveKind::Trades,
        ObjectiveKind::TradesSar,
        ObjectiveKind::TradesSarwa,
        ObjectiveKind::Mart,
        ObjectiveKind::MartSar,
        ObjectiveKind::MartSarwa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Natural => "natural",
            ObjectiveKind::LModel => "lmodel",
            ObjectiveKind::At => "at",
            ObjectiveKind::AtSar => "sar",
            ObjectiveKind::AtSarwa => "sarwa",
            ObjectiveKind::Trades => "trades",
            ObjectiveKind::TradesSar => "trades-sar",
            ObjectiveKind::TradesSarwa => "trades-sarwa",
            ObjectiveKind::Mart => "mart",
            ObjectiveKind::MartSar => "mart-sar",
            ObjectiveKind::MartSarwa => "mart-sarwa",
        }
    }

    pub fn adversarial(self) -> bool {
        !matches!(self, ObjectiveKind::Natural | ObjectiveKind::LModel)
    }

    pub fn uses_sar(self) -> bool {
        matches!(
            self,
            ObjectiveKind::AtSar
                | ObjectiveKind::AtSarwa
                | ObjectiveKind::TradesSar
                | ObjectiveKind::TradesSarwa
                | ObjectiveKind::MartSar
                | ObjectiveKind::MartSarwa
        )
    }

    pub fn uses_wa(self) -> bool {
        matches!(
            self,
            ObjectiveKind::AtSarwa | ObjectiveKind::TradesSarwa | ObjectiveKind::MartSarwa
        )
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '+'], "-");
        let alias = match norm.as_str() {
            "l-model" => "lmodel",
            "at-sar" => "sar",
            "at-sarwa" => "sarwa",
            other => other,
        };
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::invalid(format!("unknown objective {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub lambda_sar: f64,
    /// TRADES / MART coefficient.
    pub lambda_reg: f64,
    pub metric: DistanceMetric,
    /// Input low-pass bandwidth for the L-model.
    pub lmodel_bandwidth: usize,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            lambda_sar: if kind.uses_wa() { 0.15 } else { 0.1 },
            lambda_reg: 6.0,
            metric: DistanceMetric::L1,
            lmodel_bandwidth: 8,
        }
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if !(self.lambda_sar >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::invalid("loss coefficients must be non-negative"));
        }
        if self.kind == ObjectiveKind::LModel && self.lmodel_bandwidth > image_side {
            return Err(Error::invalid(format!(
                "L-model bandwidth {} exceeds image side {image_side}",
                self.lmodel_bandwidth
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy.
pub fn ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, y)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

/// Per-row `KL(softmax(p) ‖ softmax(q))`, shape `[N]`.
pub fn kl_rows<T: Scalar>(tape: &mut Tape<T>, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (ps, qs) = (tape.value(p_logits).shape(), tape.value(q_logits).shape());
    if ps != qs || ps.len() != 2 {
        return Err(Error::shape("kl", shape_str(ps), shape_str(qs)));
    }
    let lp = tape.log_softmax(p_logits)?;
    let lq = tape.log_softmax(q_logits)?;
    let p = tape.exp(lp)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    tape.sum_rows(terms)
}

pub fn kl<T: Scalar>(tape: &mut Tape<T>, p_logits: Var, q_logits: Var) -> Result<Var> {
    let rows = kl_rows(tape, p_logits, q_logits)?;
    tape.mean(rows)
}

/// Batch mean of the spectral distance between two logit sets.
pub fn spectral_term<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, metric: DistanceMetric) -> Result<Var> {
    let (a, b) = (tape.value(f1).shape(), tape.value(f2).shape());
    if a != b || a.len() != 2 {
        return Err(Error::shape("sar", shape_str(a), shape_str(b)));
    }
    let d = tape_spectral_distance(tape, f1, f2, metric)?;
    tape.mean(d)
}

fn add_weighted<T: Scalar>(tape: &mut Tape<T>, base: Var, term: Var, lambda: f64) -> Result<Var> {
    let scaled = tape.scale(term, lambda)?;
    tape.add(base, scaled)
}

/// `CE(f2_adv, y) + λ · mean_i Dis(F(f1_i), F(f2_adv_i))`.
///
/// For the weight-averaged variant pass `f1` from constant parameters, or
/// through [`Tape::detach`].
pub fn sar<T: Scalar>(
    tape: &mut Tape<T>,
    f1: Var,
    f2_adv: Var,
    y: &[usize],
    lambda: f64,
    metric: DistanceMetric,
) -> Result<Var> {
    let base = ce(tape, f2_adv, y)?;
    let term = spectral_term(tape, f1, f2_adv, metric)?;
    add_weighted(tape, base, term, lambda)
}

/// `CE(nat, y) + λ · KL(nat ‖ adv)`.
pub fn trades<T: Scalar>(tape: &mut Tape<T>, nat: Var, adv: Var, y: &[usize], lambda: f64) -> Result<Var> {
    let base = ce(tape, nat, y)?;
    let reg = kl(tape, nat, adv)?;
    add_weighted(tape, base, reg, lambda)
}

/// Per-row `−log p_y − log(1 − max_{c≠y} p_c)` on adversarial logits.
pub fn mart_bce_rows<T: Scalar>(tape: &mut Tape<T>, adv: Var, y: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(adv)?;
    let nll = tape.gather(lp, y)?;
    let p = tape.exp(lp)?;
    let other = tape.max_except(p, y)?;
    let neg = tape.neg(other)?;
    let rest = tape.add_scalar(neg, 1.0)?;
    let log_rest = tape.log_clamped(rest, PROB_FLOOR)?;
    let sum = tape.add(nll, log_rest)?;
    tape.neg(sum)
}

/// `mean(BCE(adv, y)) + λ · mean(KL(nat ‖ adv) · (1 − p_y(nat)))`.
pub fn mart<T: Scalar>(tape: &mut Tape<T>, nat: Var, adv: Var, y: &[usize], lambda: f64) -> Result<Var> {
    let (a, b) = (tape.value(nat).shape(), tape.value(adv).shape());
    if a != b {
        return Err(Error::shape("mart", shape_str(a), shape_str(b)));
    }
    let bce_rows = mart_bce_rows(tape, adv, y)?;
    let bce = tape.mean(bce_rows)?;
    let kl_r = kl_rows(tape, nat, adv)?;
    let lp_nat = tape.log_softmax(nat)?;
    let p_nat = tape.exp(lp_nat)?;
    let p_true = tape.gather(p_nat, y)?;
    let neg = tape.neg(p_true)?;
    let weight = tape.add_scalar(neg, 1.0)?;
    let weighted = tape.mul(kl_r, weight)?;
    let reg = tape.mean(weighted)?;
    add_weighted(tape, bce, reg, lambda)
}

fn on_constants<T: Scalar>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<T> {
    on_constants(&[logits], |t, v| ce(t, v[0], y))
}

pub fn kl_divergence<T: Scalar>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<T> {
    on_constants(&[p_logits, q_logits], |t, v| kl(t, v[0], v[1]))
}

pub fn sar_loss<T: Scalar>(
    f1: &Tensor<T>,
    f2_adv: &Tensor<T>,
    y: &[usize],
    lambda: f64,
    metric: DistanceMetric,
) -> Result<T> {
    on_constants(&[f1, f2_adv], |t, v| sar(t, v[0], v[1], y, lambda, metric))
}

pub fn trades_loss<T: Scalar>(nat: &Tensor<T>, adv: &Tensor<T>, y: &[usize], lambda: f64) -> Result<T> {
    on_constants(&[nat, adv], |t, v| trades(t, v[0], v[1], y, lambda))
}

pub fn mart_loss<T: Scalar>(nat: &Tensor<T>, adv: &Tensor<T>, y: &[usize], lambda: f64) -> Result<T> {
    on_constants(&[nat, adv], |t, v| mart(t, v[0], v[1], y, lambda))
}

#[cfg(test)]
mod tests;
