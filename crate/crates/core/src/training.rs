//! Training loop for every objective, and accuracy evaluation under attacks
//! and frequency filters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_with_workers, AttackConfig};
use crate::autodiff::{Tape, Var};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, build_model, forward, wa_update, ModelSpec, Params, WAState};
use crate::objectives::{ce, mart, sar, spectral_term, trades, ObjectiveConfig, ObjectiveKind};
use crate::rng::{digest64, Streams};
use crate::scalar::Scalar;
use crate::spectral::{apply_filter, FilterSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    /// The first one also starts SAR and weight averaging.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub train_attack: AttackConfig,
    /// Epochs over which the training radius and step grow linearly to their
    /// configured values; 0 trains at full strength from the start.
    #[serde(default)]
    pub attack_warmup: usize,
    pub eval_attack: AttackConfig,
    pub augment: bool,
    /// Validation samples used for the per-epoch metrics; `None` uses all.
    pub eval_samples: Option<usize>,
    pub seed: u64,
    pub workers: usize,
}

impl TrainConfig {
    /// Desk schedule: 30 epochs, decays at 22 and 27.
    pub fn desk(kind: ObjectiveKind, seed: u64) -> Self {
        Self {
            objective: ObjectiveConfig::new(kind),
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![22, 27],
            lr_decay: 0.1,
            train_attack: AttackConfig::train(),
            attack_warmup: 0,
            eval_attack: AttackConfig::eval(),
            augment: false,
            eval_samples: None,
            seed,
            workers: 1,
        }
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("milestones must be strictly increasing"));
        }
        if !(self.lr > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::invalid("optimizer settings must be positive"));
        }
        self.objective.validate(image_side)?;
        self.train_attack.validate()?;
        self.eval_attack.validate()
    }

    /// Epoch at which SAR and weight averaging switch on.
    pub fn regularizer_start(&self) -> usize {
        self.milestones.first().copied().unwrap_or(0)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    /// Training attack in effect during `epoch`.
    pub fn train_attack_at(&self, epoch: usize) -> AttackConfig {
        if epoch >= self.attack_warmup {
            return self.train_attack;
        }
        let f = (epoch + 1) as f64 / self.attack_warmup as f64;
        AttackConfig {
            epsilon: self.train_attack.epsilon * f,
            alpha: self.train_attack.alpha * f,
            ..self.train_attack
        }
    }

    pub fn digest(&self) -> u64 {
        digest64(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Accuracies in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean spectral distance term before scaling by λ; 0 when inactive.
    pub sar_term: f64,
    pub metrics: Metrics,
    /// Weight-averaged branch, once it exists.
    pub wa_metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: String,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub init: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the retained checkpoint; `None` means the initialization.
    pub best_epoch: Option<usize>,
    /// Selection score of the retained checkpoint: robust accuracy for
    /// adversarial objectives, clean accuracy otherwise.
    pub best_score: f64,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// `epoch,lr,loss,clean_acc,robust_acc,sar_term` with one row per epoch.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(["epoch", "lr", "loss", "clean_acc", "robust_acc", "sar_term"])
            .map_err(err)?;
        for r in &self.epochs {
            w.write_record(&[
                r.epoch.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.metrics.clean_acc.to_string(),
                r.metrics.robust_acc.to_string(),
                r.sar_term.to_string(),
            ])
            .map_err(err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub final_params: Params<T>,
    pub best_params: Params<T>,
    pub wa: Option<WAState<T>>,
}

#[derive(Debug)]
pub enum TrainError<T> {
    /// A non-finite loss or parameter; carries the last parameters that were finite.
    Diverged { epoch: usize, last_good: Params<T> },
    Other(Error),
}

impl<T> From<Error> for TrainError<T> {
    fn from(e: Error) -> Self {
        TrainError::Other(e)
    }
}

impl<T> std::fmt::Display for TrainError<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Diverged { epoch, .. } => write!(f, "training diverged in epoch {epoch}"),
            TrainError::Other(e) => e.fmt(f),
        }
    }
}

/// SGD with momentum and coupled weight decay: `g += wd·θ; v = μv + g; θ −= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &Params<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &[Tensor<T>], lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, v), g) in params.tensors_mut().zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let g = gi + wd * *pi;
                *vi = mu * *vi + g;
                *pi = *pi - lr * *vi;
            }
        }
    }
}

/// Batching, seeding and parallelism for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            seed: 0,
            workers: 1,
        }
    }
}

fn clip01<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

/// Low-pass filtered inputs, clipped back into [0,1].
pub fn filter_inputs<T: Scalar>(x: &Tensor<T>, spec: &FilterSpec) -> Result<Tensor<T>> {
    Ok(clip01(apply_filter(x, spec)?))
}

/// Top-1 accuracy in percent.
///
/// `input_filter` is applied to the clean inputs. With an attack, the
/// adversarial input is evaluated; with a `perturbation_filter` as well, the
/// attack's δ is filtered and added back to the clean input.
pub fn evaluate<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    data: &Dataset<T>,
    attack: Option<&AttackConfig>,
    input_filter: Option<&FilterSpec>,
    perturbation_filter: Option<&FilterSpec>,
    opts: &EvalOptions,
) -> Result<f64> {
    let filters = [perturbation_filter.copied()];
    Ok(evaluate_perturbation_filters(spec, params, data, attack, input_filter, &filters, opts)?[0])
}

/// [`evaluate`] for several perturbation filters that share one attack run per
/// batch. Entry `i` equals `evaluate(.., filters[i], opts)` exactly.
pub fn evaluate_perturbation_filters<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    data: &Dataset<T>,
    attack: Option<&AttackConfig>,
    input_filter: Option<&FilterSpec>,
    filters: &[Option<FilterSpec>],
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let [_, h, w] = data.image_shape();
    for f in input_filter.into_iter().chain(filters.iter().flatten()) {
        f.validate(h, w)?;
    }
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let streams = Streams::new(opts.seed).child("eval");
    let mut correct = vec![0usize; filters.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for (b, chunk) in idx.chunks(opts.batch_size.max(1)).enumerate() {
        let (mut x, y) = data.batch(chunk)?;
        if let Some(f) = input_filter {
            x = filter_inputs(&x, f)?;
        }
        let attacked = match attack {
            Some(cfg) => {
                let mut rng = streams.stream(&format!("batch={b}"));
                Some(pgd_with_workers(spec, params, &x, &y, cfg, &mut rng, opts.workers)?)
            }
            None => None,
        };
        for (slot, filter) in correct.iter_mut().zip(filters) {
            let input = match (&attacked, filter) {
                (None, _) => x.clone(),
                (Some(out), Some(f)) if !f.is_identity(h, w) => clip01(x.add(&apply_filter(&out.delta, f)?)?),
                (Some(out), _) => out.adversarial.clone(),
            };
            let pred = argmax_rows(&crate::models::predict_logits(spec, params, &input)?);
            *slot += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
    }
    Ok(correct.into_iter().map(|c| 100.0 * c as f64 / data.len() as f64).collect())
}

fn metrics<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    val: &Dataset<T>,
    cfg: &TrainConfig,
    tag: &str,
) -> Result<Metrics> {
    let opts = EvalOptions {
        batch_size: 256,
        seed: Streams::new(cfg.seed).child(tag).master(),
        workers: cfg.workers,
    };
    Ok(Metrics {
        clean_acc: evaluate(spec, params, val, None, None, None, &opts)?,
        robust_acc: evaluate(spec, params, val, Some(&cfg.eval_attack), None, None, &opts)?,
    })
}

struct StepLoss {
    loss: Var,
    sar_term: Option<Var>,
}

/// Records the batch objective on `tape`.
#[allow(clippy::too_many_arguments)]
fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    theta: &[Var],
    wa: Option<&Params<T>>,
    x: &Tensor<T>,
    x_adv: Option<&Tensor<T>>,
    y: &[usize],
    obj: &ObjectiveConfig,
    sar_on: bool,
) -> Result<StepLoss> {
    use ObjectiveKind::*;
    let xv = tape.constant(x.clone());
    if !obj.kind.adversarial() {
        let logits = forward(spec, tape, theta, xv)?;
        return Ok(StepLoss {
            loss: ce(tape, logits, y)?,
            sar_term: None,
        });
    }
    let adv_in = tape.constant(x_adv.expect("adversarial objective without adversarial batch").clone());
    let adv = forward(spec, tape, theta, adv_in)?;
    let needs_nat = matches!(obj.kind, Trades | TradesSar | TradesSarwa | Mart | MartSar | MartSarwa)
        || (sar_on && !obj.kind.uses_wa());
    let nat = if needs_nat {
        Some(forward(spec, tape, theta, xv)?)
    } else {
        None
    };
    let base = match obj.kind {
        At | AtSar | AtSarwa => ce(tape, adv, y)?,
        Trades | TradesSar | TradesSarwa => trades(tape, nat.unwrap(), adv, y, obj.lambda_reg)?,
        Mart | MartSar | MartSarwa => mart(tape, nat.unwrap(), adv, y, obj.lambda_reg)?,
        Natural | LModel => unreachable!(),
    };
    if !(sar_on && obj.kind.uses_sar()) {
        return Ok(StepLoss {
            loss: base,
            sar_term: None,
        });
    }
    let f1 = if obj.kind.uses_wa() {
        let wa_vars = wa.expect("weight average missing").on_tape(tape, false);
        forward(spec, tape, &wa_vars, xv)?
    } else {
        nat.unwrap()
    };
    if matches!(obj.kind, AtSar | AtSarwa) {
        let loss = sar(tape, f1, adv, y, obj.lambda_sar, obj.metric)?;
        // recompute the bare term for reporting; it is cheap next to the forward passes
        let term = spectral_term(tape, f1, adv, obj.metric)?;
        return Ok(StepLoss {
            loss,
            sar_term: Some(term),
        });
    }
    let term = spectral_term(tape, f1, adv, obj.metric)?;
    let scaled = tape.scale(term, obj.lambda_sar)?;
    Ok(StepLoss {
        loss: tape.add(base, scaled)?,
        sar_term: Some(term),
    })
}

/// Trains from a fresh initialization derived from `cfg.seed`.
pub fn train<T: Scalar>(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    let params = build_model(spec, cfg.seed)?;
    train_from(spec, cfg, train_set, val_set, params)
}

/// Trains starting from `params`.
pub fn train_from<T: Scalar>(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    mut params: Params<T>,
) -> std::result::Result<TrainOutcome<T>, TrainError<T>> {
    let started = Instant::now();
    spec.validate()?;
    params.check(spec)?;
    cfg.validate(spec.input[1].min(spec.input[2]))?;
    if train_set.image_shape() != spec.input || val_set.image_shape() != spec.input {
        return Err(Error::invalid("dataset image shape does not match the model input").into());
    }
    let val = match cfg.eval_samples {
        Some(n) => val_set.take(n)?,
        None => val_set.clone(),
    };
    let streams = Streams::new(cfg.seed);
    let obj = cfg.objective;
    let start = cfg.regularizer_start();
    let lmodel_filter = FilterSpec::lpf(obj.lmodel_bandwidth);

    let init = metrics(spec, &params, &val, cfg, "eval/init")?;
    let score = |m: &Metrics| if obj.kind.adversarial() { m.robust_acc } else { m.clean_acc };
    let mut best = (score(&init), None, params.clone());
    let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut wa: Option<WAState<T>> = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let attack = cfg.train_attack_at(epoch);
        let sar_on = epoch >= start;
        if obj.kind.uses_wa() && epoch == start {
            wa = Some(wa_update(WAState::new(&params, start), &params)?);
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut streams.stream(&format!("shuffle/epoch={epoch}")));
        let (mut loss_sum, mut term_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = train_set.batch(chunk)?;
            if cfg.augment {
                x = augment(&x, &mut streams.stream(&format!("augment/epoch={epoch}/batch={b}")))?;
            }
            if obj.kind == ObjectiveKind::LModel {
                x = filter_inputs(&x, &lmodel_filter)?;
            }
            let x_adv = if obj.kind.adversarial() {
                let mut rng = streams.stream(&format!("pgd/epoch={epoch}/batch={b}"));
                Some(pgd_with_workers(spec, &params, &x, &y, &attack, &mut rng, cfg.workers)?.adversarial)
            } else {
                None
            };
            let mut tape = Tape::new();
            let theta = params.on_tape(&mut tape, true);
            let step = build_loss(
                &mut tape,
                spec,
                &theta,
                wa.as_ref().map(|w| &w.params),
                &x,
                x_adv.as_ref(),
                &y,
                &obj,
                sar_on,
            );
            let step = match step {
                Ok(s) => s,
                Err(Error::NonFinite { .. }) => return Err(diverged(epoch, &best, params)),
                Err(e) => return Err(e.into()),
            };
            let loss = tape.value(step.loss).item()?.f64();
            if !loss.is_finite() {
                return Err(diverged(epoch, &best, params));
            }
            let mut grads = match tape.backward(step.loss) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(diverged(epoch, &best, params)),
                Err(e) => return Err(e.into()),
            };
            let grads: Vec<Tensor<T>> = theta.iter().map(|&v| grads.take(v)).collect();
            let before = params.clone();
            sgd.step(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(diverged(epoch, &best, before));
            }
            loss_sum += loss;
            term_sum += step.sar_term.map_or(0.0, |t| tape.value(t).data()[0].f64());
            batches += 1;
        }
        if let Some(state) = wa.take() {
            // the snapshot taken on entering the start epoch already counts as one absorption
            wa = Some(wa_update(state, &params)?);
        }
        let m = metrics(spec, &params, &val, cfg, &format!("eval/epoch={epoch}"))?;
        let wa_metrics = match &wa {
            Some(state) => Some(metrics(spec, &state.params, &val, cfg, &format!("eval-wa/epoch={epoch}"))?),
            None => None,
        };
        if score(&m) >= best.0 {
            best = (score(&m), Some(epoch), params.clone());
        }
        records.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            sar_term: term_sum / batches.max(1) as f64,
            metrics: m,
            wa_metrics,
        });
    }

    let report = TrainReport {
        objective: obj.kind.to_string(),
        spec: spec.clone(),
        config: cfg.clone(),
        init,
        epochs: records,
        best_epoch: best.1,
        best_score: best.0,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        report,
        final_params: params,
        best_params: best.2,
        wa,
    })
}

fn diverged<T: Scalar>(epoch: usize, best: &(f64, Option<usize>, Params<T>), current: Params<T>) -> TrainError<T> {
    let last_good = if current.all_finite() { current } else { best.2.clone() };
    TrainError::Diverged { epoch, last_good }
}
