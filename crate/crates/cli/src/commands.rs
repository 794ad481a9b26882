//! Subcommand bodies. Each returns a one-line summary for stdout.

use std::path::{Path, PathBuf};

use serde_json::json;

use srl_core::analysis::{
    band_aggressiveness, fourier_heatmap, low_frequency_ratio, lpf_accuracy_sweep, perturbation_spectrum,
    render_heatmap, render_spectrum, HeatMapConfig, NamedModel, SweepResult,
};
use srl_core::audit::{audit, AUDIT_TOLERANCE};
use srl_core::checkpoint::{encode, load_checkpoint, peek_dtype, write_atomic, Checkpoint};
use srl_core::data::{load_cifar10, split, synth_freq_dataset_with, Dataset, Split, SynthConfig};
use srl_core::models::ModelSpec;
use srl_core::training::{evaluate, train, TrainError};
use srl_core::{DType, Scalar};

use crate::config::{resolve, DatasetKind, Precision, Settings, SynthPreset};
use crate::{CliError, Command};

const SYNTH_TRAIN: usize = 640;
const SYNTH_TEST: usize = 256;

/// Outputs held in memory until the whole command has succeeded.
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn add_json<S: serde::Serialize>(&mut self, name: &str, value: &S) {
        let text = serde_json::to_string_pretty(value).expect("artifact serializes");
        self.add(name, text);
    }

    fn add_checkpoint<T: Scalar>(&mut self, name: &str, ckpt: &Checkpoint<T>) -> Result<(), CliError> {
        self.add(name, encode(&ckpt.to_entries()?)?);
        Ok(())
    }

    /// Writes every file, then `run.json`.
    fn commit(self, s: &Settings) -> Result<(), CliError> {
        std::fs::create_dir_all(&s.out)
            .map_err(|e| CliError::runtime("io", format!("{}: {e}", s.out.display())))?;
        for (name, bytes) in &self.files {
            write_atomic(&s.out.join(name), bytes)?;
        }
        write_atomic(&s.out.join("run.json"), s.to_json().as_bytes())?;
        Ok(())
    }
}

pub fn execute(command: &Command) -> Result<String, CliError> {
    let s = resolve(command.name(), command.overrides())?;
    match command {
        Command::Gradcheck(_) => gradcheck(&s),
        Command::Train(_) => match s.precision {
            Precision::F32 => run_train::<f32>(&s),
            Precision::F64 => run_train::<f64>(&s),
        },
        _ => {
            let first = checkpoint_paths(&s)?[0].clone();
            match peek_dtype(&first)? {
                DType::F32 => analyse::<f32>(command, &s),
                DType::F64 => analyse::<f64>(command, &s),
            }
        }
    }
}

fn checkpoint_paths(s: &Settings) -> Result<&[PathBuf], CliError> {
    if s.checkpoint.is_empty() {
        return Err(CliError::invalid_config(format!("`{}` needs --checkpoint", s.command)));
    }
    for p in &s.checkpoint {
        if !p.is_file() {
            return Err(CliError {
                code: 4,
                kind: "missing_checkpoint",
                msg: format!("checkpoint {} not found", p.display()),
            });
        }
    }
    Ok(&s.checkpoint)
}

fn single_checkpoint(s: &Settings) -> Result<&Path, CliError> {
    match checkpoint_paths(s)? {
        [one] => Ok(one),
        many => Err(CliError::invalid_config(format!(
            "`{}` takes one checkpoint, got {}",
            s.command,
            many.len()
        ))),
    }
}

fn synth_config(preset: SynthPreset) -> SynthConfig {
    match preset {
        SynthPreset::Basic => SynthConfig::default(),
        SynthPreset::Benchmark => SynthConfig::benchmark(),
    }
}

/// Training and test sets named by the settings.
fn load_data<T: Scalar>(s: &Settings) -> Result<(Dataset<T>, Dataset<T>), CliError> {
    match s.dataset {
        DatasetKind::Synth => {
            let cfg = synth_config(s.synth);
            let base = s.data_seed.wrapping_mul(2);
            let train = synth_freq_dataset_with(s.n_train.unwrap_or(SYNTH_TRAIN), s.size, base, cfg)?;
            let mut test = synth_freq_dataset_with(s.n_test.unwrap_or(SYNTH_TEST), s.size, base + 1, cfg)?;
            test.split = Split::Test;
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let dir = s.data_dir.as_ref().ok_or_else(|| {
                CliError::invalid_config("cifar10 needs --data-dir or SRL_DATA_DIR")
            })?;
            if !dir.is_dir() {
                return Err(CliError::missing(format!("data directory {} not found", dir.display())));
            }
            let (mut train, mut test) = load_cifar10::<T>(dir)?;
            if let Some(n) = s.n_train {
                train = train.take(n.min(train.len()))?;
            }
            if let Some(n) = s.n_test {
                test = test.take(n.min(test.len()))?;
            }
            Ok((train, test))
        }
    }
}

fn test_set<T: Scalar>(s: &Settings, spec: &ModelSpec) -> Result<Dataset<T>, CliError> {
    let (_, test) = load_data::<T>(s)?;
    if test.image_shape() != spec.input {
        return Err(CliError::invalid_config(format!(
            "checkpoint expects {:?} images, dataset has {:?}",
            spec.input,
            test.image_shape()
        )));
    }
    Ok(test)
}

fn gradcheck(s: &Settings) -> Result<String, CliError> {
    let report = audit(s.seed, AUDIT_TOLERANCE)?;
    let mut out = Artifacts::new();
    out.add_json("gradcheck.json", &report);
    out.commit(s)?;
    let summary = format!(
        "gradcheck seed={} cases={} max_rel_error={:.3e}",
        s.seed,
        report.cases.len(),
        report.max_rel_error()
    );
    if report.passed() {
        Ok(summary)
    } else {
        let failing: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::runtime("gradcheck", format!("failing cases: {}", failing.join(","))))
    }
}

fn run_train<T: Scalar>(s: &Settings) -> Result<String, CliError> {
    let (full, test) = load_data::<T>(s)?;
    let [c, h, w] = full.image_shape();
    if h != w {
        return Err(CliError::invalid_config(format!("images must be square, got {h}x{w}")));
    }
    let cfg = s.train_config(h)?;
    let (train_set, val_set) = split(&full, s.seed)?;
    let spec = ModelSpec::desk([c, h, w], full.classes);
    let digest = cfg.digest();
    let ckpt = |epoch: usize, params| Checkpoint {
        spec: spec.clone(),
        epoch: epoch as u64,
        params,
        seed: s.seed,
        config_digest: digest,
    };
    let outcome = match train(&spec, &cfg, &train_set, &val_set) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, last_good }) => {
            let mut out = Artifacts::new();
            out.add_checkpoint("last_good.ckpt", &ckpt(epoch, last_good))?;
            out.commit(s)?;
            return Err(CliError::runtime("diverged", format!("non-finite loss in epoch {epoch}")));
        }
        Err(TrainError::Other(e)) => return Err(e.into()),
    };
    let opts = s.eval_options();
    let attack = s.eval_attack();
    let clean = evaluate(&spec, &outcome.best_params, &test, None, None, None, &opts)?;
    let robust = evaluate(&spec, &outcome.best_params, &test, Some(&attack), None, None, &opts)?;

    let mut out = Artifacts::new();
    out.add("report.json", outcome.report.to_json()?);
    out.add("epochs.csv", outcome.report.to_csv()?);
    let best_epoch = outcome.report.best_epoch.map_or(0, |e| e + 1);
    out.add_checkpoint("best.ckpt", &ckpt(best_epoch, outcome.best_params.clone()))?;
    out.add_checkpoint("final.ckpt", &ckpt(cfg.epochs, outcome.final_params.clone()))?;
    if let Some(wa) = &outcome.wa {
        out.add_checkpoint("wa.ckpt", &ckpt(cfg.epochs, wa.params.clone()))?;
    }
    out.add_json(
        "test.json",
        &json!({ "checkpoint": "best.ckpt", "clean_acc": clean, "robust_acc": robust, "attack": attack }),
    );
    out.commit(s)?;
    Ok(format!(
        "train objective={} best_epoch={} test_clean={clean:.2} test_robust={robust:.2}",
        outcome.report.objective, best_epoch
    ))
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
}

fn load_model<T: Scalar>(path: &Path) -> Result<NamedModel<T>, CliError> {
    let ckpt = load_checkpoint::<T>(path)?;
    Ok(NamedModel { name: model_name(path), spec: ckpt.spec, params: ckpt.params })
}

fn default_bandwidths(side: usize) -> Vec<usize> {
    let step = (side / 8).max(1);
    (0..=side).step_by(step).collect()
}

fn sweep_artifacts(out: &mut Artifacts, name: &str, r: &SweepResult) -> Result<(), CliError> {
    out.add(&format!("{name}.csv"), r.to_csv()?);
    out.add_json(&format!("{name}.json"), r);
    Ok(())
}

fn analyse<T: Scalar>(command: &Command, s: &Settings) -> Result<String, CliError> {
    let opts = s.eval_options();
    let attack = s.eval_attack();
    let mut out = Artifacts::new();
    let summary = match command {
        Command::Sweep(_) => {
            let models = checkpoint_paths(s)?.iter().map(|p| load_model::<T>(p)).collect::<Result<Vec<_>, _>>()?;
            if models.iter().any(|m| m.spec.input != models[0].spec.input) {
                return Err(CliError::invalid_config("sweep checkpoints disagree on input shape"));
            }
            let data = test_set::<T>(s, &models[0].spec)?;
            let bw = if s.bandwidths.is_empty() { default_bandwidths(data.image_shape()[1]) } else { s.bandwidths.clone() };
            let r = lpf_accuracy_sweep(&models, &data, &s.dataset.to_string(), &bw, &attack, &opts)?;
            sweep_artifacts(&mut out, "sweep", &r)?;
            format!("sweep models={} bandwidths={}", models.len(), bw.len())
        }
        Command::Aggressiveness(_) => {
            let model = load_model::<T>(single_checkpoint(s)?)?;
            let data = test_set::<T>(s, &model.spec)?;
            let bw = if s.bandwidths.is_empty() { default_bandwidths(data.image_shape()[1]) } else { s.bandwidths.clone() };
            let r = band_aggressiveness(&model, &data, &s.dataset.to_string(), &attack, &bw, &opts)?;
            sweep_artifacts(&mut out, "aggressiveness", &r)?;
            format!("aggressiveness model={} bandwidths={}", model.name, bw.len())
        }
        Command::Attack(_) => {
            let model = load_model::<T>(single_checkpoint(s)?)?;
            let data = test_set::<T>(s, &model.spec)?;
            let clean = evaluate(&model.spec, &model.params, &data, None, None, None, &opts)?;
            let robust = evaluate(&model.spec, &model.params, &data, Some(&attack), None, None, &opts)?;
            let filter = s.perturbation_filter();
            let filtered = filter
                .as_ref()
                .map(|f| evaluate(&model.spec, &model.params, &data, Some(&attack), None, Some(f), &opts))
                .transpose()?;
            out.add_json(
                "attack.json",
                &json!({
                    "model": model.name,
                    "samples": data.len(),
                    "attack": attack,
                    "clean_acc": clean,
                    "robust_acc": robust,
                    "perturbation_filter": filter,
                    "filtered_acc": filtered,
                }),
            );
            format!("attack model={} clean={clean:.2} robust={robust:.2}", model.name)
        }
        Command::Spectrum(_) => {
            let model = load_model::<T>(single_checkpoint(s)?)?;
            let data = test_set::<T>(s, &model.spec)?;
            let map = perturbation_spectrum(&model.spec, &model.params, &data, &attack, s.samples, &opts)?;
            let ratio = low_frequency_ratio(&map)?;
            let (pgm, sidecar) = render_spectrum(&map)?;
            out.add("spectrum.pgm", pgm);
            out.add("spectrum.json", sidecar);
            format!("spectrum model={} low_frequency_ratio={ratio:.4}", model.name)
        }
        Command::Heatmap(_) => {
            let model = load_model::<T>(single_checkpoint(s)?)?;
            let data = test_set::<T>(s, &model.spec)?;
            let cfg = HeatMapConfig { v: s.v, samples: s.samples, stride: s.stride, seed: s.seed };
            let map = fourier_heatmap(&model, &data, &cfg)?;
            let (pgm, sidecar) = render_heatmap(&map)?;
            out.add("heatmap.pgm", pgm);
            out.add("heatmap.json", sidecar);
            format!("heatmap model={} clean_error={:.2} mean_error={:.2}", model.name, map.clean_error, map.mean_error())
        }
        Command::Train(_) | Command::Gradcheck(_) => unreachable!("handled in execute"),
    };
    out.commit(s)?;
    Ok(summary)
}
