//! Flat run configuration: defaults, then a config file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};

use srl_core::attacks::AttackConfig;
use srl_core::objectives::{ObjectiveConfig, ObjectiveKind};
use srl_core::spectral::{DistanceMetric, FilterSpec};
use srl_core::training::{EvalOptions, TrainConfig};

use crate::CliError;

/// A real number written either plainly or as a ratio such as `8/255`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frac(pub f64);

impl FromStr for Frac {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("`{s}` is not a number or a ratio like 8/255");
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                a / b
            }
            None => s.trim().parse().map_err(|_| bad())?,
        };
        if v.is_finite() {
            Ok(Frac(v))
        } else {
            Err(bad())
        }
    }
}

impl<'de> Deserialize<'de> for Frac {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Frac(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Comma-separated in flags, an array or a string in config files.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad list element `{}`", p.trim())))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

impl<'de, T: FromStr + Deserialize<'de>> Deserialize<'de> for List<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Items(Vec<T>),
            Text(String),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Items(v) => Ok(List(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synth,
    Cifar10,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthPreset {
    Basic,
    Benchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FilterKindArg {
    Lpf,
    Hpf,
}

/// Every settable key. Used both as the flag set and as the config file schema.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Flat TOML file (or a run.json echo); flags override its keys.
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Subcommand recorded in a run.json echo; must match when present.
    #[arg(skip)]
    pub command: Option<String>,

    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,

    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    #[arg(long, value_enum)]
    pub synth: Option<SynthPreset>,
    /// CIFAR-10 binary directory; defaults to $SRL_DATA_DIR.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Synthetic image side.
    #[arg(long)]
    pub size: Option<usize>,

    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_name = "LIST")]
    pub milestones: Option<List<usize>>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub attack_warmup: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    /// Validation samples scored per epoch; 0 uses the whole split.
    #[arg(long)]
    pub eval_samples: Option<usize>,

    #[arg(long)]
    pub epsilon: Option<Frac>,
    #[arg(long)]
    pub alpha: Option<Frac>,
    /// Evaluation PGD steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training PGD steps.
    #[arg(long)]
    pub train_steps: Option<usize>,

    /// Spectral alignment coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// TRADES / MART coefficient.
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub lmodel_bandwidth: Option<usize>,

    /// Checkpoint to analyse; repeat for several models.
    #[arg(long, value_name = "PATH", action = clap::ArgAction::Append)]
    #[serde(default, deserialize_with = "de_paths")]
    pub checkpoint: Option<Vec<PathBuf>>,
    #[arg(long, value_name = "LIST")]
    pub bandwidths: Option<List<usize>>,
    /// Perturbation filter bandwidth for `attack`.
    #[arg(long)]
    pub bandwidth: Option<usize>,
    #[arg(long, value_enum)]
    pub filter: Option<FilterKindArg>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Heat map corruption norm.
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub eval_batch: Option<usize>,
}

fn de_paths<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<PathBuf>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(PathBuf),
        Many(Vec<PathBuf>),
    }
    Ok(Option::<Raw>::deserialize(d)?.map(|r| match r {
        Raw::One(p) => vec![p],
        Raw::Many(v) => v,
    }))
}

/// Fully resolved configuration, echoed as run.json.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub precision: Precision,
    pub dataset: DatasetKind,
    pub synth: SynthPreset,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub size: usize,
    pub objective: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub attack_warmup: usize,
    pub augment: bool,
    pub eval_samples: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub train_steps: usize,
    pub lambda: Option<f64>,
    pub lambda_reg: f64,
    pub metric: DistanceMetric,
    pub lmodel_bandwidth: Option<usize>,
    pub checkpoint: Vec<PathBuf>,
    pub bandwidths: Vec<usize>,
    pub bandwidth: Option<usize>,
    pub filter: FilterKindArg,
    pub samples: usize,
    pub v: f64,
    pub stride: usize,
    pub eval_batch: usize,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::invalid_config(msg)
}

/// Reads a flat key-value file. `.json` files are read as a run.json echo.
pub fn read_config_file(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::missing(format!("config file {} not found", path.display()))
        } else {
            CliError::runtime("io", format!("{}: {e}", path.display()))
        }
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if let Some(obj) = value.as_object_mut() {
            obj.retain(|_, v| !v.is_null());
        }
        return serde_json::from_value(value).map_err(|e| invalid(format!("{}: {e}", path.display())));
    }
    let table: toml::Table = text.parse().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(invalid(format!("{}: `{key}` is a table; the config must be flat", path.display())));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

macro_rules! pick {
    ($flags:ident, $file:ident, $field:ident) => {
        $flags.$field.clone().or_else(|| $file.$field.clone())
    };
}

/// Layers flags over the config file over built-in defaults.
pub fn resolve(command: &str, flags: &Overrides) -> Result<Settings, CliError> {
    let file = match &flags.config {
        Some(p) => read_config_file(p)?,
        None => Overrides::default(),
    };
    if let Some(c) = &file.command {
        if c != command {
            return Err(invalid(format!("config was written by `{c}`, not `{command}`")));
        }
    }
    let data_dir = pick!(flags, file, data_dir).or_else(|| std::env::var_os("SRL_DATA_DIR").map(PathBuf::from));
    let s = Settings {
        command: command.to_string(),
        seed: pick!(flags, file, seed).unwrap_or(0),
        out: pick!(flags, file, out).unwrap_or_else(|| PathBuf::from("out")),
        workers: pick!(flags, file, workers).unwrap_or(1),
        precision: pick!(flags, file, precision).unwrap_or(Precision::F32),
        dataset: pick!(flags, file, dataset).unwrap_or(DatasetKind::Synth),
        synth: pick!(flags, file, synth).unwrap_or(SynthPreset::Benchmark),
        data_dir,
        data_seed: pick!(flags, file, data_seed).unwrap_or(0),
        n_train: pick!(flags, file, n_train),
        n_test: pick!(flags, file, n_test),
        size: pick!(flags, file, size).unwrap_or(16),
        objective: pick!(flags, file, objective).unwrap_or_else(|| "at".into()),
        epochs: pick!(flags, file, epochs).unwrap_or(30),
        batch_size: pick!(flags, file, batch_size).unwrap_or(32),
        lr: pick!(flags, file, lr).unwrap_or(0.03),
        momentum: pick!(flags, file, momentum).unwrap_or(0.9),
        weight_decay: pick!(flags, file, weight_decay).unwrap_or(5e-4),
        milestones: pick!(flags, file, milestones).map(|l| l.0).unwrap_or_else(|| vec![22, 27]),
        lr_decay: pick!(flags, file, lr_decay).unwrap_or(0.1),
        attack_warmup: pick!(flags, file, attack_warmup).unwrap_or(10),
        augment: pick!(flags, file, augment).unwrap_or(false),
        eval_samples: pick!(flags, file, eval_samples).unwrap_or(64),
        epsilon: pick!(flags, file, epsilon).map(|f| f.0).unwrap_or(8.0 / 255.0),
        alpha: pick!(flags, file, alpha).map(|f| f.0).unwrap_or(2.0 / 255.0),
        steps: pick!(flags, file, steps).unwrap_or(20),
        train_steps: pick!(flags, file, train_steps).unwrap_or(10),
        lambda: pick!(flags, file, lambda),
        lambda_reg: pick!(flags, file, lambda_reg).unwrap_or(6.0),
        metric: pick!(flags, file, metric)
            .map(|m| m.parse::<DistanceMetric>())
            .transpose()
            .map_err(|e| invalid(e.to_string()))?
            .unwrap_or(DistanceMetric::L1),
        lmodel_bandwidth: pick!(flags, file, lmodel_bandwidth),
        checkpoint: pick!(flags, file, checkpoint).unwrap_or_default(),
        bandwidths: pick!(flags, file, bandwidths).map(|l| l.0).unwrap_or_default(),
        bandwidth: pick!(flags, file, bandwidth),
        filter: pick!(flags, file, filter).unwrap_or(FilterKindArg::Lpf),
        samples: pick!(flags, file, samples).unwrap_or(256),
        v: pick!(flags, file, v).unwrap_or(0.06),
        stride: pick!(flags, file, stride).unwrap_or(1),
        eval_batch: pick!(flags, file, eval_batch).unwrap_or(256),
    };
    s.validate()?;
    Ok(s)
}

impl Settings {
    pub fn validate(&self) -> Result<(), CliError> {
        self.objective_kind()?;
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        if self.eval_batch == 0 {
            return Err(invalid("eval_batch must be at least 1"));
        }
        if self.dataset == DatasetKind::Synth {
            if self.size < 4 || !self.size.is_power_of_two() {
                return Err(invalid(format!("size {} must be a power of two >= 4", self.size)));
            }
            for (name, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
                if n.is_some_and(|n| n == 0 || n % 2 != 0) {
                    return Err(invalid(format!("{name} must be even and positive")));
                }
            }
        }
        self.eval_attack().validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(invalid("lambda must be finite and >= 0"));
            }
        }
        if !self.bandwidths.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("bandwidths must be strictly increasing"));
        }
        Ok(())
    }

    pub fn objective_kind(&self) -> Result<ObjectiveKind, CliError> {
        self.objective.parse().map_err(|e: srl_core::Error| invalid(e.to_string()))
    }

    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            random_start: true,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.eval_batch,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn perturbation_filter(&self) -> Option<FilterSpec> {
        self.bandwidth.map(|k| match self.filter {
            FilterKindArg::Lpf => FilterSpec::lpf(k),
            FilterKindArg::Hpf => FilterSpec::hpf(k),
        })
    }

    pub fn train_config(&self, image_side: usize) -> Result<TrainConfig, CliError> {
        let kind = self.objective_kind()?;
        let mut objective = ObjectiveConfig::new(kind);
        if let Some(l) = self.lambda {
            objective.lambda_sar = l;
        }
        objective.lambda_reg = self.lambda_reg;
        objective.metric = self.metric;
        objective.lmodel_bandwidth = self.lmodel_bandwidth.unwrap_or(image_side / 2);
        let cfg = TrainConfig {
            objective,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            lr_decay: self.lr_decay,
            train_attack: AttackConfig {
                steps: self.train_steps,
                ..self.eval_attack()
            },
            attack_warmup: self.attack_warmup,
            eval_attack: self.eval_attack(),
            augment: self.augment,
            eval_samples: (self.eval_samples > 0).then_some(self.eval_samples),
            seed: self.seed,
            workers: self.workers,
        };
        cfg.validate(image_side).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("settings serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_parse() {
        assert_eq!("8/255".parse::<Frac>().unwrap().0, 8.0 / 255.0);
        assert_eq!("0.5".parse::<Frac>().unwrap().0, 0.5);
        assert!("8/0".parse::<Frac>().is_err());
        assert!("eight".parse::<Frac>().is_err());
    }

    #[test]
    fn lists_parse() {
        assert_eq!("4, 8,16".parse::<List<usize>>().unwrap().0, vec![4, 8, 16]);
        assert!("4,x".parse::<List<usize>>().is_err());
        assert!("".parse::<List<usize>>().unwrap().0.is_empty());
    }

    #[test]
    fn defaults_resolve_and_validate() {
        let s = resolve("train", &Overrides::default()).unwrap();
        assert_eq!(s.epsilon, 8.0 / 255.0);
        assert_eq!(s.milestones, vec![22, 27]);
        let cfg = s.train_config(16).unwrap();
        assert_eq!(cfg.objective.lmodel_bandwidth, 8);
        assert_eq!(cfg.train_attack.steps, 10);
        assert_eq!(cfg.eval_attack.steps, 20);
    }

    #[test]
    fn flags_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\nepsilon = \"4/255\"\nbandwidths = [2, 4]\nlr = 0.5\n").unwrap();
        let flags = Overrides {
            config: Some(path),
            lr: Some(0.01),
            ..Default::default()
        };
        let s = resolve("sweep", &flags).unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.epsilon, 4.0 / 255.0);
        assert_eq!(s.bandwidths, vec![2, 4]);
        assert_eq!(s.lr, 0.01);
    }

    #[test]
    fn nested_or_unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for text in ["[train]\nlr = 1\n", "learning_rate = 1\n"] {
            let path = dir.path().join("bad.toml");
            std::fs::write(&path, text).unwrap();
            let flags = Overrides {
                config: Some(path),
                ..Default::default()
            };
            assert_eq!(resolve("train", &flags).unwrap_err().code, 3);
        }
    }

    #[test]
    fn run_echo_reads_back_to_the_same_settings() {
        let flags = Overrides {
            seed: Some(9),
            objective: Some("sarwa".into()),
            bandwidths: Some(List(vec![0, 8, 16])),
            checkpoint: Some(vec![PathBuf::from("a.ckpt")]),
            ..Default::default()
        };
        let s = resolve("sweep", &flags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, s.to_json()).unwrap();
        let again = resolve(
            "sweep",
            &Overrides {
                config: Some(path.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(again, s);
        let wrong = resolve(
            "train",
            &Overrides {
                config: Some(path),
                ..Default::default()
            },
        );
        assert_eq!(wrong.unwrap_err().code, 3);
    }
}
