//! `srl`: train, attack and analyse small image classifiers from the shell.
//!
//! Every run resolves a flat configuration (defaults, then `--config`, then
//! flags), computes all of its outputs in memory, and only then writes them
//! into `--out` with atomic renames, followed by a `run.json` echo of the
//! resolved configuration.
//!
//! Failures print one line to stderr,
//! `error: code=<n> kind=<kind> msg="<text>"`, and exit with:
//!
//! | code | meaning |
//! |------|---------|
//! | 1 | runtime failure (divergence, failed audit, corrupt file) |
//! | 2 | usage: unknown flag or subcommand, missing value |
//! | 3 | invalid configuration value |
//! | 4 | missing input: checkpoint, dataset or config file |

use std::ffi::OsString;
use std::fmt;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "srl", version, about = "Spectral robustness lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier under any objective.
    Train(Overrides),
    /// PGD accuracy of a checkpoint, optionally with a filtered perturbation.
    Attack(Overrides),
    /// Accuracy on low-pass filtered inputs across bandwidths.
    Sweep(Overrides),
    /// Robust accuracy with only the low or high band of each perturbation.
    Aggressiveness(Overrides),
    /// Averaged perturbation spectrum.
    Spectrum(Overrides),
    /// Fourier basis corruption heat map.
    Heatmap(Overrides),
    /// Finite-difference audit of the autodiff engine and losses.
    Gradcheck(Overrides),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Sweep(_) => "sweep",
            Command::Aggressiveness(_) => "aggressiveness",
            Command::Spectrum(_) => "spectrum",
            Command::Heatmap(_) => "heatmap",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Train(o)
            | Command::Attack(o)
            | Command::Sweep(o)
            | Command::Aggressiveness(o)
            | Command::Spectrum(o)
            | Command::Heatmap(o)
            | Command::Gradcheck(o) => o,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, kind: "usage", msg: msg.into() }
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Self { code: 3, kind: "invalid_config", msg: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Self { code: 4, kind: "missing_input", msg: msg.into() }
    }

    pub fn runtime(kind: &'static str, msg: impl Into<String>) -> Self {
        Self { code: 1, kind, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.msg.replace('\n', " ");
        write!(f, "error: code={} kind={} msg={:?}", self.code, self.kind, msg)
    }
}

impl From<srl_core::Error> for CliError {
    fn from(e: srl_core::Error) -> Self {
        use srl_core::Error as E;
        let msg = e.to_string();
        match &e {
            E::InvalidArgument(_) | E::ShapeMismatch { .. } => CliError::invalid_config(msg),
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => CliError::missing(msg),
            E::Io { .. } => CliError::runtime("io", msg),
            E::Checkpoint(_) => CliError::runtime("checkpoint", msg),
            E::Data(_) => CliError::runtime("data", msg),
            E::NonFinite { .. } | E::ImaginaryResidue { .. } => CliError::runtime("numeric", msg),
        }
    }
}

fn clap_code(kind: ErrorKind) -> (i32, &'static str) {
    match kind {
        ErrorKind::InvalidValue | ErrorKind::ValueValidation | ErrorKind::InvalidUtf8 => (3, "invalid_config"),
        _ => (2, "usage"),
    }
}

/// Parses `argv` (program name first), runs the subcommand, returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let (code, kind) = clap_code(e.kind());
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError { code, kind, msg: first.to_string() });
            return code;
        }
    };
    match commands::execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.code
        }
    }
}
