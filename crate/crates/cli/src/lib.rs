// Copyright 2026 The nvcs Authors
// SPDX-License-Identifier: Apache-2.0

//! Batch verification runner. Each subcommand reads an [`ExperimentConfig`],
//! runs one module's checks and writes a TOML report with a CSV plot table.
//!
//! Exit status: 0 when every check passes, 1 when a check fails, 2 for
//! configuration, usage and I/O errors.

// Negated comparisons such as `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod config;
pub mod report;
pub mod suites;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use config::ExperimentConfig;
pub use report::Report;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("incompatible cache entry: {0}")]
    Cache(String),
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// Module whose checks a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Spectrum,
    Nvcs,
    VerifyIdentity,
    Matrix,
    Displacement,
    S3,
    Specfun,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Nvcs => "nvcs",
            Command::VerifyIdentity => "verify-identity",
            Command::Matrix => "matrix",
            Command::Displacement => "displacement",
            Command::S3 => "s3",
            Command::Specfun => "specfun",
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "nvcs", version, about = "Verification runner for nonlinear vector coherent states")]
pub struct Cli {
    #[command(subcommand)]
    pub command: RunCommand,
}

#[derive(Debug, Clone, Subcommand)]
pub enum RunCommand {
    /// Closed-form spectrum against dense diagonalization.
    Spectrum(RunArgs),
    /// S² family (or its dual): normalization, eigen-relation, stability, actions.
    Nvcs(RunArgs),
    /// Moment problems, weights and resolution of the identity.
    VerifyIdentity(RunArgs),
    /// Normal-matrix and quaternion families.
    Matrix(RunArgs),
    /// Displacement operators, T-operators and proper-time derivatives.
    Displacement(RunArgs),
    /// S³ family.
    S3(RunArgs),
    /// Special functions: basic factorials, (p,q)-exponential, Ramanujan integral.
    Specfun(RunArgs),
}

impl RunCommand {
    pub fn split(&self) -> (Command, &RunArgs) {
        match self {
            RunCommand::Spectrum(a) => (Command::Spectrum, a),
            RunCommand::Nvcs(a) => (Command::Nvcs, a),
            RunCommand::VerifyIdentity(a) => (Command::VerifyIdentity, a),
            RunCommand::Matrix(a) => (Command::Matrix, a),
            RunCommand::Displacement(a) => (Command::Displacement, a),
            RunCommand::S3(a) => (Command::S3, a),
            RunCommand::Specfun(a) => (Command::Specfun, a),
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment configuration (TOML). Without it every block takes its default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named suite within the subcommand; `all` runs every suite.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Report directory, overriding `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Multiplies every tolerance.
    #[arg(long, default_value_t = 1.0)]
    pub tolerance_scale: f64,
    /// Overrides `numeric.n_max`.
    #[arg(long)]
    pub n_max: Option<usize>,
}

/// Parse and validate the configuration with command-line overrides applied.
pub fn load_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
    if let Some(n) = args.n_max {
        cfg.numeric.n_max = n;
        cfg.numeric.n_report = cfg.numeric.n_report.min(n);
    }
    if let Some(out) = &args.out {
        cfg.output.dir = Some(out.clone());
    }
    cfg.validate()?;
    if !(args.tolerance_scale > 0.0 && args.tolerance_scale.is_finite()) {
        return Err(CliError::Config(format!("tolerance scale {} must be positive and finite", args.tolerance_scale)));
    }
    Ok(cfg)
}

/// SHA-256 of the canonical re-serialization, independent of formatting and
/// of where the report is written.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    cfg.output.dir = None;
    let text = toml::to_string(&cfg).map_err(|e| CliError::Io(format!("serializing config: {e}")))?;
    Ok(cache::hex(&Sha256::digest(text.as_bytes())))
}

/// Run one subcommand, write its report and return it.
pub fn execute(command: Command, args: &RunArgs) -> Result<Report, CliError> {
    let cfg = load_config(args)?;
    let mut report = suites::run(command, &args.suite, &cfg, args.tolerance_scale)?;
    report.config_sha256 = config_digest(&cfg)?;
    let dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("nvcs-out"));
    let stem = format!("{}-{}", command.name(), args.suite);
    report.write(&dir, &stem)?;
    Ok(report)
}

/// Entry point shared by the binary and the tests; returns the exit status.
pub fn main_with(cli: Cli) -> i32 {
    let (command, args) = cli.command.split();
    match execute(command, args) {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {} = {:e} (tolerance {:e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
            }
            for n in &report.notes {
                println!("NOTE {n}");
            }
            for c in report.failing() {
                eprintln!("failed check: {}{}", c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) });
            }
            if report.pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
