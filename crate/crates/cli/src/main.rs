//! `dpkfc`: run training, accounting and diagnostics from a JSON config.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::Task;

#[derive(Parser)]
#[command(
    name = "dpkfc",
    version,
    about = "Private training with data-free KFAC preconditioning"
)]
struct Cli {
    #[command(subcommand)]
    task: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; overrides alone are enough for small tasks.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Validate and print the resolved config without running.
    #[arg(long)]
    dry_run: bool,
    /// `key.path=value` overrides applied in order; values are JSON or bare strings.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model with DP-SGD or DP-KFC.
    Train(Common),
    /// Privacy loss of a subsampled Gaussian mechanism, or the noise for a target.
    Accountant(Common),
    /// Factor alignment, spectra and Hessian density at saved checkpoints.
    Diagnose(Common),
    /// KFAC factor spectra from probe sources, without data.
    ProbeSpectrum(Common),
    /// Generate 1/f^alpha image noise and its radial spectrum.
    GenNoise(Common),
}

/// Failure reported as one JSON object on stderr.
#[derive(Debug)]
pub struct CliError {
    kind: String,
    message: String,
    violations: Vec<String>,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn exit_code(&self) -> u8 {
        if self.kind == "config" {
            2
        } else {
            1
        }
    }
}

impl From<dpkfc::Error> for CliError {
    fn from(e: dpkfc::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new("csv", e.to_string())
    }
}

fn execute(task: Task, common: &Common) -> Result<serde_json::Value, CliError> {
    let doc = config::load_document(common.config.as_deref(), &common.overrides)?;
    let cfg = config::validate(&doc, task).map_err(|violations| CliError {
        kind: "config".into(),
        message: format!("{} configuration violation(s)", violations.len()),
        violations,
    })?;
    let echo = serde_json::to_vec_pretty(&cfg)?;
    let dir = cfg.resolved_output_dir();
    if common.dry_run {
        return Ok(serde_json::from_slice(&echo)?);
    }
    let (outputs, result) = commands::run(&cfg)?;
    outputs.commit(&dir, &echo)?;
    Ok(json!({
        "task": task.name(),
        "output_dir": dir,
        "files": outputs.names().collect::<Vec<_>>(),
        "result": result,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, common) = match &cli.task {
        Command::Train(c) => (Task::Train, c),
        Command::Accountant(c) => (Task::Accountant, c),
        Command::Diagnose(c) => (Task::Diagnose, c),
        Command::ProbeSpectrum(c) => (Task::ProbeSpectrum, c),
        Command::GenNoise(c) => (Task::GenNoise, c),
    };
    match execute(task, common) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let rec = json!({"error": {"kind": e.kind, "message": e.message, "violations": e.violations}});
            eprintln!("{rec}");
            ExitCode::from(e.exit_code())
        }
    }
}
