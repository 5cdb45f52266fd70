// SPDX-License-Identifier: MIT OR Apache-2.0

//! `mifin`: batch front end. Every run writes its outputs and a
//! `<subcommand>.manifest.json` into `--out`; `mifin replay` re-executes a
//! manifest and checks the outputs byte for byte.
//!
//! Exit status: 0 on success, 2 for usage or validation errors, 1 for
//! runtime failures.

mod args;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use mifin_core::MifinError;
use serde_json::json;

use crate::args::{Command, Format, ReplayArgs};
use crate::manifest::{Run, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Clap(#[from] clap::Error),
    #[error("{}: {}", .0.code(), .0)]
    Core(#[from] MifinError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("replay mismatch: {0}")]
    Replay(String),
}

pub fn load_error(path: &std::path::Path, e: impl std::fmt::Display) -> MifinError {
    MifinError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Clap(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            _ => 1,
        }
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("MIFIN_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

/// Run one batch subcommand into `out` and write its manifest.
fn execute(
    command: &Command,
    model_dir: Option<&std::path::Path>,
    out: PathBuf,
    format: Format,
    argv: Vec<String>,
) -> Result<RunManifest, CliError> {
    let name = command.name();
    let config = json!({
        "model_dir": model_dir.map(|p| p.display().to_string()),
        "format": format,
        "args": command,
    });
    tracing::info!(subcommand = name, out = %out.display(), "start");
    let mut run = Run::new(out, format)?;
    commands::run(command, &commands::Ctx { model_dir }, &mut run)?;
    let m = run.finish(name, argv, config)?;
    tracing::info!(subcommand = name, outputs = m.outputs.len(), "done");
    Ok(m)
}

fn replay(a: &ReplayArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| load_error(&a.manifest, e))?;
    let recorded: RunManifest = serde_json::from_str(&text)?;
    if recorded.tool_version != env!("CARGO_PKG_VERSION") {
        tracing::warn!(recorded = %recorded.tool_version, "manifest written by a different version");
    }
    let resolved = config::resolve(recorded.argv.iter().map(Into::into).collect())?;
    let (tmp, out) = match out {
        Some(o) => (None, o),
        None => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let cli = resolved.cli;
    if matches!(cli.command, Command::Serve(_) | Command::Replay(_)) {
        return Err(CliError::Usage("manifest does not describe a batch run".into()));
    }
    let fresh = execute(&cli.command, cli.model_dir.as_deref(), out.clone(), cli.format, resolved.replay_argv)?;
    let mut mismatched: Vec<String> = Vec::new();
    for (k, v) in &recorded.inputs {
        if fresh.inputs.get(k).map(|r| &r.sha256) != Some(&v.sha256) {
            mismatched.push(format!("input {k}"));
        }
    }
    for (k, v) in &recorded.outputs {
        if fresh.outputs.get(k) != Some(v) {
            mismatched.push(format!("output {k}"));
        }
    }
    for k in fresh.outputs.keys() {
        if !recorded.outputs.contains_key(k) {
            mismatched.push(format!("extra output {k}"));
        }
    }
    let report = json!({
        "manifest": a.manifest.display().to_string(),
        "replayed_into": tmp.is_none().then(|| out.display().to_string()),
        "outputs_checked": recorded.outputs.len(),
        "mismatched": mismatched,
    });
    eprintln!("{report}");
    if mismatched.is_empty() {
        tracing::info!(outputs = recorded.outputs.len(), "replay identical");
        Ok(())
    } else {
        Err(CliError::Replay(mismatched.join(", ")))
    }
}

fn real_main() -> Result<(), CliError> {
    let resolved = config::resolve(std::env::args_os().collect())?;
    let cli = &resolved.cli;
    match &cli.command {
        Command::Serve(a) => commands::serve(a, &commands::Ctx { model_dir: cli.model_dir.as_deref() }),
        Command::Replay(a) => replay(a, resolved.out_explicit.then(|| cli.out.clone())),
        cmd => execute(cmd, cli.model_dir.as_deref(), cli.out.clone(), cli.format, resolved.replay_argv.clone())
            .map(|_| ()),
    }
}

fn main() -> ExitCode {
    init_logging();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Clap(e)) => {
            let code = e.exit_code();
            let _ = e.print();
            ExitCode::from(code as u8)
        }
        Err(e) => {
            tracing::error!(error = %e, "failed");
            eprintln!("mifin: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
