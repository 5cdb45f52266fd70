// SPDX-License-Identifier: MIT OR Apache-2.0

//! Argument resolution: config-file defaults merged under explicit flags.
//!
//! Top-level keys of the file apply to any subcommand that has a flag of
//! that name; a table named after the subcommand overrides them. A flag
//! given on the command line (or through its environment variable) always
//! wins. Keys use the flag spelling, with `-` or `_`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, CommandFactory, FromArgMatches};
use serde_json::Value;

use crate::args::Cli;
use crate::CliError;

pub struct Resolved {
    pub cli: Cli,
    /// Final argv (after config merging) without `--out`, `--config` or
    /// `--model-dir`; the resolved model dir is appended explicitly.
    pub replay_argv: Vec<String>,
    pub out_explicit: bool,
}

fn load_config(path: &Path) -> Result<serde_json::Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::to_value(t).expect("toml values are JSON-representable")
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Usage("config file must hold a table".into())),
    }
}

fn scalar(v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(CliError::Usage(format!("unsupported config value {other}"))),
    }
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

/// Parse `argv`, merging the `--config` file if one is named.
pub fn resolve(argv: Vec<OsString>) -> Result<Resolved, CliError> {
    let root = Cli::command();
    let first = root.clone().try_get_matches_from(&argv)?;
    let mut argv: Vec<String> = argv
        .into_iter()
        .map(|a| a.into_string().map_err(|_| CliError::Usage("arguments must be UTF-8".into())))
        .collect::<Result<_, _>>()?;

    if let Some(path) = first.get_one::<PathBuf>("config") {
        let file = load_config(path)?;
        let (sub_name, sub_m) = first.subcommand().expect("subcommand is required");
        let sub_cmd = root.find_subcommand(sub_name).expect("parsed subcommand exists");
        let mut entries: Vec<(String, Value)> = file
            .iter()
            .filter(|(_, v)| !v.is_object())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut section_keys = std::collections::BTreeSet::new();
        if let Some(Value::Object(section)) = file.get(sub_name) {
            for (k, v) in section {
                section_keys.insert(k.replace('-', "_"));
                entries.push((k.clone(), v.clone()));
            }
        }
        let mut injected = Vec::new();
        for (key, value) in entries {
            let id = key.replace('-', "_");
            if id == "config" {
                continue;
            }
            let (arg, matches) = if let Some(a) = root.get_arguments().find(|a| a.get_id() == id.as_str()) {
                (a, &first)
            } else if let Some(a) = sub_cmd.get_arguments().find(|a| a.get_id() == id.as_str()) {
                (a, sub_m)
            } else if section_keys.contains(&id) {
                return Err(CliError::Usage(format!("config key {key:?} is not a flag of {sub_name}")));
            } else {
                // A top-level key meant for another subcommand.
                continue;
            };
            if explicit(matches, &id) {
                continue;
            }
            // A section entry shadows a top-level one of the same name.
            if !section_keys.contains(&id) && injected.iter().any(|(i, _)| i == &id) {
                continue;
            }
            injected.retain(|(i, _)| i != &id);
            let long = format!("--{}", arg.get_long().expect("all options are long"));
            let mut tokens = Vec::new();
            match (arg.get_action(), &value) {
                (ArgAction::SetTrue, Value::Bool(true)) => tokens.push(long),
                (ArgAction::SetTrue, Value::Bool(false)) => {}
                (ArgAction::SetTrue, other) => {
                    return Err(CliError::Usage(format!("config key {key:?} expects a boolean, got {other}")))
                }
                (_, Value::Array(items)) => {
                    for it in items {
                        tokens.push(long.clone());
                        tokens.push(scalar(it)?);
                    }
                }
                (_, v) => {
                    tokens.push(long);
                    tokens.push(scalar(v)?);
                }
            }
            injected.push((id, tokens));
        }
        argv.extend(injected.into_iter().flat_map(|(_, t)| t));
    }

    let matches = root.clone().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let out_explicit = explicit(&matches, "out");

    let mut replay_argv = vec![argv[0].clone()];
    let mut it = argv.into_iter().skip(1);
    while let Some(tok) = it.next() {
        let flag = tok.split('=').next().unwrap_or_default();
        if matches!(flag, "--out" | "--config" | "--model-dir") {
            if !tok.contains('=') {
                it.next();
            }
            continue;
        }
        replay_argv.push(tok);
    }
    if let Some(dir) = &cli.model_dir {
        replay_argv.push("--model-dir".into());
        replay_argv.push(dir.display().to_string());
    }
    Ok(Resolved {
        cli,
        replay_argv,
        out_explicit,
    })
}
