// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and the output sink that fills them.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::args::Format;
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub subcommand: String,
    /// Arguments that reproduce the run, minus the output directory.
    pub argv: Vec<String>,
    /// Every resolved option, defaults included.
    pub config: Value,
    pub inputs: BTreeMap<String, InputRecord>,
    /// Output path relative to the run's `--out`, to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_name(subcommand: &str) -> String {
    format!("{subcommand}.manifest.json")
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn files_under(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Hash of a file, or of a directory's sorted `(relative path, sha)` list.
pub fn sha256_path(path: &Path) -> std::io::Result<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut h = Sha256::new();
    for f in files_under(path)? {
        let rel = f.strip_prefix(path).expect("under dir");
        h.update(format!("{}\t{}\n", rel.display(), sha256_file(&f)?));
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects inputs and outputs of one subcommand run.
pub struct Run {
    pub out: PathBuf,
    pub format: Format,
    pub inputs: BTreeMap<String, InputRecord>,
    pub outputs: BTreeMap<String, String>,
    /// What the subcommand prints on stdout.
    pub stdout: String,
}

impl Run {
    pub fn new(out: PathBuf, format: Format) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            out,
            format,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stdout: String::new(),
        })
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_path(path)
            .map_err(|e| crate::load_error(path, e))?;
        self.inputs.insert(
            label.to_string(),
            InputRecord {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    /// An input identified by a content hash computed elsewhere.
    pub fn input_hash(&mut self, label: &str, path: &str, sha256: &str) {
        self.inputs.insert(
            label.to_string(),
            InputRecord {
                path: path.to_string(),
                sha256: sha256.to_string(),
            },
        );
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let bytes = bytes.as_ref();
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.outputs.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        tracing::info!(output = %path.display(), bytes = bytes.len(), "wrote");
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s)
    }

    /// Register every file a callee wrote beneath `out/<name>`.
    pub fn record_dir(&mut self, name: &str) -> Result<(), CliError> {
        let dir = self.path(name);
        for f in files_under(&dir)? {
            let rel = f.strip_prefix(&self.out).expect("under out").to_string_lossy().replace('\\', "/");
            self.outputs.insert(rel, sha256_file(&f)?);
        }
        Ok(())
    }

    /// Register files a callee wrote directly into `out`.
    pub fn record_files(&mut self, names: &[&str]) -> Result<(), CliError> {
        for n in names {
            let sha = sha256_file(&self.path(n))?;
            self.outputs.insert(n.to_string(), sha);
        }
        Ok(())
    }

    /// The main result: written as `<base>.json` or `<base>.csv` and echoed
    /// on stdout. `csv` overrides the generic flattening.
    pub fn primary<T: Serialize + ?Sized>(
        &mut self,
        base: &str,
        value: &T,
        csv: Option<String>,
    ) -> Result<(), CliError> {
        let text = match self.format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(value)?;
                s.push('\n');
                s
            }
            Format::Csv => match csv {
                Some(c) => c,
                None => flat_csv(&serde_json::to_value(value)?)?,
            },
        };
        let ext = match self.format {
            Format::Json => "json",
            Format::Csv => "csv",
        };
        self.write(&format!("{base}.{ext}"), &text)?;
        self.stdout.push_str(&text);
        Ok(())
    }

    pub fn finish(self, subcommand: &str, argv: Vec<String>, config: Value) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            argv,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        std::fs::write(self.out.join(manifest_name(subcommand)), s)?;
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(self.stdout.as_bytes())?;
        stdout.flush()?;
        Ok(manifest)
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            items.iter().map(cell).collect::<Vec<_>>().join(";")
        }
        other => other.to_string(),
    }
}

/// One row per array element (or one row for an object); nested values are
/// rendered inline.
pub fn flat_csv(v: &Value) -> Result<String, CliError> {
    let rows: Vec<&serde_json::Map<String, Value>> = match v {
        Value::Array(items) => items.iter().filter_map(Value::as_object).collect(),
        Value::Object(m) => vec![m],
        _ => Vec::new(),
    };
    let mut header: Vec<&String> = Vec::new();
    for r in &rows {
        for k in r.keys() {
            if !header.contains(&k) {
                header.push(k);
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(mifin_core::MifinError::from)?;
    for r in rows {
        let rec: Vec<String> = header.iter().map(|k| r.get(*k).map(cell).unwrap_or_default()).collect();
        w.write_record(&rec).map_err(mifin_core::MifinError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of strings is UTF-8"))
}
