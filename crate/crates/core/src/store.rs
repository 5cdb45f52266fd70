// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk activation corpora with provenance.
//!
//! A store directory holds:
//!
//! - `data.f32`: little-endian f32, row-major `[row_count × d_in]`
//! - `index.jsonl`: one `{"row", "doc", "pos"}` object per row
//! - `tokens.jsonl`: one `{"doc", "id", "ids"}` object per document
//! - `manifest.json`: model hash, hook, corpus hash, build options

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MifinError, Result};
use crate::model::{Capture, HookPoint, ModelBundle};
use crate::tensor::Matrix;

pub const DATA_FILE: &str = "data.f32";
pub const INDEX_FILE: &str = "index.jsonl";
pub const TOKENS_FILE: &str = "tokens.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Read a JSON-lines corpus of `{"id", "text"}` objects. Records without an
/// id get their line number.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    #[derive(Deserialize)]
    struct Rec {
        id: Option<String>,
        text: String,
    }
    let f = File::open(path).map_err(|e| MifinError::load(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Rec = serde_json::from_str(&line).map_err(|e| MifinError::Record {
            line: i + 1,
            reason: e.to_string(),
        })?;
        docs.push(Document {
            id: rec.id.unwrap_or_else(|| format!("doc-{i}")),
            text: rec.text,
        });
    }
    Ok(docs)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreOptions {
    /// Truncate each document to this many tokens (always capped at the
    /// model context length).
    pub max_tokens_per_doc: Option<usize>,
    /// Permute rows with this seed; `None` keeps document order.
    pub shuffle_seed: Option<u64>,
    /// Subtract the per-dimension mean over the store.
    pub mean_center: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub model_hash: String,
    pub hook: HookPoint,
    pub corpus_hash: String,
    pub d_in: usize,
    pub row_count: usize,
    pub options: StoreOptions,
    /// Subtracted mean when `options.mean_center` is set.
    pub mean: Option<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRef {
    pub row: usize,
    pub doc: usize,
    pub pos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocTokens {
    pub doc: usize,
    pub id: String,
    pub ids: Vec<u32>,
}

/// Text surrounding one store row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Context {
    pub doc: usize,
    pub doc_id: String,
    pub position: usize,
    /// Position of `tokens[0]` in the document.
    pub start: usize,
    pub tokens: Vec<u32>,
    pub text: String,
}

#[derive(Clone, Debug)]
pub struct ActivationStore {
    pub manifest: StoreManifest,
    data: Matrix,
    index: Vec<RowRef>,
    docs: Vec<DocTokens>,
    /// `row_of[doc][pos]`
    row_of: Vec<Vec<Option<usize>>>,
}

fn corpus_hash(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update((d.id.len() as u64).to_le_bytes());
        h.update(d.id.as_bytes());
        h.update((d.text.len() as u64).to_le_bytes());
        h.update(d.text.as_bytes());
    }
    hex::encode(h.finalize())
}

impl ActivationStore {
    /// Run every document through the model and record `hook` at each
    /// processed position.
    pub fn build(
        bundle: &ModelBundle,
        corpus: &[Document],
        hook: HookPoint,
        options: &StoreOptions,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(MifinError::EmptyCorpus);
        }
        hook.validate(&bundle.config)?;
        if !hook.is_model_width() {
            return Err(MifinError::UnsupportedHook(hook.to_string()));
        }
        let cap = options
            .max_tokens_per_doc
            .unwrap_or(usize::MAX)
            .min(bundle.config.context_len);
        let d_in = bundle.config.d_model;
        let capture = Capture::of([hook]);
        let mut docs = Vec::with_capacity(corpus.len());
        let mut refs = Vec::new();
        let mut values = Vec::new();
        for (di, doc) in corpus.iter().enumerate() {
            let mut ids = bundle.encode(&doc.text);
            ids.truncate(cap);
            if !ids.is_empty() {
                let (_, mut cache) = bundle.forward(&ids, &capture)?;
                let act = cache.take(&hook).expect("captured");
                for pos in 0..act.rows() {
                    refs.push((di, pos));
                }
                values.extend_from_slice(act.data());
            }
            docs.push(DocTokens {
                doc: di,
                id: doc.id.clone(),
                ids,
            });
        }
        let mut data = Matrix::new(refs.len(), d_in, values)?;
        if let Some(bad) = data.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(MifinError::NonFinite { row: bad });
        }
        let mut order: Vec<usize> = (0..refs.len()).collect();
        if let Some(seed) = options.shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            data = data.select_rows(&order);
        }
        let index: Vec<RowRef> = order
            .iter()
            .enumerate()
            .map(|(row, &src)| RowRef {
                row,
                doc: refs[src].0,
                pos: refs[src].1,
            })
            .collect();
        let mean = options.mean_center.then(|| {
            let m = column_mean(&data);
            for r in 0..data.rows() {
                data.row_mut(r).iter_mut().zip(&m).for_each(|(v, mu)| *v -= mu);
            }
            m
        });
        let manifest = StoreManifest {
            format_version: 1,
            model_hash: bundle.hash().to_string(),
            hook,
            corpus_hash: corpus_hash(corpus),
            d_in,
            row_count: data.rows(),
            options: options.clone(),
            mean,
        };
        Ok(Self::assemble(manifest, data, index, docs))
    }

    /// A store over raw vectors with no model behind it (synthetic data).
    /// Each row becomes its own one-token document.
    pub fn from_matrix(data: Matrix, hook: HookPoint) -> Result<Self> {
        if data.rows() == 0 {
            return Err(MifinError::EmptyCorpus);
        }
        let index = (0..data.rows())
            .map(|row| RowRef { row, doc: row, pos: 0 })
            .collect();
        let docs = (0..data.rows())
            .map(|doc| DocTokens {
                doc,
                id: format!("row-{doc}"),
                ids: vec![],
            })
            .collect();
        let mut h = Sha256::new();
        for v in data.data() {
            h.update(v.to_le_bytes());
        }
        let manifest = StoreManifest {
            format_version: 1,
            model_hash: "synthetic".into(),
            hook,
            corpus_hash: hex::encode(h.finalize()),
            d_in: data.cols(),
            row_count: data.rows(),
            options: StoreOptions::default(),
            mean: None,
        };
        Ok(Self::assemble(manifest, data, index, docs))
    }

    fn assemble(
        manifest: StoreManifest,
        data: Matrix,
        index: Vec<RowRef>,
        docs: Vec<DocTokens>,
    ) -> Self {
        let mut row_of: Vec<Vec<Option<usize>>> =
            docs.iter().map(|d| vec![None; d.ids.len().max(1)]).collect();
        for r in &index {
            if let Some(slot) = row_of.get_mut(r.doc).and_then(|v| v.get_mut(r.pos)) {
                *slot = Some(r.row);
            }
        }
        Self {
            manifest,
            data,
            index,
            docs,
            row_of,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(DATA_FILE))?);
        for v in self.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
        for r in &self.index {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(TOKENS_FILE))?);
        for d in &self.docs {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), m)?;
        Ok(())
    }

    /// Open a saved store. When `bundle` is given its hash must match the
    /// one recorded at build time.
    pub fn open(dir: &Path, bundle: Option<&ModelBundle>) -> Result<Self> {
        let path = |f: &str| -> PathBuf { dir.join(f) };
        let text = std::fs::read_to_string(path(MANIFEST_FILE))
            .map_err(|e| MifinError::load(path(MANIFEST_FILE), e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        if let Some(b) = bundle {
            if b.hash() != manifest.model_hash {
                return Err(MifinError::ManifestMismatch {
                    path: dir.to_path_buf(),
                    expected: manifest.model_hash,
                    found: b.hash().to_string(),
                });
            }
        }
        let raw = std::fs::read(path(DATA_FILE)).map_err(|e| MifinError::load(path(DATA_FILE), e))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if raw.len() % 4 != 0 || values.len() != manifest.row_count * manifest.d_in {
            return Err(MifinError::shape(
                DATA_FILE,
                format!(
                    "{} bytes for {} rows of width {}",
                    raw.len(),
                    manifest.row_count,
                    manifest.d_in
                ),
            ));
        }
        let data = Matrix::new(manifest.row_count, manifest.d_in, values)?;
        let index: Vec<RowRef> = read_jsonl(&path(INDEX_FILE))?;
        if index.len() != manifest.row_count {
            return Err(MifinError::shape(
                INDEX_FILE,
                format!("{} index rows, {} data rows", index.len(), manifest.row_count),
            ));
        }
        let docs: Vec<DocTokens> = read_jsonl(&path(TOKENS_FILE))?;
        Ok(Self::assemble(manifest, data, index, docs))
    }

    pub fn row_count(&self) -> usize {
        self.data.rows()
    }

    /// SHA-256 of the manifest's JSON; ties checkpoints to their store.
    pub fn manifest_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn d_in(&self) -> usize {
        self.data.cols()
    }

    pub fn hook(&self) -> HookPoint {
        self.manifest.hook
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn row(&self, row: usize) -> Result<&[f32]> {
        self.check(row)?;
        Ok(self.data.row(row))
    }

    pub fn row_ref(&self, row: usize) -> Result<RowRef> {
        self.check(row)?;
        Ok(self.index[row])
    }

    pub fn index(&self) -> &[RowRef] {
        &self.index
    }

    pub fn documents(&self) -> &[DocTokens] {
        &self.docs
    }

    /// Row holding `(doc, pos)`, if that position was stored.
    pub fn row_at(&self, doc: usize, pos: usize) -> Option<usize> {
        self.row_of.get(doc)?.get(pos).copied().flatten()
    }

    fn check(&self, row: usize) -> Result<()> {
        if row >= self.row_count() {
            return Err(MifinError::Index {
                row,
                rows: self.row_count(),
            });
        }
        Ok(())
    }

    pub fn read_batch(&self, rows: &[usize]) -> Result<Matrix> {
        for &r in rows {
            self.check(r)?;
        }
        Ok(self.data.select_rows(rows))
    }

    /// Up to `window` tokens centered on the row's position, clamped to the
    /// document bounds.
    pub fn locate_context(&self, bundle: &ModelBundle, row: usize, window: usize) -> Result<Context> {
        let r = self.row_ref(row)?;
        let doc = &self.docs[r.doc];
        let half = window / 2;
        let start = r.pos.saturating_sub(half);
        let end = (r.pos + window - half).min(doc.ids.len()).max(start);
        let tokens = doc.ids[start..end].to_vec();
        Ok(Context {
            doc: r.doc,
            doc_id: doc.id.clone(),
            position: r.pos,
            start,
            text: bundle.decode(&tokens)?,
            tokens,
        })
    }
}

fn column_mean(m: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.cols()];
    for row in m.iter_rows() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
    }
    acc.into_iter().map(|a| (a / m.rows() as f64) as f32).collect()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| MifinError::load(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MifinError::Record {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
