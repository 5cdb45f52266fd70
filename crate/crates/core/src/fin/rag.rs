// SPDX-License-Identifier: MIT OR Apache-2.0

//! Retrieval over document chunks embedded with the model's own residual
//! stream, and answering that retrieves only when the gate fires.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rag_gate, GateDecision, DEFAULT_GATE_THRESHOLD};
use crate::error::{MifinError, Result};
use crate::model::{Capture, GenerateParams, HookPoint, ModelBundle};
use crate::sae::Sae;
use crate::store::Document;
use crate::tensor::cosine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: usize,
    pub doc: usize,
    pub doc_id: String,
    /// Token span `[start, end)` within the document.
    pub span: (usize, usize),
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkIndex {
    pub model_hash: String,
    pub layer: usize,
    pub window: usize,
    pub stride: usize,
    pub chunks: Vec<Chunk>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Retrieval {
    /// `(chunk id, cosine)`, best first.
    pub hits: Vec<(usize, f32)>,
    /// Set when fewer than `k` chunks exist.
    pub truncated: bool,
}

/// Mean `resid_post[layer]` over the tokens of `text`.
fn embed(bundle: &ModelBundle, layer: usize, text: &str) -> Result<Vec<f32>> {
    let ids = bundle.encode(text);
    if ids.is_empty() {
        return Err(MifinError::EmptyInput);
    }
    let ids = &ids[..ids.len().min(bundle.config.context_len)];
    let hook = HookPoint::ResidPost(layer);
    let (_, cache) = bundle.forward(ids, &Capture::of([hook]))?;
    let m = cache.require(&hook)?;
    let mut acc = vec![0.0f64; m.cols()];
    for row in m.iter_rows() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
    }
    Ok(acc.into_iter().map(|a| (a / m.rows() as f64) as f32).collect())
}

/// Tile each document with `window`-token chunks every `stride` tokens.
/// A chunk's embedding is computed from its own decoded text, so a query
/// equal to that text embeds identically.
pub fn build_chunk_index(
    bundle: &ModelBundle,
    docs: &[Document],
    layer: usize,
    window: usize,
    stride: usize,
) -> Result<ChunkIndex> {
    if docs.is_empty() {
        return Err(MifinError::EmptyCorpus);
    }
    if stride == 0 || window < stride {
        return Err(MifinError::InvalidParam(format!(
            "need window >= stride >= 1, got window {window}, stride {stride}"
        )));
    }
    if window > bundle.config.context_len {
        return Err(MifinError::InvalidParam(format!(
            "window {window} exceeds the context length {}",
            bundle.config.context_len
        )));
    }
    HookPoint::ResidPost(layer).validate(&bundle.config)?;
    let mut chunks = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let ids = bundle.encode(&doc.text);
        let mut start = 0;
        while start < ids.len() {
            let end = (start + window).min(ids.len());
            let text = bundle.decode(&ids[start..end])?;
            chunks.push(Chunk {
                id: chunks.len(),
                doc: d,
                doc_id: doc.id.clone(),
                span: (start, end),
                embedding: embed(bundle, layer, &text)?,
                text,
            });
            if end == ids.len() {
                break;
            }
            start += stride;
        }
    }
    Ok(ChunkIndex {
        model_hash: bundle.hash().to_string(),
        layer,
        window,
        stride,
        chunks,
    })
}

/// Top-`k` chunks by cosine with the query; ties by (document, span).
pub fn retrieve(index: &ChunkIndex, bundle: &ModelBundle, query: &str, k: usize) -> Result<Retrieval> {
    if index.model_hash != bundle.hash() {
        return Err(MifinError::ManifestMismatch {
            path: "chunk index".into(),
            expected: index.model_hash.clone(),
            found: bundle.hash().to_string(),
        });
    }
    let q = embed(bundle, index.layer, query)?;
    let mut scored: Vec<(usize, f32)> = index.chunks.iter().map(|c| (c.id, cosine(&q, &c.embedding))).collect();
    scored.sort_by(|a, b| {
        let (ca, cb) = (&index.chunks[a.0], &index.chunks[b.0]);
        b.1.total_cmp(&a.1).then((ca.doc, ca.span).cmp(&(cb.doc, cb.span)))
    });
    let truncated = k > scored.len();
    scored.truncate(k);
    Ok(Retrieval { hits: scored, truncated })
}

impl ChunkIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MifinError::load(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RagParams {
    pub finance_set: BTreeSet<usize>,
    pub threshold: f64,
    pub k: usize,
    pub max_new_tokens: usize,
}

impl Default for RagParams {
    fn default() -> Self {
        Self {
            finance_set: BTreeSet::new(),
            threshold: DEFAULT_GATE_THRESHOLD,
            k: 2,
            max_new_tokens: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub chunk: usize,
    pub doc_id: String,
    pub span: (usize, usize),
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RagAnswer {
    pub question: String,
    pub draft: String,
    pub answer: String,
    pub gate: GateDecision,
    pub sources: Vec<SourceRef>,
}

pub fn draft_prompt(question: &str) -> String {
    format!("Question: {question}\nAnswer:")
}

/// `Context:\n<chunks>\n\nQuestion: <q>\nAnswer:`
pub fn rag_prompt(chunks: &[&str], question: &str) -> String {
    format!("Context:\n{}\n\nQuestion: {question}\nAnswer:", chunks.join("\n"))
}

fn complete(bundle: &ModelBundle, prompt: &str, max_new_tokens: usize) -> Result<String> {
    let mut ids = bundle.encode(prompt);
    let room = bundle.config.context_len.saturating_sub(max_new_tokens).max(1);
    if ids.len() > room {
        // Keep the question end of the prompt.
        ids.drain(..ids.len() - room);
    }
    let g = bundle.generate(&ids, &GenerateParams::greedy(max_new_tokens))?;
    bundle.decode(&g.tokens)
}

pub fn answer_with_gate(
    bundle: &ModelBundle,
    sae: &Sae,
    index: &ChunkIndex,
    question: &str,
    params: &RagParams,
) -> Result<RagAnswer> {
    if !(0.0..1.0).contains(&params.threshold) {
        return Err(MifinError::InvalidParam(format!(
            "gate threshold must lie in [0, 1), got {}",
            params.threshold
        )));
    }
    if question.trim().is_empty() {
        return Err(MifinError::EmptyInput);
    }
    let draft = complete(bundle, &draft_prompt(question), params.max_new_tokens)?;
    let gate = rag_gate(bundle, sae, &params.finance_set, &draft, params.threshold)?;
    if !gate.triggered {
        return Ok(RagAnswer {
            question: question.to_string(),
            answer: draft.clone(),
            draft,
            gate,
            sources: Vec::new(),
        });
    }
    tracing::info!(ratio = gate.finance_ratio, threshold = gate.threshold, "activation below threshold; retrieving");
    let hits = retrieve(index, bundle, question, params.k)?;
    let sources: Vec<SourceRef> = hits
        .hits
        .iter()
        .map(|&(id, score)| {
            let c = &index.chunks[id];
            SourceRef {
                chunk: id,
                doc_id: c.doc_id.clone(),
                span: c.span,
                score,
            }
        })
        .collect();
    let texts: Vec<&str> = sources.iter().map(|s| index.chunks[s.chunk].text.as_str()).collect();
    let answer = complete(bundle, &rag_prompt(&texts, question), params.max_new_tokens)?;
    Ok(RagAnswer {
        question: question.to_string(),
        draft,
        answer,
        gate,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::tiny_model;

    #[test]
    fn short_document_is_one_chunk() {
        let m = tiny_model();
        let idx = build_chunk_index(&m, &[Document::new("a", "Rates rose.")], 1, 16, 8).unwrap();
        assert_eq!(idx.chunks.len(), 1);
        assert_eq!(idx.chunks[0].span, (0, m.encode("Rates rose.").len()));
    }

    #[test]
    fn chunks_tile_with_overlap() {
        let m = tiny_model();
        let text = "one two three four five six seven eight nine ten eleven";
        let n = m.encode(text).len();
        let idx = build_chunk_index(&m, &[Document::new("a", text)], 0, 4, 3).unwrap();
        let spans: Vec<_> = idx.chunks.iter().map(|c| c.span).collect();
        assert_eq!(spans[0], (0, 4));
        assert_eq!(spans[1], (3, 7));
        assert_eq!(spans.last().unwrap().1, n);
    }

    #[test]
    fn identical_query_ranks_its_chunk_first() {
        let m = tiny_model();
        let docs = [
            Document::new("a", "The central bank raised interest rates again."),
            Document::new("b", "Quarterly revenue beat analyst expectations."),
        ];
        let idx = build_chunk_index(&m, &docs, 1, 64, 32).unwrap();
        let r = retrieve(&idx, &m, &idx.chunks[1].text, 5).unwrap();
        assert_eq!(r.hits[0].0, 1);
        assert!((r.hits[0].1 - 1.0).abs() < 1e-5);
        assert!(r.truncated);
    }

    #[test]
    fn bad_window_is_rejected() {
        let m = tiny_model();
        let docs = [Document::new("a", "x")];
        assert!(build_chunk_index(&m, &docs, 0, 2, 3).is_err());
        assert!(build_chunk_index(&m, &docs, 0, 2, 0).is_err());
    }
}
