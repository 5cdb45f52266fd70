// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::Serialize;

use super::ActivationStats;
use crate::error::{MifinError, Result};
use crate::model::ModelBundle;
use crate::sae::{Sae, ACTIVATION_EPSILON};
use crate::store::ActivationStore;
use crate::tensor::dot;

/// One context around a store row where the feature fires.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopActivation {
    pub row: usize,
    pub doc: usize,
    pub doc_id: String,
    pub position: usize,
    pub activation: f32,
    /// Token ids of the window, starting at document position `start`.
    pub start: usize,
    pub tokens: Vec<u32>,
    /// Per-token text; empty when no model is given.
    pub token_texts: Vec<String>,
    /// Feature activation at each window token (0 for positions the store
    /// did not record).
    pub token_activations: Vec<f32>,
}

/// `h_f` for every store row. Store rows are already in the SAE's input
/// space (mean-centered when the store was built that way).
pub fn feature_activations(sae: &Sae, store: &ActivationStore, feature: usize) -> Result<Vec<f32>> {
    sae.params.check_feature(feature)?;
    if store.d_in() != sae.params.d_in() {
        return Err(MifinError::shape(
            "store",
            format!("width {}, SAE d_in {}", store.d_in(), sae.params.d_in()),
        ));
    }
    let w = sae.params.w_enc.row(feature);
    let b = sae.params.b[feature];
    Ok(store
        .data()
        .iter_rows()
        .map(|x| (dot(w, x) + b).max(0.0))
        .collect())
}

pub(crate) fn activation_stats(sae: &Sae, store: &ActivationStore) -> Result<Vec<ActivationStats>> {
    let h = sae.params.encode(store.data())?;
    let n = h.rows().max(1) as f64;
    let mut max = vec![0.0f32; h.cols()];
    let mut sum = vec![0.0f64; h.cols()];
    for row in h.iter_rows() {
        for ((m, s), &v) in max.iter_mut().zip(sum.iter_mut()).zip(row) {
            *m = m.max(v);
            *s += v as f64;
        }
    }
    Ok(max
        .into_iter()
        .zip(sum)
        .map(|(max, s)| ActivationStats {
            max,
            mean: (s / n) as f32,
        })
        .collect())
}

/// The `k` rows where `feature` is largest, each with a `window`-token
/// context. Ordered by activation descending, then (document, position).
/// A feature that never exceeds the activation epsilon yields no contexts.
pub fn top_activations(
    sae: &Sae,
    store: &ActivationStore,
    feature: usize,
    k: usize,
    window: usize,
    bundle: Option<&ModelBundle>,
) -> Result<Vec<TopActivation>> {
    if k == 0 {
        return Err(MifinError::InvalidParam("k must be at least 1".into()));
    }
    let acts = feature_activations(sae, store, feature)?;
    let index = store.index();
    let mut active: Vec<usize> = (0..acts.len()).filter(|&r| acts[r] > ACTIVATION_EPSILON).collect();
    active.sort_by(|&a, &b| {
        acts[b]
            .total_cmp(&acts[a])
            .then((index[a].doc, index[a].pos).cmp(&(index[b].doc, index[b].pos)))
    });
    active.truncate(k);
    active
        .into_iter()
        .map(|row| {
            let r = index[row];
            let doc = &store.documents()[r.doc];
            let (start, tokens, token_texts) = match bundle {
                Some(b) if !doc.ids.is_empty() => {
                    let c = store.locate_context(b, row, window.max(1))?;
                    let texts = c
                        .tokens
                        .iter()
                        .map(|&t| b.tokenizer.token_text(t))
                        .collect::<Result<_>>()?;
                    (c.start, c.tokens, texts)
                }
                _ => {
                    let half = window / 2;
                    let start = r.pos.saturating_sub(half);
                    let end = (r.pos + window - half).min(doc.ids.len()).max(start);
                    (start, doc.ids[start..end].to_vec(), Vec::new())
                }
            };
            let token_activations = (start..start + tokens.len())
                .map(|p| store.row_at(r.doc, p).map_or(0.0, |i| acts[i]))
                .collect();
            Ok(TopActivation {
                row,
                doc: r.doc,
                doc_id: doc.id.clone(),
                position: r.pos,
                activation: acts[row],
                start,
                tokens,
                token_texts,
                token_activations,
            })
        })
        .collect()
}
