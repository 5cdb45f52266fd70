// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finance applications on SAE activations: bias scanning,
//! activation-gated retrieval, feature decision trees and a steered
//! sentiment harness.
//!
//! The bias ratio counts features (`|activated ∩ set| / |activated|`);
//! the gate ratio weighs activation mass (`Σ_set h / Σ_all h`). The
//! asymmetry is intentional.

pub mod datasets;
mod rag;
mod sentiment;
mod tree;

pub use rag::{
    answer_with_gate, build_chunk_index, rag_prompt, retrieve, Chunk, ChunkIndex, RagAnswer, RagParams,
    Retrieval, SourceRef,
};
pub use sentiment::{
    parse_sentiment, sentiment_classify, sentiment_eval, sentiment_prompt, ConfusionMatrix, Sentiment,
    SentimentEval, SentimentExample, SentimentPrediction, SteerScope, SENTIMENT_INSTRUCTION, SENTIMENT_MAX_TOKENS,
};
pub use tree::{
    build_feature_dataset, evaluate_f1, feature_importance, read_labeled_csv, train_tree, tree_predict,
    DecisionTree, F1Report, FeatureDataset, LabeledText, Node, TreeParams,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::{Capture, ModelBundle};
use crate::sae::{Sae, ACTIVATION_EPSILON};
use crate::tensor::Matrix;

/// Default bias-ratio threshold θ.
pub const DEFAULT_THETA: f64 = 0.33;
/// Default gate threshold.
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.20;

/// SAE latents at every token of `text`, `[n_tokens × d_hid]`.
pub fn text_latents(bundle: &ModelBundle, sae: &Sae, text: &str) -> Result<Matrix> {
    let ids = bundle.encode(text);
    if ids.is_empty() {
        return Err(MifinError::EmptyInput);
    }
    token_latents(bundle, sae, &ids)
}

pub fn token_latents(bundle: &ModelBundle, sae: &Sae, ids: &[u32]) -> Result<Matrix> {
    let (_, mut cache) = bundle.forward(ids, &Capture::of([sae.hook]))?;
    let act = cache
        .take(&sae.hook)
        .ok_or_else(|| MifinError::Hook {
            hook: sae.hook.to_string(),
            detail: "not captured".into(),
        })?;
    sae.encode_activations(&act)
}

fn check_features(set: &BTreeSet<usize>, d_hid: usize) -> Result<()> {
    match set.iter().find(|&&f| f >= d_hid) {
        Some(&feature) => Err(MifinError::FeatureId { feature, d_hid }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
}

/// Pool token latents into one vector per text.
pub fn pool_latents(latents: &Matrix, pooling: Pooling) -> Vec<f32> {
    let mut out = vec![0.0f32; latents.cols()];
    match pooling {
        Pooling::Max => {
            for row in latents.iter_rows() {
                out.iter_mut().zip(row).for_each(|(o, v)| *o = o.max(*v));
            }
        }
        Pooling::Mean => {
            let mut acc = vec![0.0f64; latents.cols()];
            for row in latents.iter_rows() {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
            }
            let n = latents.rows().max(1) as f64;
            out.iter_mut().zip(acc).for_each(|(o, a)| *o = (a / n) as f32);
        }
    }
    out
}

pub fn pool_features(bundle: &ModelBundle, sae: &Sae, text: &str, pooling: Pooling) -> Result<Vec<f32>> {
    Ok(pool_latents(&text_latents(bundle, sae, text)?, pooling))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    Flagged,
    Approved,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasWeighting {
    /// Fraction of activated features in the bias set.
    #[default]
    Count,
    /// Fraction of peak activation mass carried by the bias set.
    Mass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasScanResult {
    pub text: String,
    pub bias_ratio: f64,
    pub theta: f64,
    pub status: ScanStatus,
    pub activated: Vec<usize>,
    pub bias_hits: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasScanParams {
    pub epsilon: f32,
    pub theta: f64,
    pub weighting: BiasWeighting,
}

impl Default for BiasScanParams {
    fn default() -> Self {
        Self {
            epsilon: ACTIVATION_EPSILON,
            theta: DEFAULT_THETA,
            weighting: BiasWeighting::Count,
        }
    }
}

/// Bias scan over precomputed latents.
pub fn bias_scan_latents(
    latents: &Matrix,
    bias_set: &BTreeSet<usize>,
    text: &str,
    params: &BiasScanParams,
) -> Result<BiasScanResult> {
    if !(params.theta > 0.0 && params.theta < 1.0) {
        return Err(MifinError::InvalidParam(format!("theta must lie in (0, 1), got {}", params.theta)));
    }
    check_features(bias_set, latents.cols())?;
    let peak = pool_latents(latents, Pooling::Max);
    let activated: Vec<usize> = (0..peak.len()).filter(|&f| peak[f] > params.epsilon).collect();
    let bias_hits: Vec<usize> = activated.iter().copied().filter(|f| bias_set.contains(f)).collect();
    let bias_ratio = match params.weighting {
        BiasWeighting::Count if activated.is_empty() => 0.0,
        BiasWeighting::Count => bias_hits.len() as f64 / activated.len() as f64,
        BiasWeighting::Mass => {
            let total: f64 = activated.iter().map(|&f| peak[f] as f64).sum();
            let hit: f64 = bias_hits.iter().map(|&f| peak[f] as f64).sum();
            if total > 0.0 {
                hit / total
            } else {
                0.0
            }
        }
    };
    Ok(BiasScanResult {
        text: text.to_string(),
        bias_ratio,
        theta: params.theta,
        status: if bias_ratio > params.theta {
            ScanStatus::Flagged
        } else {
            ScanStatus::Approved
        },
        activated,
        bias_hits,
    })
}

pub fn bias_scan(
    bundle: &ModelBundle,
    sae: &Sae,
    bias_set: &BTreeSet<usize>,
    text: &str,
    params: &BiasScanParams,
) -> Result<BiasScanResult> {
    if text.is_empty() {
        return Err(MifinError::EmptyInput);
    }
    let latents = text_latents(bundle, sae, text)?;
    bias_scan_latents(&latents, bias_set, text, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub finance_ratio: f64,
    pub threshold: f64,
    pub triggered: bool,
    pub selected: Vec<usize>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(MifinError::InvalidParam(format!(
            "gate threshold must lie in [0, 1), got {threshold}"
        )));
    }
    Ok(())
}

/// Gate over precomputed latents: the set's share of total activation
/// mass, summed over tokens. Zero total mass gives ratio 0.
pub fn gate_from_latents(latents: &Matrix, set: &BTreeSet<usize>, threshold: f64) -> Result<GateDecision> {
    check_threshold(threshold)?;
    if set.is_empty() {
        return Err(MifinError::InvalidParam("finance feature set is empty".into()));
    }
    check_features(set, latents.cols())?;
    let (mut selected_mass, mut total) = (0.0f64, 0.0f64);
    for row in latents.iter_rows() {
        for (f, &v) in row.iter().enumerate() {
            total += v as f64;
            if set.contains(&f) {
                selected_mass += v as f64;
            }
        }
    }
    let finance_ratio = if total > 0.0 { selected_mass / total } else { 0.0 };
    Ok(GateDecision {
        finance_ratio,
        threshold,
        triggered: finance_ratio < threshold,
        selected: set.iter().copied().collect(),
    })
}

pub fn rag_gate(
    bundle: &ModelBundle,
    sae: &Sae,
    finance_set: &BTreeSet<usize>,
    generated: &str,
    threshold: f64,
) -> Result<GateDecision> {
    check_threshold(threshold)?;
    let ids = bundle.encode(generated);
    if ids.is_empty() {
        return gate_from_latents(&Matrix::zeros(0, sae.d_hid()), finance_set, threshold);
    }
    gate_from_latents(&token_latents(bundle, sae, &ids)?, finance_set, threshold)
}

/// Read a JSON list of feature ids.
pub fn read_feature_set(path: &std::path::Path) -> Result<BTreeSet<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| MifinError::load(path, e))?;
    let ids: Vec<usize> = serde_json::from_str(&text)?;
    Ok(ids.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn row(v: &[f32]) -> Matrix {
        Matrix::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn two_of_five_activated_is_flagged_at_default_theta() {
        let h = row(&[1.0, 0.5, 0.0, 2.0, 0.1, 0.3, 0.0]);
        let r = bias_scan_latents(&h, &set(&[0, 3, 6]), "t", &BiasScanParams::default()).unwrap();
        assert_eq!(r.activated, vec![0, 1, 3, 4, 5]);
        assert_eq!(r.bias_ratio, 0.4);
        assert_eq!(r.status, ScanStatus::Flagged);
    }

    #[test]
    fn empty_bias_set_and_silent_text_are_approved() {
        let h = row(&[1.0, 0.5]);
        let r = bias_scan_latents(&h, &set(&[]), "t", &BiasScanParams::default()).unwrap();
        assert_eq!((r.bias_ratio, r.status), (0.0, ScanStatus::Approved));
        let z = row(&[0.0, 0.0]);
        let r = bias_scan_latents(&z, &set(&[0]), "t", &BiasScanParams::default()).unwrap();
        assert_eq!((r.bias_ratio, r.status), (0.0, ScanStatus::Approved));
    }

    #[test]
    fn toy_gate_arithmetic() {
        let h = row(&[2.0, 1.0, 1.0]);
        let g = gate_from_latents(&h, &set(&[0]), DEFAULT_GATE_THRESHOLD).unwrap();
        assert_eq!((g.finance_ratio, g.triggered), (0.5, false));
        let g = gate_from_latents(&h, &set(&[2]), 0.30).unwrap();
        assert_eq!((g.finance_ratio, g.triggered), (0.25, true));
        let g = gate_from_latents(&h, &set(&[0, 1, 2]), DEFAULT_GATE_THRESHOLD).unwrap();
        assert_eq!((g.finance_ratio, g.triggered), (1.0, false));
    }

    #[test]
    fn gate_threshold_bounds() {
        let h = row(&[0.0, 0.0]);
        assert!(gate_from_latents(&h, &set(&[0]), 1.0).is_err());
        let g = gate_from_latents(&h, &set(&[0]), 0.0).unwrap();
        assert!(!g.triggered);
        let g = gate_from_latents(&h, &set(&[0]), 0.2).unwrap();
        assert!(g.triggered);
    }

    #[test]
    fn pooling_arithmetic() {
        let h = Matrix::new(2, 2, vec![0.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(pool_latents(&h, Pooling::Max), vec![2.0, 3.0]);
        assert_eq!(pool_latents(&h, Pooling::Mean), vec![1.0, 2.0]);
        let one = row(&[0.5, 1.5]);
        assert_eq!(pool_latents(&one, Pooling::Max), pool_latents(&one, Pooling::Mean));
    }
}
