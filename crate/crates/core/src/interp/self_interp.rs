// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-interpretation: ask the model to define a placeholder word while a
//! feature is steered in at that word's positions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::{GenerateParams, ModelBundle, Positions};
use crate::sae::{steering_vector, Sae, SteeringMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfInterpretParams {
    pub placeholder: String,
    pub max_new_tokens: usize,
    pub mode: SteeringMode,
}

impl Default for SelfInterpretParams {
    fn default() -> Self {
        Self {
            placeholder: "X".into(),
            max_new_tokens: 32,
            mode: SteeringMode::AddDirection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfInterpretation {
    pub feature: usize,
    pub magnitude: f32,
    pub prompt: String,
    /// Prompt positions that were steered.
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    pub text: String,
}

pub fn self_interpret_prompt(word: &str) -> String {
    format!("What is the meaning of the word \"{word}\"?The meaning of the word \"{word}\" is")
}

/// Token positions covering each quoted occurrence of `word` in `text`.
fn word_positions(bundle: &ModelBundle, text: &str, ids: &[u32], word: &str) -> Result<Vec<usize>> {
    let quoted = format!("\"{word}\"");
    let spans: Vec<(usize, usize)> = text
        .match_indices(&quoted)
        .map(|(i, _)| (i + 1, i + 1 + word.len()))
        .collect();
    if spans.is_empty() {
        return Err(MifinError::PromptAssembly(format!("placeholder {word:?} not in prompt")));
    }
    let mut positions = Vec::new();
    let mut offset = 0;
    for (p, &id) in ids.iter().enumerate() {
        let len = bundle.tokenizer.decode_bytes(&[id])?.len();
        let (a, b) = (offset, offset + len);
        if spans.iter().any(|&(s, e)| a < e && s < b) {
            positions.push(p);
        }
        offset = b;
    }
    if offset != text.len() || positions.is_empty() {
        return Err(MifinError::PromptAssembly(format!(
            "could not locate tokens of {word:?} in the encoded prompt"
        )));
    }
    Ok(positions)
}

pub fn self_interpret(
    bundle: &ModelBundle,
    sae: &Arc<Sae>,
    feature: usize,
    magnitude: f32,
    params: &SelfInterpretParams,
) -> Result<SelfInterpretation> {
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(MifinError::InvalidParam(format!(
            "magnitude must be finite and non-negative, got {magnitude}"
        )));
    }
    if params.placeholder.trim().is_empty() {
        return Err(MifinError::PromptAssembly("empty placeholder word".into()));
    }
    let prompt = self_interpret_prompt(&params.placeholder);
    let ids = bundle.encode(&prompt);
    let positions = word_positions(bundle, &prompt, &ids, &params.placeholder)?;
    let mut iv = steering_vector(sae, feature, magnitude, params.mode)?;
    iv.positions = Positions::Only(positions.clone());
    let gen = bundle.generate(
        &ids,
        &GenerateParams::greedy(params.max_new_tokens).with_interventions(vec![iv]),
    )?;
    Ok(SelfInterpretation {
        feature,
        magnitude,
        prompt,
        positions,
        text: bundle.decode(&gen.tokens)?,
        tokens: gen.tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::tiny_model;
    use crate::model::HookPoint;
    use crate::sae::{SaeConfig, SaeParams};

    fn sae(d: usize) -> Arc<Sae> {
        let p = SaeParams::init(&SaeConfig::expansion(d, 0.0)).unwrap();
        Arc::new(Sae::new(p, HookPoint::ResidPost(0), None).unwrap())
    }

    #[test]
    fn steers_exactly_the_placeholder_tokens() {
        let m = tiny_model();
        let prompt = self_interpret_prompt("X");
        let ids = m.encode(&prompt);
        let pos = word_positions(&m, &prompt, &ids, "X").unwrap();
        assert_eq!(pos.len(), 2);
        for p in pos {
            assert_eq!(m.tokenizer.token_text(ids[p]).unwrap(), "X");
        }
    }

    #[test]
    fn zero_magnitude_equals_unsteered_answer() {
        let m = tiny_model();
        let s = sae(m.config.d_model);
        let params = SelfInterpretParams {
            max_new_tokens: 6,
            ..SelfInterpretParams::default()
        };
        let out = self_interpret(&m, &s, 2, 0.0, &params).unwrap();
        let plain = m
            .generate(&m.encode(&self_interpret_prompt("X")), &GenerateParams::greedy(6))
            .unwrap();
        assert_eq!(out.tokens, plain.tokens);
        assert_eq!(out, self_interpret(&m, &s, 2, 0.0, &params).unwrap());
    }

    #[test]
    fn negative_magnitude_is_rejected() {
        let m = tiny_model();
        let err = self_interpret(&m, &sae(m.config.d_model), 0, -1.0, &SelfInterpretParams::default());
        assert!(matches!(err, Err(MifinError::InvalidParam(_))));
    }
}
