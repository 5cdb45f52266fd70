// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::forward::{PassOptions, Start};
use crate::model::hooks::{Capture, Intervention};
use crate::model::ModelBundle;
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decoding {
    #[default]
    Greedy,
    Temperature { tau: f32, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GenerateParams {
    pub max_new_tokens: usize,
    pub decoding: Decoding,
    /// Re-applied on every decoding step. Explicit positions index the
    /// full sequence (the prompt starts at 0) and are ignored until the
    /// sequence is long enough to contain them.
    pub interventions: Vec<Intervention>,
}

impl GenerateParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            decoding: Decoding::Greedy,
            interventions: Vec::new(),
        }
    }

    pub fn with_interventions(mut self, interventions: Vec<Intervention>) -> Self {
        self.interventions = interventions;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Generation {
    /// Newly generated ids, prompt excluded.
    pub tokens: Vec<u32>,
    /// Set when the context window filled before `max_new_tokens`.
    pub truncated: bool,
}

impl ModelBundle {
    pub fn generate(&self, prompt: &[u32], params: &GenerateParams) -> Result<Generation> {
        self.generate_with(prompt, params, |_| true)
    }

    /// As [`ModelBundle::generate`], calling `on_token` after each new
    /// token; returning `false` stops decoding early.
    pub fn generate_with(
        &self,
        prompt: &[u32],
        params: &GenerateParams,
        mut on_token: impl FnMut(u32) -> bool,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(MifinError::EmptyInput);
        }
        if params.max_new_tokens == 0 {
            return Err(MifinError::InvalidParam("max_new_tokens must be at least 1".into()));
        }
        if prompt.len() > self.config.context_len {
            return Err(MifinError::ContextLength {
                len: prompt.len(),
                max: self.config.context_len,
            });
        }
        let mut rng = match params.decoding {
            Decoding::Temperature { tau, seed } => {
                if tau.is_nan() || tau <= 0.0 {
                    return Err(MifinError::InvalidParam("temperature must be positive".into()));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            Decoding::Greedy => None,
        };
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(params.max_new_tokens);
        let opts = PassOptions {
            last_logits_only: true,
        };
        let capture = Capture::none();
        for _ in 0..params.max_new_tokens {
            if seq.len() >= self.config.context_len {
                return Ok(Generation {
                    tokens: out,
                    truncated: true,
                });
            }
            let step: Vec<Intervention> = params
                .interventions
                .iter()
                .map(|iv| iv.clipped(seq.len()))
                .collect();
            let (logits, _) = self.run(&seq, Start::Tokens, &step, &capture, &opts)?;
            let last = logits.row(logits.rows() - 1);
            let next = match (&params.decoding, rng.as_mut()) {
                (Decoding::Temperature { tau, .. }, Some(rng)) => sample(last, *tau, rng),
                _ => argmax(last) as u32,
            };
            seq.push(next);
            out.push(next);
            if !on_token(next) {
                break;
            }
        }
        Ok(Generation {
            tokens: out,
            truncated: false,
        })
    }

    /// Greedy continuation of `text`, decoded.
    pub fn complete(&self, text: &str, params: &GenerateParams) -> Result<String> {
        let gen = self.generate(&self.encode(text), params)?;
        self.decode(&gen.tokens)
    }
}

fn sample(logits: &[f32], tau: f32, rng: &mut ChaCha8Rng) -> u32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|l| (((l - max) / tau) as f64).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng) as u32,
        Err(_) => argmax(logits) as u32,
    }
}
