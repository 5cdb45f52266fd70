// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};

/// Shape of a GPT-2 family decoder.
///
/// Both the native key names and the Hugging Face GPT-2 names
/// (`n_layer`, `n_embd`, ...) are accepted when reading `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(alias = "n_layer")]
    pub n_layers: usize,
    #[serde(alias = "n_head")]
    pub n_heads: usize,
    #[serde(alias = "n_embd")]
    pub d_model: usize,
    #[serde(alias = "n_inner", default, deserialize_with = "nullable")]
    pub d_mlp: usize,
    pub vocab_size: usize,
    #[serde(alias = "n_positions", alias = "n_ctx")]
    pub context_len: usize,
    #[serde(alias = "layer_norm_epsilon", default = "default_eps")]
    pub layernorm_eps: f32,
}

fn default_eps() -> f32 {
    1e-5
}

fn nullable<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<usize, D::Error> {
    Ok(Option::<usize>::deserialize(d)?.unwrap_or(0))
}

impl ModelConfig {
    /// GPT-2 Small (124M).
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_mlp: 3072,
            vocab_size: 50257,
            context_len: 1024,
            layernorm_eps: 1e-5,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parse `config.json` text, filling `d_mlp = 4 * d_model` when absent.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ModelConfig = serde_json::from_str(text)?;
        if cfg.d_mlp == 0 {
            cfg.d_mlp = 4 * cfg.d_model;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MifinError::shape(name, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MifinError::shape(
                "d_model",
                format!(
                    "d_model={} is not divisible by n_heads={}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if !(self.layernorm_eps > 0.0 && self.layernorm_eps.is_finite()) {
            return Err(MifinError::shape("layernorm_eps", "must be a small positive value"));
        }
        Ok(())
    }
}
