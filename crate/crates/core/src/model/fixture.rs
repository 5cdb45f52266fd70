// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small random GPT-2 shaped models for tests and demos.
//!
//! Fixtures share the real GPT-2 tokenizer so every text path works; only
//! the widths are tiny.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{LayerWeights, ModelBundle, ModelConfig, Tokenizer, Unembed};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub context_len: usize,
    pub seed: u64,
    /// Store an explicit output head instead of tying it to the embedding.
    pub explicit_head: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 32,
            context_len: 1024,
            seed: 0,
            explicit_head: false,
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        Matrix::new(rows, cols, self.normal(rows * cols, std)).expect("sized")
    }

    fn gain(&mut self, n: usize) -> Vec<f32> {
        self.normal(n, 0.1).into_iter().map(|v| 1.0 + v).collect()
    }
}

impl FixtureSpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_mlp: self.d_mlp,
            vocab_size: Tokenizer::gpt2().vocab_size(),
            context_len: self.context_len,
            layernorm_eps: 1e-5,
        }
    }

    pub fn build(&self) -> Result<ModelBundle> {
        let config = self.config();
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        };
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let wd = 1.0 / (d as f32).sqrt();
        let wm = 1.0 / (m as f32).sqrt();
        let token_embedding = init.matrix(v, d, 0.5);
        let position_embedding = init.matrix(config.context_len, d, 0.2);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: init.gain(d),
                ln1_b: init.normal(d, 0.05),
                attn_w: init.matrix(d, 3 * d, wd * 1.5),
                attn_b: init.normal(3 * d, 0.05),
                attn_proj_w: init.matrix(d, d, wd),
                attn_proj_b: init.normal(d, 0.05),
                ln2_g: init.gain(d),
                ln2_b: init.normal(d, 0.05),
                fc_w: init.matrix(d, m, wd),
                fc_b: init.normal(m, 0.05),
                fc_proj_w: init.matrix(m, d, wm),
                fc_proj_b: init.normal(d, 0.05),
            })
            .collect();
        let ln_f_g = init.gain(d);
        let ln_f_b = init.normal(d, 0.05);
        let unembed = if self.explicit_head {
            Unembed::Explicit {
                weight: init.matrix(d, v, 0.5),
                bias: init.normal(v, 0.1),
            }
        } else {
            Unembed::Tied
        };
        ModelBundle::from_parts(
            config,
            token_embedding,
            position_embedding,
            layers,
            ln_f_g,
            ln_f_b,
            unembed,
            Tokenizer::gpt2(),
        )
    }
}

/// The default two-layer fixture.
pub fn tiny_model() -> ModelBundle {
    FixtureSpec::default().build().expect("default fixture is valid")
}
