// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loading and saving GPT-2 family weights.
//!
//! Tensor names follow the Hugging Face GPT-2 checkpoint, so an unmodified
//! `model.safetensors` from that layout loads directly. Linear weights are
//! stored `[in × out]`. The output head defaults to the tied token
//! embedding; an explicit head may be stored as `unembed.weight`
//! (`[d_model × vocab]`) and `unembed.bias`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{MifinError, Result};
use crate::model::{ModelConfig, Tokenizer};
use crate::tensor::Matrix;

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    /// `[d_model × 3 d_model]`, column blocks q | k | v.
    pub attn_w: Matrix,
    pub attn_b: Vec<f32>,
    pub attn_proj_w: Matrix,
    pub attn_proj_b: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub fc_w: Matrix,
    pub fc_b: Vec<f32>,
    pub fc_proj_w: Matrix,
    pub fc_proj_b: Vec<f32>,
}

/// Output head `logits = h @ W_out + b_out`.
#[derive(Clone, Debug)]
pub enum Unembed {
    /// `W_out = token_embedding^T`, `b_out = 0`.
    Tied,
    Explicit { weight: Matrix, bias: Vec<f32> },
}

/// Immutable transformer weights, configuration, and tokenizer.
#[derive(Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f_g: Vec<f32>,
    pub ln_f_b: Vec<f32>,
    pub unembed: Unembed,
    pub tokenizer: Tokenizer,
    zero_bias: Vec<f32>,
    hash: String,
}

struct TensorSource<'a> {
    st: SafeTensors<'a>,
    prefix: &'static str,
}

impl TensorSource<'_> {
    fn has(&self, name: &str) -> bool {
        self.st.tensor(&format!("{}{name}", self.prefix)).is_ok()
    }

    fn raw(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let full = format!("{}{name}", self.prefix);
        let view = self
            .st
            .tensor(&full)
            .map_err(|_| MifinError::shape(name, "tensor missing from weights file"))?;
        if view.dtype() != Dtype::F32 {
            return Err(MifinError::shape(
                name,
                format!("dtype {:?}, only F32 is supported", view.dtype()),
            ));
        }
        if view.shape() != shape {
            return Err(MifinError::shape(
                name,
                format!("shape {:?}, expected {:?}", view.shape(), shape),
            ));
        }
        Ok(view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.raw(name, &[rows, cols])?)
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        self.raw(name, &[len])
    }
}

impl ModelBundle {
    /// Load `config.json`, `model.safetensors`, `vocab.json`, `merges.txt`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| MifinError::load(p, e))
        };
        let config_bytes = read(CONFIG_FILE)?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let weights = if weights_path.exists() {
            read(WEIGHTS_FILE)?
        } else {
            let found = std::fs::read_dir(dir)
                .map_err(|e| MifinError::load(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
                .min();
            let p = found.ok_or_else(|| MifinError::load(&weights_path, "no .safetensors file"))?;
            std::fs::read(&p).map_err(|e| MifinError::load(p, e))?
        };
        let tokenizer = Tokenizer::from_bytes(read(VOCAB_FILE)?, read(MERGES_FILE)?)?;
        let text = std::str::from_utf8(&config_bytes)
            .map_err(|e| MifinError::load(dir.join(CONFIG_FILE), e))?;
        let config = ModelConfig::from_json(text)?;
        let mut bundle = Self::from_safetensors(config, &weights, tokenizer)?;
        let mut h = Sha256::new();
        h.update(&config_bytes);
        h.update(&weights);
        bundle.hash = hex::encode(h.finalize());
        Ok(bundle)
    }

    pub fn from_safetensors(config: ModelConfig, bytes: &[u8], tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| MifinError::load(WEIGHTS_FILE, format!("{e:?}")))?;
        let prefix = if st.tensor("transformer.wte.weight").is_ok() {
            "transformer."
        } else {
            ""
        };
        let src = TensorSource { st, prefix };
        let c = &config;
        let (d, v, m) = (c.d_model, c.vocab_size, c.d_mlp);
        let token_embedding = src.matrix("wte.weight", v, d)?;
        let position_embedding = src.matrix("wpe.weight", c.context_len, d)?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let n = |s: &str| format!("h.{i}.{s}");
            layers.push(LayerWeights {
                ln1_g: src.vector(&n("ln_1.weight"), d)?,
                ln1_b: src.vector(&n("ln_1.bias"), d)?,
                attn_w: src.matrix(&n("attn.c_attn.weight"), d, 3 * d)?,
                attn_b: src.vector(&n("attn.c_attn.bias"), 3 * d)?,
                attn_proj_w: src.matrix(&n("attn.c_proj.weight"), d, d)?,
                attn_proj_b: src.vector(&n("attn.c_proj.bias"), d)?,
                ln2_g: src.vector(&n("ln_2.weight"), d)?,
                ln2_b: src.vector(&n("ln_2.bias"), d)?,
                fc_w: src.matrix(&n("mlp.c_fc.weight"), d, m)?,
                fc_b: src.vector(&n("mlp.c_fc.bias"), m)?,
                fc_proj_w: src.matrix(&n("mlp.c_proj.weight"), m, d)?,
                fc_proj_b: src.vector(&n("mlp.c_proj.bias"), d)?,
            });
        }
        let unembed = if src.has("unembed.weight") {
            Unembed::Explicit {
                weight: src.matrix("unembed.weight", d, v)?,
                bias: src.vector("unembed.bias", v)?,
            }
        } else {
            Unembed::Tied
        };
        if tokenizer.vocab_size() > v {
            return Err(MifinError::shape(
                "vocab_size",
                format!("tokenizer has {} ids, model {v}", tokenizer.vocab_size()),
            ));
        }
        let mut h = Sha256::new();
        h.update(bytes);
        Ok(Self {
            ln_f_g: src.vector("ln_f.weight", d)?,
            ln_f_b: src.vector("ln_f.bias", d)?,
            config,
            token_embedding,
            position_embedding,
            layers,
            unembed,
            tokenizer,
            zero_bias: vec![0.0; v],
            hash: hex::encode(h.finalize()),
        })
    }

    /// Assemble from in-memory parts (used by the fixture generator).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: ModelConfig,
        token_embedding: Matrix,
        position_embedding: Matrix,
        layers: Vec<LayerWeights>,
        ln_f_g: Vec<f32>,
        ln_f_b: Vec<f32>,
        unembed: Unembed,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        let bytes = Self::serialize_parts(
            &token_embedding,
            &position_embedding,
            &layers,
            &ln_f_g,
            &ln_f_b,
            &unembed,
        )?;
        Self::from_safetensors(config, &bytes, tokenizer)
    }

    /// SHA-256 over config and weights as loaded; identifies the model in
    /// store and checkpoint manifests.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn unembed_bias(&self) -> &[f32] {
        match &self.unembed {
            Unembed::Tied => &self.zero_bias,
            Unembed::Explicit { bias, .. } => bias,
        }
    }

    /// Materialized `W_out` (`[d_model × vocab]`).
    pub fn unembed_weight(&self) -> Matrix {
        match &self.unembed {
            Unembed::Tied => self.token_embedding.transpose(),
            Unembed::Explicit { weight, .. } => weight.clone(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        self.tokenizer.decode(ids)
    }

    /// Encode a word that must be exactly one token.
    pub fn single_token(&self, word: &str) -> Result<u32> {
        let ids = self.encode(word);
        if ids.len() == 1 {
            return Ok(ids[0]);
        }
        let suggestion = if word.starts_with(' ') {
            word.trim_start().to_string()
        } else {
            format!(" {word}")
        };
        Err(MifinError::MultiTokenWord {
            word: word.to_string(),
            n_tokens: ids.len(),
            suggestion,
        })
    }

    fn serialize_parts(
        wte: &Matrix,
        wpe: &Matrix,
        layers: &[LayerWeights],
        ln_f_g: &[f32],
        ln_f_b: &[f32],
        unembed: &Unembed,
    ) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            tensors.push((name, shape, bytes));
        };
        let mat = |m: &Matrix| vec![m.rows(), m.cols()];
        push("wte.weight".into(), mat(wte), wte.data());
        push("wpe.weight".into(), mat(wpe), wpe.data());
        for (i, l) in layers.iter().enumerate() {
            let n = |s: &str| format!("h.{i}.{s}");
            push(n("ln_1.weight"), vec![l.ln1_g.len()], &l.ln1_g);
            push(n("ln_1.bias"), vec![l.ln1_b.len()], &l.ln1_b);
            push(n("attn.c_attn.weight"), mat(&l.attn_w), l.attn_w.data());
            push(n("attn.c_attn.bias"), vec![l.attn_b.len()], &l.attn_b);
            push(n("attn.c_proj.weight"), mat(&l.attn_proj_w), l.attn_proj_w.data());
            push(n("attn.c_proj.bias"), vec![l.attn_proj_b.len()], &l.attn_proj_b);
            push(n("ln_2.weight"), vec![l.ln2_g.len()], &l.ln2_g);
            push(n("ln_2.bias"), vec![l.ln2_b.len()], &l.ln2_b);
            push(n("mlp.c_fc.weight"), mat(&l.fc_w), l.fc_w.data());
            push(n("mlp.c_fc.bias"), vec![l.fc_b.len()], &l.fc_b);
            push(n("mlp.c_proj.weight"), mat(&l.fc_proj_w), l.fc_proj_w.data());
            push(n("mlp.c_proj.bias"), vec![l.fc_proj_b.len()], &l.fc_proj_b);
        }
        push("ln_f.weight".into(), vec![ln_f_g.len()], ln_f_g);
        push("ln_f.bias".into(), vec![ln_f_b.len()], ln_f_b);
        if let Unembed::Explicit { weight, bias } = unembed {
            push("unembed.weight".into(), mat(weight), weight.data());
            push("unembed.bias".into(), vec![bias.len()], bias);
        }
        let views = tensors
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| MifinError::shape(name, format!("{e:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        // One key only: the header serializes a HashMap, and a second key
        // would make the byte layout depend on hash order.
        let meta: HashMap<String, String> = [("format".to_string(), "pt".to_string())].into();
        safetensors::serialize(views, Some(meta))
            .map_err(|e| MifinError::load(WEIGHTS_FILE, format!("{e:?}")))
    }

    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        Self::serialize_parts(
            &self.token_embedding,
            &self.position_embedding,
            &self.layers,
            &self.ln_f_g,
            &self.ln_f_b,
            &self.unembed,
        )
    }

    /// Write the four model files into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut cfg = serde_json::to_string_pretty(&self.config)?;
        cfg.push('\n');
        std::fs::write(dir.join(CONFIG_FILE), cfg)?;
        std::fs::write(dir.join(WEIGHTS_FILE), self.to_safetensors()?)?;
        std::fs::write(dir.join(VOCAB_FILE), self.tokenizer.raw_vocab())?;
        std::fs::write(dir.join(MERGES_FILE), self.tokenizer.raw_merges())?;
        Ok(())
    }
}
