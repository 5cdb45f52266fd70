// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2 family runtime: weights, tokenizer, hooked forward pass, decoding.

mod bundle;
mod config;
pub mod fixture;
mod forward;
mod generate;
pub mod hooks;
mod tokenizer;

pub use bundle::{
    LayerWeights, ModelBundle, Unembed, CONFIG_FILE, MERGES_FILE, VOCAB_FILE, WEIGHTS_FILE,
};
pub use config::ModelConfig;
pub use forward::{gelu, layer_norm};
pub(crate) use forward::{PassOptions, Start};
pub use generate::{Decoding, GenerateParams, Generation};
pub use hooks::{
    Action, ActivationCache, Capture, HookPoint, Intervention, Payload, Positions, RowTransform,
};
pub use tokenizer::Tokenizer;
