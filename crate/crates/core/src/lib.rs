// SPDX-License-Identifier: MIT OR Apache-2.0

//! # mifin-core
//!
//! Mechanistic-interpretability engine for small GPT-2 family decoders.
//!
//! Observation: hooked forward passes ([`model`]), corpus-scale activation
//! stores ([`store`]), the logit lens ([`lens`]) and sparse-autoencoder
//! feature discovery ([`sae`], [`interp`]). Intervention: activation
//! patching and resample ablation ([`patching`]) and SAE feature steering.
//! The [`fin`] module builds the finance applications (bias scanning,
//! activation-gated retrieval, feature decision trees, steered sentiment
//! evaluation) on top of those primitives.
//!
//! ```no_run
//! use mifin_core::model::{Capture, HookPoint, ModelBundle};
//!
//! # fn main() -> mifin_core::Result<()> {
//! let bundle = ModelBundle::load("models/gpt2".as_ref())?;
//! let tokens = bundle.encode("With good earnings the stock price of company will likely");
//! let (logits, cache) = bundle.forward(&tokens, &Capture::of([HookPoint::ResidPost(6)]))?;
//! let resid = cache.require(&HookPoint::ResidPost(6))?;
//! assert_eq!(resid.rows(), logits.rows());
//! # Ok(())
//! # }
//! ```

pub mod error;
pub mod fin;
pub mod interp;
pub mod lens;
pub mod model;
pub mod patching;
pub mod sae;
pub mod store;
pub mod synthetic;
pub mod tensor;

pub use error::{MifinError, Result};
pub use model::{ActivationCache, Capture, HookPoint, Intervention, ModelBundle, ModelConfig};
pub use tensor::Matrix;
