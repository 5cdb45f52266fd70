// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared benchmark inputs.

use mifin_core::model::fixture::FixtureSpec;
use mifin_core::ModelBundle;

/// A four-layer fixture large enough that matmuls dominate.
pub fn bench_model() -> ModelBundle {
    FixtureSpec {
        n_layers: 4,
        n_heads: 4,
        d_model: 128,
        d_mlp: 512,
        seed: 1,
        ..FixtureSpec::default()
    }
    .build()
    .expect("valid fixture")
}

pub const PROMPT: &str = "With good earnings the stock price of company will likely";
