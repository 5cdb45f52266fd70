// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens: read each layer's residual stream through the model's own
//! output head.
//!
//! Cell `(layer, pos)` is `softmax(W_out · LN_f(resid_post[layer, pos]) +
//! b_out)`. The final layernorm is applied by default; without it the
//! projection of raw pre-norm residuals is badly scaled for GPT-2, but the
//! unnormalized form stays available for comparison.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{MifinError, Result};
use crate::model::{Capture, HookPoint, ModelBundle};
use crate::tensor::{softmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenProb {
    pub token: u32,
    pub text: String,
    pub prob: f32,
    pub logit: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LensGrid {
    pub tokens: Vec<u32>,
    pub token_texts: Vec<String>,
    pub apply_final_ln: bool,
    /// `cells[layer][pos]`, each the top-k of the full distribution.
    pub cells: Vec<Vec<Vec<TokenProb>>>,
}

/// Lens logits for every layer, `[n_pos × vocab]` each.
pub fn lens_logits(bundle: &ModelBundle, tokens: &[u32], apply_final_ln: bool) -> Result<Vec<Matrix>> {
    let n_layers = bundle.config.n_layers;
    let (_, cache) = bundle.forward(tokens, &Capture::resid_post_all(n_layers))?;
    (0..n_layers)
        .map(|l| {
            let resid = cache.require(&HookPoint::ResidPost(l))?;
            Ok(if apply_final_ln {
                bundle.final_ln_unembed(resid)
            } else {
                bundle.unembed_rows(resid)
            })
        })
        .collect()
}

/// Top-k of the softmax of one logit row; ties go to the lower id.
pub fn top_k(bundle: &ModelBundle, logits: &[f32], k: usize) -> Result<Vec<TokenProb>> {
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    let k = k.min(order.len());
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
        .into_iter()
        .map(|i| {
            Ok(TokenProb {
                token: i as u32,
                text: bundle.tokenizer.token_text(i as u32)?,
                prob: probs[i],
                logit: logits[i],
            })
        })
        .collect()
}

pub fn logit_lens_grid(
    bundle: &ModelBundle,
    tokens: &[u32],
    k: usize,
    apply_final_ln: bool,
) -> Result<LensGrid> {
    if tokens.is_empty() {
        return Err(MifinError::EmptyInput);
    }
    if k == 0 {
        return Err(MifinError::InvalidParam("top_k must be at least 1".into()));
    }
    let per_layer = lens_logits(bundle, tokens, apply_final_ln)?;
    let cells = per_layer
        .iter()
        .map(|m| m.iter_rows().map(|row| top_k(bundle, row, k)).collect())
        .collect::<Result<_>>()?;
    Ok(LensGrid {
        tokens: tokens.to_vec(),
        token_texts: tokens
            .iter()
            .map(|&t| bundle.tokenizer.token_text(t))
            .collect::<Result<_>>()?,
        apply_final_ln,
        cells,
    })
}

/// Per-layer `lens_logit(a) − lens_logit(b)` at the final position.
pub fn logit_diff_trajectory_ids(
    bundle: &ModelBundle,
    tokens: &[u32],
    token_a: u32,
    token_b: u32,
) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(MifinError::EmptyInput);
    }
    let last = tokens.len() - 1;
    Ok(lens_logits(bundle, tokens, true)?
        .iter()
        .map(|m| m.get(last, token_a as usize) - m.get(last, token_b as usize))
        .collect())
}

/// As [`logit_diff_trajectory_ids`], for words that must each encode to a
/// single token.
pub fn logit_diff_trajectory(
    bundle: &ModelBundle,
    tokens: &[u32],
    word_a: &str,
    word_b: &str,
) -> Result<Vec<f32>> {
    let a = bundle.single_token(word_a)?;
    let b = bundle.single_token(word_b)?;
    logit_diff_trajectory_ids(bundle, tokens, a, b)
}

/// Layer-wise mean of trajectories over several prompts.
pub fn mean_trajectory(
    bundle: &ModelBundle,
    prompts: &[String],
    word_a: &str,
    word_b: &str,
) -> Result<Vec<f32>> {
    if prompts.is_empty() {
        return Err(MifinError::EmptyInput);
    }
    let mut acc = vec![0.0f64; bundle.config.n_layers];
    for p in prompts {
        let t = logit_diff_trajectory(bundle, &bundle.encode(p), word_a, word_b)?;
        acc.iter_mut().zip(t).for_each(|(a, v)| *a += v as f64);
    }
    Ok(acc.into_iter().map(|a| (a / prompts.len() as f64) as f32).collect())
}

impl LensGrid {
    /// `layer,pos,rank,token,prob` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "pos", "rank", "token", "prob"])?;
        for (l, row) in self.cells.iter().enumerate() {
            for (p, cell) in row.iter().enumerate() {
                for (rank, tp) in cell.iter().enumerate() {
                    w.write_record([
                        l.to_string(),
                        p.to_string(),
                        rank.to_string(),
                        tp.text.clone(),
                        format!("{:.6}", tp.prob),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| MifinError::Io(e.into_error()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Heatmap of top-1 tokens, shaded by probability bin.
    pub fn render_ascii(&self) -> String {
        const SHADES: &[char] = &[' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
        let width = 10;
        let clip = |s: &str| -> String {
            let s = s.replace('\n', "\\n");
            s.chars().take(width).collect()
        };
        let mut out = String::new();
        let _ = write!(out, "{:>6} ", "");
        for t in &self.token_texts {
            let _ = write!(out, "{:<w$} ", clip(t), w = width + 2);
        }
        out.push('\n');
        for (l, row) in self.cells.iter().enumerate().rev() {
            let _ = write!(out, "L{l:<5} ");
            for cell in row {
                let top = &cell[0];
                let bin = ((top.prob * SHADES.len() as f32) as usize).min(SHADES.len() - 1);
                let _ = write!(out, "{}{:<w$} ", SHADES[bin], clip(&top.text), w = width + 1);
            }
            out.push('\n');
        }
        out
    }
}
