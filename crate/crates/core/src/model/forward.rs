// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-layernorm GPT-2 forward pass with hook capture and interventions.

use std::collections::HashMap;

use crate::error::{MifinError, Result};
use crate::model::hooks::{ActivationCache, Capture, HookPoint, Intervention};
use crate::model::{ModelBundle, Unembed};
use crate::tensor::{gemm_into, Matrix};

/// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`, the GPT-2 GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn layer_norm(x: &Matrix, g: &[f32], b: &[f32], eps: f32) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f32;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, gi), bi) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mean) * inv * gi + bi;
        }
    }
    out
}

fn linear(x: &Matrix, w: &Matrix, b: &[f32]) -> Matrix {
    let mut out = x.matmul(w);
    out.add_row_vector(b);
    out
}

/// Where a pass begins.
pub(crate) enum Start<'a> {
    Tokens,
    /// Residual stream entering `layer` (i.e. after layer `layer - 1`).
    Residual { layer: usize, resid: &'a Matrix },
}

pub(crate) struct PassOptions {
    /// Compute logits for the final position only.
    pub last_logits_only: bool,
}

struct Hooks<'a> {
    edits: HashMap<HookPoint, Vec<&'a Intervention>>,
    capture: &'a Capture,
    cache: ActivationCache,
}

impl Hooks<'_> {
    fn wants(&self, hook: &HookPoint) -> bool {
        self.capture.contains(hook) || self.edits.contains_key(hook)
    }

    /// Apply edits registered at `hook` (in list order), then record.
    fn visit(&mut self, hook: HookPoint, act: &mut Matrix) -> Result<()> {
        if let Some(list) = self.edits.get(&hook) {
            for iv in list {
                iv.apply(act)?;
            }
        }
        if self.capture.contains(&hook) {
            self.cache.insert(hook, act.clone());
        }
        Ok(())
    }
}

impl ModelBundle {
    /// Next-token logits for every position, plus the requested captures.
    pub fn forward(&self, tokens: &[u32], capture: &Capture) -> Result<(Matrix, ActivationCache)> {
        self.forward_with_interventions(tokens, &[], capture)
    }

    pub fn forward_with_interventions(
        &self,
        tokens: &[u32],
        interventions: &[Intervention],
        capture: &Capture,
    ) -> Result<(Matrix, ActivationCache)> {
        self.run(
            tokens,
            Start::Tokens,
            interventions,
            capture,
            &PassOptions {
                last_logits_only: false,
            },
        )
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        start: Start<'_>,
        interventions: &[Intervention],
        capture: &Capture,
        opts: &PassOptions,
    ) -> Result<(Matrix, ActivationCache)> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(MifinError::EmptyInput);
        }
        if n > cfg.context_len {
            return Err(MifinError::ContextLength {
                len: n,
                max: cfg.context_len,
            });
        }
        for h in capture.hooks() {
            h.validate(cfg)?;
        }
        let mut edits: HashMap<HookPoint, Vec<&Intervention>> = HashMap::new();
        for iv in interventions {
            iv.check(cfg, n)?;
            edits.entry(iv.hook).or_default().push(iv);
        }
        let mut hooks = Hooks {
            edits,
            capture,
            cache: ActivationCache::new(tokens.to_vec()),
        };

        let (first_layer, mut resid) = match start {
            Start::Tokens => {
                let mut x = Matrix::zeros(n, cfg.d_model);
                for (p, &t) in tokens.iter().enumerate() {
                    if t as usize >= cfg.vocab_size {
                        return Err(MifinError::TokenId(t));
                    }
                    let te = self.token_embedding.row(t as usize);
                    let pe = self.position_embedding.row(p);
                    for ((o, a), b) in x.row_mut(p).iter_mut().zip(te).zip(pe) {
                        *o = a + b;
                    }
                }
                hooks.visit(HookPoint::EmbedOut, &mut x)?;
                (0, x)
            }
            Start::Residual { layer, resid } => {
                if resid.shape() != (n, cfg.d_model) {
                    return Err(MifinError::shape(
                        "resid",
                        format!("{:?}, expected ({n}, {})", resid.shape(), cfg.d_model),
                    ));
                }
                (layer, resid.clone())
            }
        };

        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f32).sqrt();
        for (l, w) in self.layers.iter().enumerate().skip(first_layer) {
            let h = layer_norm(&resid, &w.ln1_g, &w.ln1_b, cfg.layernorm_eps);
            let qkv = linear(&h, &w.attn_w, &w.attn_b);
            let mut z_cat = Matrix::zeros(n, cfg.d_model);
            for head in 0..cfg.n_heads {
                let q = qkv.column_block(head * dh, dh);
                let k = qkv.column_block(cfg.d_model + head * dh, dh);
                let v = qkv.column_block(2 * cfg.d_model + head * dh, dh);
                let mut pattern = q.matmul_t(&k);
                for i in 0..n {
                    let row = pattern.row_mut(i);
                    let mut max = f32::NEG_INFINITY;
                    for s in row[..=i].iter_mut() {
                        *s *= scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0f32;
                    for s in row[..=i].iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in row[..=i].iter_mut() {
                        *s /= total;
                    }
                    row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
                }
                let pat_hook = HookPoint::AttnPattern { layer: l, head };
                if hooks.wants(&pat_hook) {
                    hooks.visit(pat_hook, &mut pattern)?;
                }
                let mut z = pattern.matmul(&v);
                let z_hook = HookPoint::AttnZ { layer: l, head };
                if hooks.wants(&z_hook) {
                    hooks.visit(z_hook, &mut z)?;
                }
                z_cat.set_column_block(head * dh, &z);
            }
            let mut attn_out = linear(&z_cat, &w.attn_proj_w, &w.attn_proj_b);
            hooks.visit(HookPoint::AttnOut(l), &mut attn_out)?;
            resid.add_assign(&attn_out);
            hooks.visit(HookPoint::ResidMid(l), &mut resid)?;

            let h2 = layer_norm(&resid, &w.ln2_g, &w.ln2_b, cfg.layernorm_eps);
            let mut hidden = linear(&h2, &w.fc_w, &w.fc_b);
            hidden.map_inplace(gelu);
            let mut mlp_out = linear(&hidden, &w.fc_proj_w, &w.fc_proj_b);
            hooks.visit(HookPoint::MlpOut(l), &mut mlp_out)?;
            resid.add_assign(&mlp_out);
            hooks.visit(HookPoint::ResidPost(l), &mut resid)?;
        }

        let mut fin = layer_norm(&resid, &self.ln_f_g, &self.ln_f_b, cfg.layernorm_eps);
        hooks.visit(HookPoint::FinalLnOut, &mut fin)?;
        let logits_only_last = opts.last_logits_only
            && !hooks.capture.contains(&HookPoint::Logits)
            && !hooks.edits.contains_key(&HookPoint::Logits);
        let head_in = if logits_only_last {
            fin.select_rows(&[n - 1])
        } else {
            fin
        };
        let mut logits = self.unembed_rows(&head_in);
        hooks.visit(HookPoint::Logits, &mut logits)?;
        Ok((logits, hooks.cache))
    }

    /// `h @ W_out + b_out` for each row of `h` (already final-normalized).
    pub fn unembed_rows(&self, h: &Matrix) -> Matrix {
        let mut logits = Matrix::zeros(h.rows(), self.config.vocab_size);
        match &self.unembed {
            Unembed::Tied => {
                gemm_into(h, false, &self.token_embedding, true, &mut logits, 1.0, 0.0);
            }
            Unembed::Explicit { weight, bias } => {
                gemm_into(h, false, weight, false, &mut logits, 1.0, 0.0);
                logits.add_row_vector(bias);
            }
        }
        logits
    }

    /// Final layernorm followed by the output head.
    pub fn final_ln_unembed(&self, resid: &Matrix) -> Matrix {
        let fin = layer_norm(resid, &self.ln_f_g, &self.ln_f_b, self.config.layernorm_eps);
        self.unembed_rows(&fin)
    }
}
