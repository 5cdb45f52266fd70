// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch Adam over an activation store.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MetricsAccumulator, SaeConfig, SaeMetrics, SaeParams, ACTIVATION_EPSILON};
use crate::error::{MifinError, Result};
use crate::store::ActivationStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub shuffle_seed: u64,
    pub activation_epsilon: f32,
    /// Fraction of rows held out of training for evaluation.
    pub holdout_fraction: f32,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_seed: 0,
            activation_epsilon: ACTIVATION_EPSILON,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MifinError::InvalidParam(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Means over the steps of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
    pub mean_l0: f64,
    /// Latents inactive on every training row of the epoch.
    pub dead_features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub train_rows: usize,
    pub heldout_rows: usize,
    /// Metrics on the held-out rows, or on the training rows when none
    /// were held out.
    pub final_metrics: SaeMetrics,
    pub explained_variance: f64,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, w: &mut [f32], g: &[f32], p: &TrainParams, t: i32) {
        let c1 = 1.0 - p.beta1.powi(t);
        let c2 = 1.0 - p.beta2.powi(t);
        for i in 0..w.len() {
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g[i];
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            w[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.adam_eps);
        }
    }
}

/// Deterministic split: a seeded permutation, the tail is held out.
fn split_rows(n: usize, fraction: f32, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    if fraction == 0.0 {
        return (rows, Vec::new());
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a17));
    let held = ((n as f64 * fraction as f64).round() as usize).clamp(1, n.saturating_sub(1));
    let heldout = rows.split_off(n - held);
    (rows, heldout)
}

pub fn train_sae(
    store: &ActivationStore,
    cfg: &SaeConfig,
    params: &TrainParams,
) -> Result<(SaeParams, TrainingReport)> {
    cfg.validate()?;
    params.validate()?;
    if store.d_in() != cfg.d_in {
        return Err(MifinError::shape(
            "store",
            format!("width {}, config d_in {}", store.d_in(), cfg.d_in),
        ));
    }
    if store.row_count() == 0 {
        return Err(MifinError::EmptyCorpus);
    }
    let (mut train, heldout) = split_rows(store.row_count(), params.holdout_fraction, params.shuffle_seed);
    let mut sae = SaeParams::init(cfg)?;
    let mut opt = [
        Adam::new(sae.w_enc.data().len()),
        Adam::new(sae.b.len()),
        Adam::new(sae.w_dec.data().len()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(params.shuffle_seed);
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        train.shuffle(&mut rng);
        let mut acc = MetricsAccumulator::new(cfg.d_in, cfg.d_hid, params.activation_epsilon);
        let (mut total, mut mse, mut l1) = (0.0f64, 0.0f64, 0.0f64);
        for (i, batch_rows) in train.chunks(params.batch_size).enumerate() {
            let x = store.read_batch(batch_rows)?;
            let (g, parts) = sae.grad(&x, cfg.alpha)?;
            if !parts.total.is_finite() {
                return Err(MifinError::TrainingDiverged { epoch, step: i });
            }
            let w = batch_rows.len() as f64;
            total += parts.total as f64 * w;
            mse += parts.mse as f64 * w;
            l1 += parts.l1 as f64 * w;
            acc.add_l0(&sae.encode(&x)?);

            step += 1;
            let t = step.min(i32::MAX as usize) as i32;
            opt[0].step(sae.w_enc.data_mut(), g.w_enc.data(), params, t);
            opt[1].step(&mut sae.b, &g.b, params, t);
            opt[2].step(sae.w_dec.data_mut(), g.w_dec.data(), params, t);
            sae.normalize_decoder();
            if !sae.all_finite() {
                return Err(MifinError::TrainingDiverged { epoch, step: i });
            }
        }
        let n = train.len() as f64;
        let stats = EpochStats {
            epoch,
            total: total / n,
            mse: mse / n,
            l1: l1 / n,
            mean_l0: acc.mean_l0(train.len()),
            dead_features: acc.dead(),
        };
        tracing::info!(
            epoch,
            total = stats.total,
            mse = stats.mse,
            mean_l0 = stats.mean_l0,
            dead = stats.dead_features,
            "sae epoch"
        );
        epochs.push(stats);
    }
    let eval_rows = if heldout.is_empty() { &train } else { &heldout };
    let eval = store.read_batch(eval_rows)?;
    let final_metrics = super::sae_metrics(&sae, &eval, params.activation_epsilon)?;
    let report = TrainingReport {
        explained_variance: final_metrics.explained_variance,
        final_metrics,
        epochs,
        steps: step,
        train_rows: train.len(),
        heldout_rows: heldout.len(),
    };
    Ok((sae, report))
}

impl TrainingReport {
    /// Whether the epoch-mean total loss never rises after `from` by more
    /// than `tolerance` relative to the previous epoch.
    pub fn loss_non_increasing_after(&self, from: usize, tolerance: f64) -> bool {
        self.epochs
            .windows(2)
            .skip(from.saturating_sub(1))
            .all(|w| w[1].total <= w[0].total * (1.0 + tolerance))
    }
}
