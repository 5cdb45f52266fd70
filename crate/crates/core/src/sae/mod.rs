// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders over hook activations.
//!
//! `h = ReLU(W_enc x + b)`, `x' = W_dec h`, and the per-row loss is
//! `‖x − x'‖² + α‖h‖₁`, averaged over the batch. There is no decoder bias.
//!
//! The math is generic over [`Scalar`] so the gradient check can run in
//! `f64`; training and inference use `f32`.

mod checkpoint;
pub mod gradcheck;
mod steer;
mod train;

pub use checkpoint::{Sae, SaeSidecar, SAE_SIDECAR_FILE, SAE_WEIGHTS_FILE};
pub use steer::{steering_vector, ReconstructReplace, SteeringMode};
pub use train::{train_sae, EpochStats, TrainParams, TrainingReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::tensor::{gemm_into, l2_norm, Matrix, Scalar};

/// Default threshold above which a latent counts as active.
pub const ACTIVATION_EPSILON: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub d_in: usize,
    pub d_hid: usize,
    pub alpha: f32,
    #[serde(default)]
    pub seed: u64,
}

impl SaeConfig {
    /// The default 8× expansion.
    pub fn expansion(d_in: usize, alpha: f32) -> Self {
        Self {
            d_in,
            d_hid: 8 * d_in,
            alpha,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(MifinError::InvalidParam("d_in must be positive".into()));
        }
        if self.d_hid < self.d_in {
            return Err(MifinError::InvalidParam(format!(
                "d_hid ({}) must be at least d_in ({})",
                self.d_hid, self.d_in
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(MifinError::InvalidParam(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `W_enc: [d_hid × d_in]`, `b: [d_hid]`, `W_dec: [d_in × d_hid]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams<T: Scalar = f32> {
    pub w_enc: Matrix<T>,
    pub b: Vec<T>,
    pub w_dec: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeGrads<T: Scalar = f32> {
    pub w_enc: Matrix<T>,
    pub b: Vec<T>,
    pub w_dec: Matrix<T>,
}

/// Batch-mean loss terms. `l1` is the scaled penalty `α·mean‖h‖₁`, so
/// `total = mse + l1`; `l1_norm` is the unscaled mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts<T = f32> {
    pub total: T,
    pub mse: T,
    pub l1: T,
    pub l1_norm: T,
}

impl<T: Scalar> SaeParams<T> {
    pub fn new(w_enc: Matrix<T>, b: Vec<T>, w_dec: Matrix<T>) -> Result<Self> {
        let (d_hid, d_in) = w_enc.shape();
        if b.len() != d_hid {
            return Err(MifinError::shape("b", format!("{} entries, expected {d_hid}", b.len())));
        }
        if w_dec.shape() != (d_in, d_hid) {
            return Err(MifinError::shape(
                "W_dec",
                format!("{:?}, expected ({d_in}, {d_hid})", w_dec.shape()),
            ));
        }
        Ok(Self { w_enc, b, w_dec })
    }

    /// `W_enc = W_dec = I`, `b = 0`.
    pub fn identity(d: usize) -> Self {
        Self {
            w_enc: Matrix::identity(d),
            b: vec![T::zero(); d],
            w_dec: Matrix::identity(d),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn d_hid(&self) -> usize {
        self.w_enc.rows()
    }

    fn check_width(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.d_in() {
            return Err(MifinError::shape(
                "x",
                format!("width {}, expected d_in = {}", x.cols(), self.d_in()),
            ));
        }
        Ok(())
    }

    /// Pre-activations `U = X W_encᵀ + b`, `[n × d_hid]`.
    fn pre_activations(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut u = Matrix::zeros(x.rows(), self.d_hid());
        gemm_into(x, false, &self.w_enc, true, &mut u, T::one(), T::zero());
        u.add_row_vector(&self.b);
        u
    }

    /// Batch encode: `[n × d_in] → [n × d_hid]`.
    pub fn encode(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_width(x)?;
        let mut h = self.pre_activations(x);
        h.map_inplace(|v| v.max(T::zero()));
        Ok(h)
    }

    /// Batch decode: `[n × d_hid] → [n × d_in]`.
    pub fn decode(&self, h: &Matrix<T>) -> Result<Matrix<T>> {
        if h.cols() != self.d_hid() {
            return Err(MifinError::shape(
                "h",
                format!("width {}, expected d_hid = {}", h.cols(), self.d_hid()),
            ));
        }
        let mut x = Matrix::zeros(h.rows(), self.d_in());
        gemm_into(h, false, &self.w_dec, true, &mut x, T::one(), T::zero());
        Ok(x)
    }

    pub fn encode_row(&self, x: &[T]) -> Result<Vec<T>> {
        let m = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.encode(&m)?.into_data())
    }

    pub fn decode_row(&self, h: &[T]) -> Result<Vec<T>> {
        let m = Matrix::new(1, h.len(), h.to_vec())?;
        Ok(self.decode(&m)?.into_data())
    }

    pub fn loss(&self, batch: &Matrix<T>, alpha: T) -> Result<LossParts<T>> {
        let h = self.encode(batch)?;
        let x_hat = self.decode(&h)?;
        Ok(loss_parts(batch, &h, &x_hat, alpha))
    }

    /// Loss and its exact gradient (ReLU subgradient 0 at 0).
    pub fn grad(&self, batch: &Matrix<T>, alpha: T) -> Result<(SaeGrads<T>, LossParts<T>)> {
        self.check_width(batch)?;
        let n = batch.rows();
        if n == 0 {
            return Err(MifinError::EmptyInput);
        }
        let u = self.pre_activations(batch);
        let mut h = u.clone();
        h.map_inplace(|v| v.max(T::zero()));
        let x_hat = self.decode(&h)?;
        let parts = loss_parts(batch, &h, &x_hat, alpha);

        let inv_n = T::one() / T::from_f64(n as f64);
        let two_n = T::from_f64(2.0) * inv_n;
        // r = x' − x
        let mut r = x_hat;
        r.data_mut()
            .iter_mut()
            .zip(batch.data())
            .for_each(|(a, x)| *a = *a - *x);

        // dW_dec = (2/n) rᵀ h
        let mut d_dec = Matrix::zeros(self.d_in(), self.d_hid());
        gemm_into(&r, true, &h, false, &mut d_dec, two_n, T::zero());

        // dU = ((2/n) r W_dec + α/n) ⊙ 1[u > 0]
        let mut du = Matrix::zeros(n, self.d_hid());
        gemm_into(&r, false, &self.w_dec, false, &mut du, two_n, T::zero());
        let a_n = alpha * inv_n;
        du.data_mut().iter_mut().zip(u.data()).for_each(|(g, u)| {
            *g = if *u > T::zero() { *g + a_n } else { T::zero() };
        });

        let mut db = vec![T::zero(); self.d_hid()];
        for row in du.iter_rows() {
            db.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
        }
        let mut d_enc = Matrix::zeros(self.d_hid(), self.d_in());
        gemm_into(&du, true, batch, false, &mut d_enc, T::one(), T::zero());
        Ok((
            SaeGrads {
                w_enc: d_enc,
                b: db,
                w_dec: d_dec,
            },
            parts,
        ))
    }

    /// Scale every decoder column to unit L2 norm (zero columns are left).
    pub fn normalize_decoder(&mut self) {
        let (d_in, d_hid) = self.w_dec.shape();
        let mut norms = vec![T::zero(); d_hid];
        for r in 0..d_in {
            for (n, v) in norms.iter_mut().zip(self.w_dec.row(r)) {
                *n = *n + *v * *v;
            }
        }
        let inv: Vec<T> = norms
            .into_iter()
            .map(|n| if n > T::zero() { T::one() / n.sqrt() } else { T::one() })
            .collect();
        for r in 0..d_in {
            for (v, s) in self.w_dec.row_mut(r).iter_mut().zip(&inv) {
                *v = *v * *s;
            }
        }
    }

    /// Column `f` of `W_dec`: the feature's direction.
    pub fn decoder_column(&self, feature: usize) -> Result<Vec<T>> {
        self.check_feature(feature)?;
        Ok(self.w_dec.column(feature))
    }

    pub fn check_feature(&self, feature: usize) -> Result<()> {
        if feature >= self.d_hid() {
            return Err(MifinError::FeatureId {
                feature,
                d_hid: self.d_hid(),
            });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.w_enc.all_finite() && self.w_dec.all_finite() && self.b.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> SaeParams<U> {
        SaeParams {
            w_enc: self.w_enc.cast(),
            b: self.b.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect(),
            w_dec: self.w_dec.cast(),
        }
    }
}

impl SaeParams<f32> {
    /// `W_enc ~ U(±1/√d_in)`, `W_dec = W_encᵀ` with unit columns, `b = 0`.
    pub fn init(cfg: &SaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bound = 1.0 / (cfg.d_in as f32).sqrt();
        let w_enc = Matrix::from_fn(cfg.d_hid, cfg.d_in, |_, _| rng.random_range(-bound..bound));
        let mut p = Self {
            w_dec: w_enc.transpose(),
            b: vec![0.0; cfg.d_hid],
            w_enc,
        };
        p.normalize_decoder();
        Ok(p)
    }
}

fn loss_parts<T: Scalar>(x: &Matrix<T>, h: &Matrix<T>, x_hat: &Matrix<T>, alpha: T) -> LossParts<T> {
    let n = T::from_f64(x.rows().max(1) as f64);
    let sq: T = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (*a - *b) * (*a - *b))
        .sum();
    let l1: T = h.data().iter().copied().sum();
    let mse = sq / n;
    let l1_norm = l1 / n;
    let l1 = alpha * l1_norm;
    LossParts {
        total: mse + l1,
        mse,
        l1,
        l1_norm,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    pub rows: usize,
    /// Mean count of latents above the activation epsilon per row.
    pub mean_l0: f64,
    /// Latents never above epsilon on any row.
    pub dead_features: usize,
    /// Mean of `‖x − x'‖²` per row.
    pub mse: f64,
    /// `1 − mse / mean ‖x − x̄‖²`.
    pub explained_variance: f64,
}

/// Running sums for [`SaeMetrics`], fed in chunks.
pub(crate) struct MetricsAccumulator {
    eps: f32,
    rows: usize,
    l0: u64,
    active: Vec<bool>,
    sq_err: f64,
    sum: Vec<f64>,
    sum_sq: f64,
}

impl MetricsAccumulator {
    pub(crate) fn new(d_in: usize, d_hid: usize, eps: f32) -> Self {
        Self {
            eps,
            rows: 0,
            l0: 0,
            active: vec![false; d_hid],
            sq_err: 0.0,
            sum: vec![0.0; d_in],
            sum_sq: 0.0,
        }
    }

    pub(crate) fn add_l0(&mut self, h: &Matrix) {
        for row in h.iter_rows() {
            for (a, &v) in self.active.iter_mut().zip(row) {
                if v > self.eps {
                    self.l0 += 1;
                    *a = true;
                }
            }
        }
    }

    pub(crate) fn add(&mut self, x: &Matrix, h: &Matrix, x_hat: &Matrix) {
        self.add_l0(h);
        self.rows += x.rows();
        for (xr, yr) in x.iter_rows().zip(x_hat.iter_rows()) {
            for ((s, &a), &b) in self.sum.iter_mut().zip(xr).zip(yr) {
                let d = (a - b) as f64;
                self.sq_err += d * d;
                *s += a as f64;
                self.sum_sq += (a as f64) * (a as f64);
            }
        }
    }

    pub(crate) fn dead(&self) -> usize {
        self.active.iter().filter(|a| !**a).count()
    }

    pub(crate) fn mean_l0(&self, rows: usize) -> f64 {
        self.l0 as f64 / rows.max(1) as f64
    }

    pub(crate) fn finish(&self) -> SaeMetrics {
        let n = self.rows.max(1) as f64;
        let mean_sq_norm: f64 = self.sum.iter().map(|s| (s / n) * (s / n)).sum();
        let var = self.sum_sq / n - mean_sq_norm;
        let mse = self.sq_err / n;
        let explained_variance = if var > 0.0 {
            1.0 - mse / var
        } else if mse == 0.0 {
            1.0
        } else {
            0.0
        };
        SaeMetrics {
            rows: self.rows,
            mean_l0: self.mean_l0(self.rows),
            dead_features: self.dead(),
            mse,
            explained_variance,
        }
    }
}

const METRIC_CHUNK: usize = 4096;

/// L0, dead features and explained variance over the rows of `data`.
pub fn sae_metrics(params: &SaeParams, data: &Matrix, activation_epsilon: f32) -> Result<SaeMetrics> {
    if data.cols() != params.d_in() {
        return Err(MifinError::shape(
            "store",
            format!("width {}, SAE d_in {}", data.cols(), params.d_in()),
        ));
    }
    let mut acc = MetricsAccumulator::new(params.d_in(), params.d_hid(), activation_epsilon);
    let idx: Vec<usize> = (0..data.rows()).collect();
    for chunk in idx.chunks(METRIC_CHUNK) {
        let x = data.select_rows(chunk);
        let h = params.encode(&x)?;
        let x_hat = params.decode(&h)?;
        acc.add(&x, &h, &x_hat);
    }
    Ok(acc.finish())
}

/// Unit-normalized copy of `v`; zero vectors are returned unchanged.
pub(crate) fn unit(v: &[f32]) -> Vec<f32> {
    let n = l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}
