// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation stores with planted ground truth, for checking that SAE
//! training recovers known directions.
//!
//! Each row is a sparse non-negative combination of `n_directions` random
//! unit vectors in `R^d_in`: every direction is present independently with
//! probability `p_active`, with a coefficient drawn uniformly from
//! `[coef_min, coef_max]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};
use crate::model::HookPoint;
use crate::sae::SaeParams;
use crate::store::ActivationStore;
use crate::tensor::{cosine, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d_in: usize,
    pub n_directions: usize,
    pub rows: usize,
    pub p_active: f64,
    pub coef_min: f32,
    pub coef_max: f32,
    /// Std of isotropic gaussian noise added to every row.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d_in: 16,
            n_directions: 10,
            rows: 50_000,
            p_active: 0.12,
            coef_min: 0.5,
            coef_max: 2.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

pub struct SyntheticStore {
    pub store: ActivationStore,
    /// `[n_directions × d_in]`, unit rows.
    pub directions: Matrix,
    /// `[rows × n_directions]`; zero where a direction is absent.
    pub coefficients: Matrix,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<SyntheticStore> {
        if self.d_in == 0 || self.n_directions == 0 || self.rows == 0 {
            return Err(MifinError::InvalidParam("synthetic sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_active) || self.coef_min > self.coef_max {
            return Err(MifinError::InvalidParam("bad synthetic distribution".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut directions = Matrix::zeros(self.n_directions, self.d_in);
        for i in 0..self.n_directions {
            let v: Vec<f32> = (0..self.d_in).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let n = crate::tensor::l2_norm(&v);
            directions.row_mut(i).iter_mut().zip(&v).for_each(|(d, x)| *d = x / n);
        }
        let mut coefficients = Matrix::zeros(self.rows, self.n_directions);
        let mut data = Matrix::zeros(self.rows, self.d_in);
        for r in 0..self.rows {
            for i in 0..self.n_directions {
                if rng.random_bool(self.p_active) {
                    let c = rng.random_range(self.coef_min..=self.coef_max);
                    coefficients.set(r, i, c);
                    for (o, d) in data.row_mut(r).iter_mut().zip(directions.row(i)) {
                        *o += c * d;
                    }
                }
            }
            if self.noise > 0.0 {
                for o in data.row_mut(r) {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    *o += self.noise * z;
                }
            }
        }
        Ok(SyntheticStore {
            store: ActivationStore::from_matrix(data, HookPoint::ResidPost(0))?,
            directions,
            coefficients,
        })
    }
}

/// For each planted direction, the decoder column with the highest cosine.
pub fn best_matches(directions: &Matrix, params: &SaeParams) -> Vec<(usize, f32)> {
    let cols: Vec<Vec<f32>> = (0..params.d_hid()).map(|c| params.w_dec.column(c)).collect();
    directions
        .iter_rows()
        .map(|d| {
            cols.iter()
                .enumerate()
                .map(|(j, c)| (j, cosine(d, c)))
                .fold((0, f32::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        })
        .collect()
}

/// Number of planted directions matched by some decoder column above
/// `threshold` cosine.
pub fn recovered(directions: &Matrix, params: &SaeParams, threshold: f32) -> usize {
    best_matches(directions, params)
        .iter()
        .filter(|(_, c)| *c > threshold)
        .count()
}
