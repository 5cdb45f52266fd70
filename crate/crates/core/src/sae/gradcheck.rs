// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite differences of the SAE loss, the oracle for
//! [`SaeParams::grad`](super::SaeParams::grad).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::SaeParams;
use crate::error::Result;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, 1e-6)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation could cross a ReLU kink.
    pub skipped_kinks: usize,
}

fn loss(p: &SaeParams<f64>, x: &Matrix<f64>, alpha: f64) -> Result<f64> {
    Ok(p.loss(x, alpha)?.total)
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare analytic gradients with central differences of step `h`.
///
/// A coordinate of `W_enc[j, k]` or `b[j]` is excluded when some row's
/// pre-activation `u_j` lies within the perturbation's reach of zero.
pub fn check_gradients(p: &SaeParams<f64>, x: &Matrix<f64>, alpha: f64, h: f64) -> Result<GradCheck> {
    let (g, _) = p.grad(x, alpha)?;
    let mut u = Matrix::zeros(x.rows(), p.d_hid());
    crate::tensor::gemm_into(x, false, &p.w_enc, true, &mut u, 1.0, 0.0);
    u.add_row_vector(&p.b);
    let near_kink = |j: usize, reach: &dyn Fn(usize) -> f64| {
        (0..x.rows()).any(|i| u.get(i, j).abs() <= reach(i))
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |a: f64, n: f64| {
        out.max_rel_error = out.max_rel_error.max(rel(a, n));
        out.checked += 1;
    };
    let mut q = p.clone();
    for j in 0..p.d_hid() {
        for k in 0..p.d_in() {
            if near_kink(j, &|i| h * x.get(i, k).abs()) {
                out.skipped_kinks += 1;
                continue;
            }
            let w = p.w_enc.get(j, k);
            q.w_enc.set(j, k, w + h);
            let up = loss(&q, x, alpha)?;
            q.w_enc.set(j, k, w - h);
            let down = loss(&q, x, alpha)?;
            q.w_enc.set(j, k, w);
            record(g.w_enc.get(j, k), (up - down) / (2.0 * h));
        }
        if near_kink(j, &|_| h) {
            out.skipped_kinks += 1;
        } else {
            let b = p.b[j];
            q.b[j] = b + h;
            let up = loss(&q, x, alpha)?;
            q.b[j] = b - h;
            let down = loss(&q, x, alpha)?;
            q.b[j] = b;
            record(g.b[j], (up - down) / (2.0 * h));
        }
    }
    for r in 0..p.d_in() {
        for c in 0..p.d_hid() {
            let w = p.w_dec.get(r, c);
            q.w_dec.set(r, c, w + h);
            let up = loss(&q, x, alpha)?;
            q.w_dec.set(r, c, w - h);
            let down = loss(&q, x, alpha)?;
            q.w_dec.set(r, c, w);
            record(g.w_dec.get(r, c), (up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

/// A random instance: gaussian parameters and batch, α ∈ [0, 0.5).
pub fn random_instance(
    d_in: usize,
    d_hid: usize,
    batch: usize,
    seed: u64,
) -> (SaeParams<f64>, Matrix<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = || -> f64 { rng.random_range(-1.0..1.0) };
    let w_enc = Matrix::from_fn(d_hid, d_in, |_, _| n());
    let b = (0..d_hid).map(|_| 0.5 * n()).collect();
    let w_dec = Matrix::from_fn(d_in, d_hid, |_, _| n());
    let x = Matrix::from_fn(batch, d_in, |_, _| 2.0 * n());
    let alpha = 0.25 * (n() + 1.0);
    (SaeParams { w_enc, b, w_dec }, x, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (p, x, alpha) = random_instance(3, 5, 4, seed);
            let c = check_gradients(&p, &x, alpha, 1e-4).unwrap();
            assert!(c.max_rel_error < 1e-4, "seed {seed}: {c:?}");
            assert!(c.checked > 0);
        }
    }

    #[test]
    fn penalty_enters_the_bias_gradient() {
        let (p, x, alpha) = random_instance(3, 5, 4, 1);
        // The oracle compares against the loss; checking a different α
        // must disagree wherever some latent is active.
        let (g_true, _) = p.grad(&x, alpha).unwrap();
        let (g_other, _) = p.grad(&x, alpha + 1.0).unwrap();
        assert_ne!(g_true.b, g_other.b);
    }
}
