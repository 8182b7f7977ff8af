//! Gaussian primitives, the truncated matrix exponential and seeded
//! random streams shared by every other module.
//!
//! Covariances are diagonal throughout: a belief stores its mean and the
//! diagonal of its covariance, and the Cholesky factor is an elementwise
//! square root.

use std::cell::Cell;

use nalgebra::SMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VseError};

/// Lower bound applied to every variance emitted by a parametrization.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub var_diag: Vec<f64>,
}

impl GaussianBelief {
    /// Builds a belief, rejecting mismatched lengths and variances below the floor.
    pub fn new(mean: Vec<f64>, var_diag: Vec<f64>) -> Result<Self> {
        if mean.len() != var_diag.len() {
            return Err(VseError::DimensionMismatch {
                what: "belief variance length",
                expected: mean.len(),
                got: var_diag.len(),
            });
        }
        if let Some(v) = var_diag.iter().find(|v| !(**v >= VARIANCE_FLOOR)) {
            return Err(VseError::Domain(format!(
                "variance {v} is below the floor {VARIANCE_FLOOR}"
            )));
        }
        Ok(Self { mean, var_diag })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

thread_local! {
    static THREAD_DRAWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of random draws taken by any [`RngStream`] on the calling thread.
///
/// Used to audit code paths that must stay sampling-free.
pub fn thread_rng_draws() -> u64 {
    THREAD_DRAWS.with(|c| c.get())
}

fn count_draws(n: u64) {
    THREAD_DRAWS.with(|c| c.set(c.get() + n));
}

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// Backed by a ChaCha8 counter-mode generator: the seed fixes the key and the
/// stream id selects a disjoint keystream, so advancing one stream never
/// reaches the values of another.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            draws: 0,
            rng,
        }
    }

    /// Stream for `(domain, major, minor)`, packed as `domain:8 | major:24 | minor:32`.
    pub fn keyed(seed: u64, domain: u8, major: u32, minor: u32) -> Self {
        assert!(major < (1 << 24), "major stream index out of range");
        let id = (u64::from(domain) << 56) | (u64::from(major) << 32) | u64::from(minor);
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Draws taken from this stream so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        count_draws(1);
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        count_draws(1);
        self.rng.random::<f64>()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
        self.draws += out.len() as u64;
        count_draws(out.len() as u64);
    }

    /// Uniform random permutation in place (counted as one draw).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        self.draws += 1;
        count_draws(1);
        items.shuffle(&mut self.rng);
    }
}

/// `count` standard-normal draws from `stream`.
pub fn rng_normal(stream: &mut RngStream, count: usize) -> Vec<f64> {
    let mut out = vec![0.0; count];
    stream.fill_normal(&mut out);
    out
}

/// `log N(y; mean, diag(var_diag))`.
pub fn gaussian_logpdf(y: &[f64], mean: &[f64], var_diag: &[f64]) -> Result<f64> {
    if y.len() != mean.len() || y.len() != var_diag.len() {
        return Err(VseError::DimensionMismatch {
            what: "logpdf operand length",
            expected: y.len(),
            got: if mean.len() != y.len() {
                mean.len()
            } else {
                var_diag.len()
            },
        });
    }
    let mut acc = 0.0;
    for ((&yi, &mi), &vi) in y.iter().zip(mean).zip(var_diag) {
        if !(vi > 0.0) {
            return Err(VseError::Domain(format!("non-positive variance {vi}")));
        }
        let d = yi - mi;
        acc -= HALF_LN_2PI + 0.5 * vi.ln() + 0.5 * d * d / vi;
    }
    Ok(acc)
}

/// `log N(y; mean, var * I)` without argument checks; `var > 0` is the caller's job.
#[inline]
pub(crate) fn isotropic_logpdf(y: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = y.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -(y.len() as f64) * (HALF_LN_2PI + 0.5 * var.ln()) - 0.5 * sq / var
}

/// `D_KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_gauss_diag(q: &GaussianBelief, p: &GaussianBelief) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(VseError::DimensionMismatch {
            what: "KL operand dimension",
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(kl_diag_raw(&q.mean, &q.var_diag, &p.mean, &p.var_diag))
}

#[inline]
pub(crate) fn kl_diag_raw(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..mq.len() {
        let d = mq[j] - mp[j];
        // ratio - 1 - ln(ratio), written around ratio = 1 to stay non-negative.
        let delta = (vq[j] - vp[j]) / vp[j];
        acc += delta - delta.ln_1p() + d * d / vp[j];
    }
    0.5 * acc
}

/// Truncated Taylor series `Σ_{j=0..order} Aʲ / j!`.
pub fn taylor_expm<const D: usize>(a: &SMatrix<f64, D, D>, order: usize) -> SMatrix<f64, D, D> {
    let mut sum = SMatrix::<f64, D, D>::identity();
    let mut term = SMatrix::<f64, D, D>::identity();
    for j in 1..=order {
        term = (term * a) / j as f64;
        sum += term;
    }
    sum
}

/// `mean + sqrt(var_diag) ⊙ eps`.
pub fn reparam_sample(belief: &GaussianBelief, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != belief.dim() {
        return Err(VseError::DimensionMismatch {
            what: "reparameterization noise length",
            expected: belief.dim(),
            got: eps.len(),
        });
    }
    Ok(belief
        .mean
        .iter()
        .zip(&belief.var_diag)
        .zip(eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

/// Numerically stable `ln Σ exp(v)`; `-inf` for an empty or all-`-inf` slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
