//! Prior and posterior recurrent networks, the per-step evidence lower bound,
//! unsupervised training and sampling-free inference.
//!
//! During training the prior network sees `y_{1:t-1}` and the posterior
//! network sees `y_{1:t}`; the bound at step `t` is the expected measurement
//! log-likelihood under the posterior minus the KL divergence from the
//! posterior to the prior. At inference only the posterior network runs.

mod checkpoint;
mod elbo;
mod train;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, CheckpointMeta};
pub use elbo::{elbo, elbo_gradients, elbo_with_eps, ElboReport, PairGrads};
pub use train::{
    evaluate_elbo, initial_state, train, EpochRecord, TrainConfig, TrainFailure, TrainOutcome,
    TrainState,
};

use crate::error::{Result, VseError};
use crate::mathcore::{GaussianBelief, RngStream};
use crate::measurement::{Measurement, MeasurementModel};
use crate::nn::{Architecture, GruStackParams, Tensor};

/// Stream domains used for the model's own randomness.
pub(crate) mod domain {
    pub const INIT: u8 = 1;
    pub const TRAIN_EPS: u8 = 2;
    pub const VAL_EPS: u8 = 3;
    pub const SHUFFLE: u8 = 4;
}

/// The trainable pair plus the known measurement model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VseModel {
    /// Network emitting `p(x_t | y_{1:t-1})`.
    pub prior: GruStackParams,
    /// Network emitting `q(x_t | y_{1:t})`.
    pub post: GruStackParams,
    pub measurement: Measurement,
    pub sigma_w2: f64,
    /// Reparameterized samples per step for the reconstruction term.
    pub samples: usize,
}

impl VseModel {
    pub fn new(
        arch: Architecture,
        measurement: Measurement,
        sigma_w2: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if arch.input_dim != measurement.measurement_dim() {
            return Err(VseError::DimensionMismatch {
                what: "network input vs measurement dimension",
                expected: measurement.measurement_dim(),
                got: arch.input_dim,
            });
        }
        if arch.state_dim != measurement.state_dim() {
            return Err(VseError::DimensionMismatch {
                what: "network output vs state dimension",
                expected: measurement.state_dim(),
                got: arch.state_dim,
            });
        }
        if arch.layers == 0 || arch.hidden == 0 || arch.head_width == 0 {
            return Err(VseError::Domain("network sizes must be positive".into()));
        }
        if !(sigma_w2 > 0.0) {
            return Err(VseError::Domain(format!(
                "sigma_w2 must be > 0, got {sigma_w2}"
            )));
        }
        if samples == 0 {
            return Err(VseError::Domain("sample count must be >= 1".into()));
        }
        let prior = GruStackParams::init(&arch, &mut RngStream::keyed(seed, domain::INIT, 0, 0));
        let post = GruStackParams::init(&arch, &mut RngStream::keyed(seed, domain::INIT, 0, 1));
        Ok(Self {
            prior,
            post,
            measurement,
            sigma_w2,
            samples,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.post.architecture()
    }

    pub fn input_dim(&self) -> usize {
        self.post.architecture().input_dim
    }

    pub fn state_dim(&self) -> usize {
        self.post.architecture().state_dim
    }

    /// Prefixed tensor names (`prior.*`, then `post.*`) in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .prior
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("prior.{n}"), t))
            .collect();
        out.extend(
            self.post
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("post.{n}"), t)),
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.prior.tensors_mut();
        out.extend(self.post.tensors_mut());
        out
    }

    pub(crate) fn sequence_len(&self, y: &[f64]) -> Result<usize> {
        let n = self.input_dim();
        if y.is_empty() || !y.len().is_multiple_of(n) {
            return Err(VseError::DimensionMismatch {
                what: "measurement sequence length (multiple of input dimension)",
                expected: n,
                got: y.len(),
            });
        }
        Ok(y.len() / n)
    }

    /// Sets both heads' mean bias to the constant state whose clean image
    /// best matches the average measurement image, so that reparameterized
    /// samples start where the measurement function has a usable gradient.
    pub fn warm_start_mean(&mut self, sequences: &[&[f64]]) {
        let n = self.input_dim();
        let mut avg = vec![0.0; n];
        let mut rows = 0usize;
        for seq in sequences {
            for row in seq.chunks_exact(n) {
                for (a, v) in avg.iter_mut().zip(row) {
                    *a += v;
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return;
        }
        avg.iter_mut().for_each(|a| *a /= rows as f64);
        let x = fit_constant_state(&self.measurement, &avg);
        self.prior.head.b_mean.data.copy_from_slice(&x);
        self.post.head.b_mean.data.copy_from_slice(&x);
    }
}

fn image_misfit(model: &Measurement, target: &[f64], x: &[f64], buf: &mut [f64]) -> f64 {
    model.measure(x, buf);
    buf.iter().zip(target).map(|(h, y)| (h - y) * (h - y)).sum()
}

/// Least-squares constant state: best candidate, then damped Gauss-Newton.
fn fit_constant_state(model: &Measurement, target: &[f64]) -> Vec<f64> {
    let n = model.measurement_dim();
    let m = model.state_dim();
    let mut buf = vec![0.0; n];
    let mut best = model
        .candidate_states()
        .into_iter()
        .map(|x| (image_misfit(model, target, &x, &mut buf), x))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, x)| x)
        .unwrap_or_else(|| vec![0.0; m]);
    if m > 3 {
        return best;
    }
    let mut cost = image_misfit(model, target, &best, &mut buf);
    let mut jac = vec![0.0; n * m];
    let mut lambda = 1e-3;
    for _ in 0..100 {
        model.measure_with_jacobian(&best, &mut buf, &mut jac);
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for i in 0..n {
            let r = target[i] - buf[i];
            for a in 0..m {
                jtr[a] += jac[i * m + a] * r;
                for b in 0..m {
                    jtj[(a, b)] += jac[i * m + a] * jac[i * m + b];
                }
            }
        }
        for a in m..3 {
            jtj[(a, a)] = 1.0;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for a in 0..m {
                damped[(a, a)] += lambda * (1.0 + jtj[(a, a)]);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                break;
            };
            let cand: Vec<f64> = (0..m).map(|a| best[a] + step[a]).collect();
            let c = image_misfit(model, target, &cand, &mut buf);
            if c < cost {
                best = cand;
                cost = c;
                lambda = (lambda * 0.3).max(1e-9);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    best
}

/// Inputs of the prior network: `y` delayed one step, zeros at `t = 1`.
pub(crate) fn shifted_inputs(y: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    out[n..].copy_from_slice(&y[..y.len() - n]);
    out
}

/// Prior beliefs `p(x_t | y_{1:t-1})` for `t = 1..T`.
pub fn prior_sequence(theta: &GruStackParams, y: &[f64]) -> Result<Vec<GaussianBelief>> {
    let arch = theta.architecture();
    let t_len = checked_len(y, arch.input_dim)?;
    let (means, vars) = theta.beliefs(&shifted_inputs(y, arch.input_dim), t_len);
    Ok(to_beliefs(&means, &vars, arch.state_dim))
}

/// Posterior beliefs `q(x_t | y_{1:t})` for `t = 1..T`. Draws no random numbers.
pub fn posterior_sequence(psi: &GruStackParams, y: &[f64]) -> Result<Vec<GaussianBelief>> {
    let arch = psi.architecture();
    let t_len = checked_len(y, arch.input_dim)?;
    let (means, vars) = psi.beliefs(y, t_len);
    Ok(to_beliefs(&means, &vars, arch.state_dim))
}

fn checked_len(y: &[f64], n: usize) -> Result<usize> {
    if y.is_empty() || !y.len().is_multiple_of(n) {
        return Err(VseError::DimensionMismatch {
            what: "measurement sequence length (multiple of input dimension)",
            expected: n,
            got: y.len(),
        });
    }
    Ok(y.len() / n)
}

fn to_beliefs(means: &[f64], vars: &[f64], m: usize) -> Vec<GaussianBelief> {
    means
        .chunks_exact(m)
        .zip(vars.chunks_exact(m))
        .map(|(mu, v)| GaussianBelief {
            mean: mu.to_vec(),
            var_diag: v.to_vec(),
        })
        .collect()
}

/// Filtering output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub beliefs: Vec<GaussianBelief>,
    /// Point estimates, the posterior means.
    pub estimates: Vec<Vec<f64>>,
}

impl Inference {
    /// Row-major `T × m` estimates.
    pub fn flat_estimates(&self) -> Vec<f64> {
        self.estimates.iter().flatten().copied().collect()
    }
}

/// Runs the posterior network only.
pub fn infer(model: &VseModel, y: &[f64]) -> Result<Inference> {
    let beliefs = posterior_sequence(&model.post, y)?;
    let estimates = beliefs.iter().map(|b| b.mean.clone()).collect();
    Ok(Inference { beliefs, estimates })
}
