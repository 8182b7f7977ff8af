//! Bootstrap particle filter with log-domain weights and systematic resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VseError};
use crate::lorenz::{self, LorenzConfig};
use crate::mathcore::{isotropic_logpdf, logsumexp, RngStream};
use crate::measurement::MeasurementModel;

/// Stochastic state transition used as the bootstrap proposal.
pub trait Transition: Sync {
    fn state_dim(&self) -> usize;
    /// Draws `x_t ~ p(· | x_{t-1})` into `out`.
    fn sample(&self, x: &[f64], out: &mut [f64], stream: &mut RngStream);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzTransition(pub LorenzConfig);

impl Transition for LorenzTransition {
    fn state_dim(&self) -> usize {
        3
    }

    fn sample(&self, x: &[f64], out: &mut [f64], stream: &mut RngStream) {
        let next = lorenz::step_stochastic(&[x[0], x[1], x[2]], &self.0, stream);
        out.copy_from_slice(&next);
    }
}

/// `x_t = A x_{t-1} + e_t`, `e_t ~ N(0, q I)`, `A` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTransition {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub noise_var: f64,
}

impl Transition for LinearTransition {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, x: &[f64], out: &mut [f64], stream: &mut RngStream) {
        let sd = self.noise_var.sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * self.dim..(i + 1) * self.dim];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + sd * stream.normal();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfConfig {
    pub particles: usize,
    pub init_mean: Vec<f64>,
    /// Per-axis variance of the initial cloud.
    pub init_var: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            particles: 500,
            init_mean: vec![0.0, 0.0, 25.0],
            init_var: 400.0,
        }
    }
}

/// `P × m` particles with normalized log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub dim: usize,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// `1 / Σ w²` for normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self
            .log_weights
            .iter()
            .map(|w| (2.0 * w).exp())
            .sum::<f64>()
    }

    pub fn weighted_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (i, lw) in self.log_weights.iter().enumerate() {
            let w = lw.exp();
            for (m, x) in mean.iter_mut().zip(self.particle(i)) {
                *m += w * x;
            }
        }
        mean
    }
}

/// Gaussian initial cloud around `cfg.init_mean` with uniform weights.
pub fn pf_init_with(cfg: &PfConfig, stream: &mut RngStream) -> Result<ParticleCloud> {
    if cfg.particles == 0 {
        return Err(VseError::Domain("particle count must be >= 1".into()));
    }
    if !(cfg.init_var >= 0.0) {
        return Err(VseError::Domain(format!(
            "initial variance must be >= 0, got {}",
            cfg.init_var
        )));
    }
    let dim = cfg.init_mean.len();
    let sd = cfg.init_var.sqrt();
    let mut particles = vec![0.0; cfg.particles * dim];
    stream.fill_normal(&mut particles);
    for (k, p) in particles.iter_mut().enumerate() {
        *p = cfg.init_mean[k % dim] + sd * *p;
    }
    Ok(ParticleCloud {
        particles,
        log_weights: vec![-(cfg.particles as f64).ln(); cfg.particles],
        dim,
    })
}

/// Default Lorenz cloud `N([0, 0, 25], 20² I)` of `p` particles.
pub fn pf_init(p: usize, stream: &mut RngStream) -> Result<ParticleCloud> {
    pf_init_with(
        &PfConfig {
            particles: p,
            ..PfConfig::default()
        },
        stream,
    )
}

/// Ancestor indices for offsets `(u + k) / P`, `k = 0..P`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let p = weights.len();
    let mut out = Vec::with_capacity(p);
    let mut cum = weights[0];
    let mut j = 0;
    for k in 0..p {
        let target = (u + k as f64) / p as f64;
        while cum <= target && j + 1 < p {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// One propagate-weight-estimate-resample cycle; returns the weighted mean
/// taken before resampling. `step` only labels errors.
pub fn pf_step(
    cloud: &mut ParticleCloud,
    y_t: &[f64],
    transition: &dyn Transition,
    measurement: &dyn MeasurementModel,
    sigma_w2: f64,
    stream: &mut RngStream,
    step: usize,
) -> Result<Vec<f64>> {
    let dim = cloud.dim;
    let mut h = vec![0.0; measurement.measurement_dim()];
    let mut next = vec![0.0; dim];
    for i in 0..cloud.len() {
        let x = &mut cloud.particles[i * dim..(i + 1) * dim];
        transition.sample(x, &mut next, stream);
        x.copy_from_slice(&next);
        let ll = if next.iter().all(|v| v.is_finite()) {
            measurement.measure(&next, &mut h);
            isotropic_logpdf(y_t, &h, sigma_w2)
        } else {
            f64::NEG_INFINITY
        };
        let w = cloud.log_weights[i] + ll;
        cloud.log_weights[i] = if w.is_nan() { f64::NEG_INFINITY } else { w };
    }
    let norm = logsumexp(&cloud.log_weights);
    if !norm.is_finite() {
        return Err(VseError::DegenerateFilter { step });
    }
    cloud.log_weights.iter_mut().for_each(|w| *w -= norm);
    let estimate = cloud.weighted_mean();
    if cloud.effective_sample_size() < cloud.len() as f64 / 2.0 {
        let idx = systematic_resample(&cloud.weights(), stream.uniform());
        let old = std::mem::take(&mut cloud.particles);
        cloud.particles = idx
            .iter()
            .flat_map(|&j| old[j * dim..(j + 1) * dim].iter().copied())
            .collect();
        let lw = -(cloud.len() as f64).ln();
        cloud.log_weights.iter_mut().for_each(|w| *w = lw);
    }
    Ok(estimate)
}

/// Filters a `T × n` measurement sequence; returns `T × m` weighted means.
pub fn pf_run(
    y: &[f64],
    cfg: &PfConfig,
    transition: &dyn Transition,
    measurement: &dyn MeasurementModel,
    sigma_w2: f64,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let n = measurement.measurement_dim();
    if y.is_empty() || !y.len().is_multiple_of(n) {
        return Err(VseError::DimensionMismatch {
            what: "measurement sequence length (multiple of measurement dimension)",
            expected: n,
            got: y.len(),
        });
    }
    if cfg.init_mean.len() != transition.state_dim()
        || transition.state_dim() != measurement.state_dim()
    {
        return Err(VseError::DimensionMismatch {
            what: "particle state dimension",
            expected: measurement.state_dim(),
            got: cfg.init_mean.len(),
        });
    }
    if !(sigma_w2 > 0.0) {
        return Err(VseError::Domain(format!(
            "sigma_w2 must be > 0, got {sigma_w2}"
        )));
    }
    let mut cloud = pf_init_with(cfg, stream)?;
    let mut out = Vec::with_capacity(y.len() / n * cloud.dim);
    for (t, y_t) in y.chunks_exact(n).enumerate() {
        out.extend(pf_step(
            &mut cloud,
            y_t,
            transition,
            measurement,
            sigma_w2,
            stream,
            t + 1,
        )?);
    }
    Ok(out)
}
