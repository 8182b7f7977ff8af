//! Stochastic Lorenz system with a frozen-coefficient exponential transition.
//!
//! The state advances as `x ← F(x) x + e` with `F(x) = expm(Δ·A(x₁))`, where
//! `A(x₁)` is the Lorenz vector field written as a state-dependent matrix and
//! the exponential is a truncated Taylor series.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VseError};
use crate::mathcore::{taylor_expm, RngStream};

/// Any state entry beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzConfig {
    /// Step size in seconds.
    pub delta: f64,
    /// Process-noise variance per axis.
    pub sigma_e2: f64,
    pub taylor_order: usize,
    pub x0: [f64; 3],
    /// Leading steps simulated and discarded.
    pub burn_in: usize,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            delta: 0.02,
            // -10 dB
            sigma_e2: 0.1,
            taylor_order: 5,
            x0: [1.0, 1.0, 1.0],
            burn_in: 0,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(VseError::Domain(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(self.sigma_e2 >= 0.0) {
            return Err(VseError::Domain(format!(
                "sigma_e2 must be >= 0, got {}",
                self.sigma_e2
            )));
        }
        if self.taylor_order < 1 {
            return Err(VseError::Domain("taylor_order must be >= 1".into()));
        }
        Ok(())
    }
}

/// Simulated states, `T × 3`, plus the stream that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    pub states: Vec<[f64; 3]>,
    pub seed: u64,
    pub stream_id: u64,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Row-major `T × 3` copy.
    pub fn flatten(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.iter().copied()).collect()
    }
}

/// The bracketed Lorenz matrix for a given first coordinate.
pub fn lorenz_matrix(x1: f64) -> Matrix3<f64> {
    Matrix3::new(
        -10.0,
        10.0,
        0.0, //
        28.0,
        -1.0,
        -x1, //
        0.0,
        x1,
        -8.0 / 3.0,
    )
}

pub fn transition_matrix(x: &[f64; 3], cfg: &LorenzConfig) -> Matrix3<f64> {
    taylor_expm(&(lorenz_matrix(x[0]) * cfg.delta), cfg.taylor_order)
}

/// One transition: `F(x) x + noise`.
pub fn step(x: &[f64; 3], noise: &[f64; 3], cfg: &LorenzConfig) -> [f64; 3] {
    let next = transition_matrix(x, cfg) * Vector3::from(*x) + Vector3::from(*noise);
    [next[0], next[1], next[2]]
}

/// Propagates `x` one step with noise drawn from `stream`.
pub fn step_stochastic(x: &[f64; 3], cfg: &LorenzConfig, stream: &mut RngStream) -> [f64; 3] {
    let sd = cfg.sigma_e2.sqrt();
    let noise = [
        sd * stream.normal(),
        sd * stream.normal(),
        sd * stream.normal(),
    ];
    step(x, &noise, cfg)
}

fn diverged(x: &[f64; 3]) -> bool {
    x.iter()
        .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// Simulates `t_len` states after `burn_in` discarded steps, starting from `x0`.
///
/// The first returned state is the one reached after the first recorded
/// transition, so every state carries process noise.
pub fn simulate(
    cfg: &LorenzConfig,
    t_len: usize,
    stream: &mut RngStream,
) -> Result<StateTrajectory> {
    cfg.validate()?;
    if t_len < 1 {
        return Err(VseError::Domain("trajectory length must be >= 1".into()));
    }
    let (seed, stream_id) = (stream.seed(), stream.stream_id());
    let mut x = cfg.x0;
    let mut states = Vec::with_capacity(t_len);
    for k in 0..cfg.burn_in + t_len {
        x = step_stochastic(&x, cfg, stream);
        if diverged(&x) {
            return Err(VseError::SimulationDiverged { step: k });
        }
        if k >= cfg.burn_in {
            states.push(x);
        }
    }
    Ok(StateTrajectory {
        states,
        seed,
        stream_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rk4(x: [f64; 3], dt: f64, steps: usize) -> [f64; 3] {
        let f = |v: [f64; 3]| {
            [
                10.0 * (v[1] - v[0]),
                v[0] * (28.0 - v[2]) - v[1],
                v[0] * v[1] - 8.0 / 3.0 * v[2],
            ]
        };
        let add =
            |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
        let mut x = x;
        for _ in 0..steps {
            let k1 = f(x);
            let k2 = f(add(x, k1, dt / 2.0));
            let k3 = f(add(x, k2, dt / 2.0));
            let k4 = f(add(x, k3, dt));
            for j in 0..3 {
                x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        x
    }

    #[test]
    fn zero_coupling_at_x1_zero() {
        let f = transition_matrix(&[0.0, 3.0, 7.0], &LorenzConfig::default());
        assert_eq!(f[(1, 2)], 0.0);
        assert_eq!(f[(2, 1)], 0.0);
        let direct = taylor_expm(&(lorenz_matrix(0.0) * 0.02), 5);
        assert_eq!(f, direct);
    }

    #[test]
    fn small_step_limit_is_identity() {
        let cfg = LorenzConfig {
            delta: 1e-8,
            ..LorenzConfig::default()
        };
        let f = transition_matrix(&[20.0, -5.0, 30.0], &cfg);
        assert!((f - Matrix3::identity()).abs().max() < 1e-6);
    }

    #[test]
    fn order_five_tracks_order_nine() {
        // The order-5 truncation error at Δ = 0.02 is about 1e-5 elementwise
        // (the ‖ΔA‖⁶/6! remainder); order 9 is converged to ~1e-12.
        let c5 = LorenzConfig::default();
        let c9 = LorenzConfig {
            taylor_order: 9,
            ..c5.clone()
        };
        let c13 = LorenzConfig {
            taylor_order: 13,
            ..c5.clone()
        };
        for k in 0..=50 {
            let x = [-25.0 + k as f64, 0.0, 0.0];
            let f5 = transition_matrix(&x, &c5);
            let f9 = transition_matrix(&x, &c9);
            let f13 = transition_matrix(&x, &c13);
            assert!((f5 - f9).abs().max() < 1.2e-5);
            assert!((f9 - f13).abs().max() < (f5 - f13).abs().max());
        }
    }

    #[test]
    fn origin_is_fixed() {
        assert_eq!(
            step(&[0.0; 3], &[0.0; 3], &LorenzConfig::default()),
            [0.0; 3]
        );
    }

    #[test]
    fn step_is_deterministic() {
        let cfg = LorenzConfig::default();
        let x = [3.0, -2.0, 17.0];
        assert_eq!(step(&x, &[0.0; 3], &cfg), step(&x, &[0.0; 3], &cfg));
    }

    #[test]
    fn step_matches_rk4_from_unit_point() {
        let x = step(&[1.0; 3], &[0.0; 3], &LorenzConfig::default());
        let oracle = rk4([1.0; 3], 0.02 / 3.0, 3);
        for j in 0..3 {
            assert!(
                (x[j] - oracle[j]).abs() < 1e-3,
                "axis {j}: {} vs {}",
                x[j],
                oracle[j]
            );
        }
    }

    #[test]
    fn noiseless_simulation_is_reproducible() {
        let cfg = LorenzConfig {
            sigma_e2: 0.0,
            ..LorenzConfig::default()
        };
        let a = simulate(&cfg, 300, &mut RngStream::new(1, 0)).unwrap();
        let b = simulate(&cfg, 300, &mut RngStream::new(2, 5)).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn noisy_trajectory_stays_on_attractor_box() {
        let cfg = LorenzConfig::default();
        for sid in 0..5 {
            let tr = simulate(&cfg, 1000, &mut RngStream::new(42, sid)).unwrap();
            for s in &tr.states {
                assert!(s[0].abs() <= 30.0 && s[1].abs() <= 40.0);
                assert!((-5.0..=55.0).contains(&s[2]));
            }
        }
    }

    #[test]
    fn distinct_streams_differ_immediately() {
        let cfg = LorenzConfig::default();
        let a = simulate(&cfg, 5, &mut RngStream::new(9, 0)).unwrap();
        let b = simulate(&cfg, 5, &mut RngStream::new(9, 1)).unwrap();
        assert_ne!(a.states[0], b.states[0]);
    }

    #[test]
    fn prefix_property() {
        let cfg = LorenzConfig {
            burn_in: 10,
            ..LorenzConfig::default()
        };
        let long = simulate(&cfg, 200, &mut RngStream::new(4, 2)).unwrap();
        let short = simulate(&cfg, 77, &mut RngStream::new(4, 2)).unwrap();
        assert_eq!(&long.states[..77], &short.states[..]);
    }

    #[test]
    fn long_run_mean_depth() {
        let cfg = LorenzConfig {
            sigma_e2: 0.0,
            ..LorenzConfig::default()
        };
        let tr = simulate(&cfg, 10_000, &mut RngStream::new(0, 0)).unwrap();
        let mean = tr.states.iter().map(|s| s[2]).sum::<f64>() / tr.len() as f64;
        assert!((20.0..=30.0).contains(&mean), "mean x3 {mean}");

        // Same statistic from the continuous flow.
        let mut x = [1.0; 3];
        let mut acc = 0.0;
        for _ in 0..10_000 {
            x = rk4(x, 0.02 / 3.0, 3);
            acc += x[2];
        }
        let oracle = acc / 10_000.0;
        assert!((mean - oracle).abs() < 2.0, "map {mean} vs flow {oracle}");
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = LorenzConfig {
            delta: 1.0,
            x0: [50.0, 50.0, 50.0],
            ..LorenzConfig::default()
        };
        assert!(matches!(
            simulate(&cfg, 100, &mut RngStream::new(0, 0)),
            Err(VseError::SimulationDiverged { .. })
        ));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = LorenzConfig {
            delta: 0.0,
            ..LorenzConfig::default()
        };
        assert!(simulate(&cfg, 1, &mut RngStream::new(0, 0)).is_err());
        assert!(simulate(&LorenzConfig::default(), 0, &mut RngStream::new(0, 0)).is_err());
    }
}
