//! Low-resolution camera: a Gaussian point-spread function evaluated on a
//! rectangular pixel grid, plus measurement-noise calibration by SMNR.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VseError};
use crate::mathcore::RngStream;
use crate::measurement::MeasurementModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub res_x: usize,
    pub res_y: usize,
    pub range_x: [f64; 2],
    pub range_y: [f64; 2],
    pub amplitude: f64,
    /// Lower clamp for the depth coordinate inside the exponent.
    pub depth_floor: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            res_x: 8,
            res_y: 8,
            range_x: [-30.0, 30.0],
            range_y: [-40.0, 40.0],
            amplitude: 10.0,
            depth_floor: 1e-3,
        }
    }
}

fn linspace_point(range: [f64; 2], count: usize, k: usize) -> f64 {
    if count == 1 {
        return 0.5 * (range[0] + range[1]);
    }
    let r = (count - 1) as f64;
    // Symmetric ranges map k and count-1-k to exact negatives.
    (range[0] * (r - k as f64) + range[1] * k as f64) / r
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res_x == 0 || self.res_y == 0 {
            return Err(VseError::Domain(
                "camera resolution must be positive".into(),
            ));
        }
        if !(self.range_x[1] > self.range_x[0]) || !(self.range_y[1] > self.range_y[0]) {
            return Err(VseError::Domain(
                "camera ranges must have positive width".into(),
            ));
        }
        if !(self.amplitude > 0.0) || !(self.depth_floor > 0.0) {
            return Err(VseError::Domain(
                "camera amplitude and depth floor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.res_x * self.res_y
    }

    /// Pixel centres, row-major: the x coordinate varies fastest.
    pub fn pixel_grid(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.pixel_count());
        for iy in 0..self.res_y {
            let gy = linspace_point(self.range_y, self.res_y, iy);
            for ix in 0..self.res_x {
                out.push([linspace_point(self.range_x, self.res_x, ix), gy]);
            }
        }
        out
    }
}

/// Camera with its pixel grid precomputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "CameraConfig", into = "CameraConfig")]
pub struct Camera {
    cfg: CameraConfig,
    grid: Vec<[f64; 2]>,
}

impl From<CameraConfig> for Camera {
    fn from(cfg: CameraConfig) -> Self {
        let grid = cfg.pixel_grid();
        Self { cfg, grid }
    }
}

impl From<Camera> for CameraConfig {
    fn from(c: Camera) -> Self {
        c.cfg
    }
}

impl Camera {
    pub fn config(&self) -> &CameraConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &[[f64; 2]] {
        &self.grid
    }
}

impl MeasurementModel for Camera {
    fn state_dim(&self) -> usize {
        3
    }

    fn measurement_dim(&self) -> usize {
        self.grid.len()
    }

    fn measure(&self, x: &[f64], out: &mut [f64]) {
        measure_into(&self.cfg, &self.grid, [x[0], x[1], x[2]], out);
    }

    fn measure_with_jacobian(&self, x: &[f64], out: &mut [f64], jac: &mut [f64]) {
        measure_jacobian_into(&self.cfg, &self.grid, [x[0], x[1], x[2]], out, jac);
    }

    /// Pixel centres crossed with depths `1, 2, 4, …, 2048`, plus the optical axis.
    fn candidate_states(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for depth in (0..12).map(|k| 2f64.powi(k)) {
            for g in &self.grid {
                out.push(vec![g[0], g[1], depth]);
            }
            out.push(vec![0.0, 0.0, depth]);
        }
        out
    }
}

pub(crate) fn measure_into(cfg: &CameraConfig, grid: &[[f64; 2]], x: [f64; 3], out: &mut [f64]) {
    let scale = -0.5 / x[2].max(cfg.depth_floor);
    for (o, g) in out.iter_mut().zip(grid) {
        let (dx, dy) = (g[0] - x[0], g[1] - x[1]);
        *o = cfg.amplitude * (scale * (dx * dx + dy * dy)).exp();
    }
}

pub(crate) fn measure_jacobian_into(
    cfg: &CameraConfig,
    grid: &[[f64; 2]],
    x: [f64; 3],
    out: &mut [f64],
    jac: &mut [f64],
) {
    let clamped = x[2] <= cfg.depth_floor;
    let depth = x[2].max(cfg.depth_floor);
    let scale = -0.5 / depth;
    for (i, g) in grid.iter().enumerate() {
        let (dx, dy) = (g[0] - x[0], g[1] - x[1]);
        let d2 = dx * dx + dy * dy;
        let h = cfg.amplitude * (scale * d2).exp();
        out[i] = h;
        jac[3 * i] = h * dx / depth;
        jac[3 * i + 1] = h * dy / depth;
        jac[3 * i + 2] = if clamped {
            0.0
        } else {
            h * d2 / (2.0 * depth * depth)
        };
    }
}

/// Noise-free pixel intensities for one state.
pub fn measure_clean(x: &[f64; 3], cfg: &CameraConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.pixel_count()];
    measure_into(cfg, &cfg.pixel_grid(), *x, &mut out);
    out
}

/// Clean intensities plus `N(0, sigma_w2 I)` noise drawn from `stream`.
pub fn measure_noisy(
    x: &[f64; 3],
    cfg: &CameraConfig,
    sigma_w2: f64,
    stream: &mut RngStream,
) -> Vec<f64> {
    let mut y = measure_clean(x, cfg);
    add_noise(&mut y, sigma_w2, stream);
    y
}

pub(crate) fn add_noise(y: &mut [f64], sigma_w2: f64, stream: &mut RngStream) {
    let sd = sigma_w2.sqrt();
    for v in y.iter_mut() {
        *v += sd * stream.normal();
    }
}

/// Noisy measurements of a state trajectory, `T × n` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSequence {
    pub measurements: Vec<f64>,
    pub n: usize,
    pub sigma_w2: f64,
}

/// Per-sequence `10 log10 Σ_t ‖h_t − h̄‖²`, with `h̄` the temporal mean image.
pub(crate) fn signal_power_db(clean_set: &[Vec<f64>], n: usize) -> Result<Vec<f64>> {
    if clean_set.is_empty() {
        return Err(VseError::Domain("empty clean measurement set".into()));
    }
    clean_set
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            if n == 0 || seq.is_empty() || seq.len() % n != 0 {
                return Err(VseError::Malformed(format!(
                    "sequence {i} length {} is not a multiple of {n}",
                    seq.len()
                )));
            }
            let t_len = seq.len() / n;
            let mut mean = vec![0.0; n];
            for row in seq.chunks_exact(n) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t_len as f64);
            let power: f64 = seq
                .chunks_exact(n)
                .map(|row| {
                    row.iter()
                        .zip(&mean)
                        .map(|(v, m)| (v - m) * (v - m))
                        .sum::<f64>()
                })
                .sum();
            if !(power > 0.0) {
                return Err(VseError::DegenerateSignal { sequence: i });
            }
            Ok(10.0 * power.log10())
        })
        .collect()
}

/// SMNR in dB of a clean set under isotropic noise variance `sigma_w2`.
pub(crate) fn smnr_db(clean_set: &[Vec<f64>], n: usize, sigma_w2: f64) -> Result<f64> {
    if !(sigma_w2 > 0.0) {
        return Err(VseError::Domain(format!(
            "sigma_w2 must be > 0, got {sigma_w2}"
        )));
    }
    let powers = signal_power_db(clean_set, n)?;
    let noise_db = 10.0 * (n as f64 * sigma_w2).log10();
    Ok(powers.iter().map(|p| p - noise_db).sum::<f64>() / powers.len() as f64)
}

/// Noise variance at which the set's SMNR equals `target_smnr_db`.
///
/// Each clean sequence is `T × n` row-major.
pub fn calibrate_sigma_w(clean_set: &[Vec<f64>], n: usize, target_smnr_db: f64) -> Result<f64> {
    let powers = signal_power_db(clean_set, n)?;
    let mean_db = powers.iter().sum::<f64>() / powers.len() as f64;
    Ok(10f64.powf((mean_db - target_smnr_db) / 10.0) / n as f64)
}
