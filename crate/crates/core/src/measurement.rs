//! Known measurement functions `h: ℝᵐ → ℝⁿ` with Jacobians.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
#[cfg(test)]
use crate::camera::CameraConfig;

pub trait MeasurementModel: Sync {
    fn state_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn measure(&self, x: &[f64], out: &mut [f64]);
    /// Writes `∂h/∂x` row-major (`n × m`) into `jac` and `h(x)` into `out`.
    fn measure_with_jacobian(&self, x: &[f64], out: &mut [f64], jac: &mut [f64]);
    /// Starting states for fitting a constant state to measurement data.
    fn candidate_states(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.state_dim()]]
    }
}

/// `h(x) = H x` with `H` stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMeasurement {
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f64>,
}

impl LinearMeasurement {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), rows * cols, "matrix shape");
        Self { rows, cols, matrix }
    }
}

impl MeasurementModel for LinearMeasurement {
    fn state_dim(&self) -> usize {
        self.cols
    }

    fn measurement_dim(&self) -> usize {
        self.rows
    }

    fn measure(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn measure_with_jacobian(&self, x: &[f64], out: &mut [f64], jac: &mut [f64]) {
        self.measure(x, out);
        jac.copy_from_slice(&self.matrix);
    }
}

/// Serializable choice of measurement function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Measurement {
    Camera(Camera),
    Linear(LinearMeasurement),
}

impl MeasurementModel for Measurement {
    fn state_dim(&self) -> usize {
        match self {
            Measurement::Camera(_) => 3,
            Measurement::Linear(l) => l.state_dim(),
        }
    }

    fn measurement_dim(&self) -> usize {
        match self {
            Measurement::Camera(c) => c.measurement_dim(),
            Measurement::Linear(l) => l.measurement_dim(),
        }
    }

    fn measure(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Measurement::Camera(c) => c.measure(x, out),
            Measurement::Linear(l) => l.measure(x, out),
        }
    }

    fn measure_with_jacobian(&self, x: &[f64], out: &mut [f64], jac: &mut [f64]) {
        match self {
            Measurement::Camera(c) => c.measure_with_jacobian(x, out, jac),
            Measurement::Linear(l) => l.measure_with_jacobian(x, out, jac),
        }
    }

    fn candidate_states(&self) -> Vec<Vec<f64>> {
        match self {
            Measurement::Camera(c) => c.candidate_states(),
            Measurement::Linear(l) => l.candidate_states(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_jacobian_matches_finite_differences() {
        let cam = Camera::from(CameraConfig::default());
        let x = [3.0, -7.0, 22.0];
        let n = cam.measurement_dim();
        let mut h = vec![0.0; n];
        let mut jac = vec![0.0; n * 3];
        cam.measure_with_jacobian(&x, &mut h, &mut jac);
        let step = 1e-6;
        for j in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[j] += step;
            xm[j] -= step;
            let (mut hp, mut hm) = (vec![0.0; n], vec![0.0; n]);
            cam.measure(&xp, &mut hp);
            cam.measure(&xm, &mut hm);
            for i in 0..n {
                let fd = (hp[i] - hm[i]) / (2.0 * step);
                assert!((fd - jac[i * 3 + j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn linear_measurement() {
        let l = LinearMeasurement::new(2, 1, vec![2.0, -1.0]);
        let mut out = [0.0; 2];
        let mut jac = [0.0; 2];
        l.measure_with_jacobian(&[3.0], &mut out, &mut jac);
        assert_eq!(out, [6.0, -3.0]);
        assert_eq!(jac, [2.0, -1.0]);
    }

    #[test]
    fn enum_roundtrips_through_json() {
        let m = Measurement::Camera(CameraConfig::default().into());
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Measurement>(&s).unwrap(), m);
    }
}
