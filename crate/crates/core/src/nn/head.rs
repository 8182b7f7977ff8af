//! Fully connected Gaussian head: `hidden → ReLU(K) → (mean, softplus(raw) + floor)`.

use serde::{Deserialize, Serialize};

use super::tensor::{gemv_acc, gemv_t_acc, ger_acc, Tensor};
use crate::mathcore::{sigmoid, softplus, GaussianBelief, VARIANCE_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `K × H`
    pub w_hidden: Tensor,
    pub b_hidden: Tensor,
    /// `m × K`
    pub w_mean: Tensor,
    pub b_mean: Tensor,
    /// `m × K`
    pub w_var: Tensor,
    pub b_var: Tensor,
}

/// Pre-activations of one head evaluation.
#[derive(Clone, Debug)]
pub(crate) struct HeadTrace {
    /// ReLU pre-activation, `K`.
    pub pre: Vec<f64>,
    /// Post-activation, `K`.
    pub act: Vec<f64>,
    /// Raw variance output, `m`.
    pub raw: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(hidden: usize, width: usize, state_dim: usize) -> Self {
        Self {
            w_hidden: Tensor::zeros(&[width, hidden]),
            b_hidden: Tensor::zeros(&[width]),
            w_mean: Tensor::zeros(&[state_dim, width]),
            b_mean: Tensor::zeros(&[state_dim]),
            w_var: Tensor::zeros(&[state_dim, width]),
            b_var: Tensor::zeros(&[state_dim]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.b_mean.len()
    }

    pub fn width(&self) -> usize {
        self.b_hidden.len()
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.cols()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w_hidden", &self.w_hidden),
            ("b_hidden", &self.b_hidden),
            ("w_mean", &self.w_mean),
            ("b_mean", &self.b_mean),
            ("w_var", &self.w_var),
            ("b_var", &self.b_var),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_mean,
            &mut self.b_mean,
            &mut self.w_var,
            &mut self.b_var,
        ]
    }

    /// Writes mean and variance for one hidden vector.
    pub(crate) fn forward_into(
        &self,
        hidden: &[f64],
        mean: &mut [f64],
        var: &mut [f64],
    ) -> HeadTrace {
        let k = self.width();
        let h = self.hidden();
        let mut pre = self.b_hidden.data.clone();
        gemv_acc(&self.w_hidden.data, h, hidden, &mut pre);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        mean.copy_from_slice(&self.b_mean.data);
        gemv_acc(&self.w_mean.data, k, &act, mean);
        let mut raw = self.b_var.data.clone();
        gemv_acc(&self.w_var.data, k, &act, &mut raw);
        for (v, r) in var.iter_mut().zip(&raw) {
            *v = softplus(*r) + VARIANCE_FLOOR;
        }
        HeadTrace { pre, act, raw }
    }

    /// Accumulates parameter gradients from `d_mean`, `d_var`; returns the
    /// gradient w.r.t. the hidden input.
    pub(crate) fn backward(
        &self,
        hidden: &[f64],
        trace: &HeadTrace,
        d_mean: &[f64],
        d_var: &[f64],
        grad: &mut HeadParams,
    ) -> Vec<f64> {
        let k = self.width();
        let h = self.hidden();
        let d_raw: Vec<f64> = d_var
            .iter()
            .zip(&trace.raw)
            .map(|(g, r)| g * sigmoid(*r))
            .collect();
        ger_acc(&mut grad.w_mean.data, k, d_mean, &trace.act);
        ger_acc(&mut grad.w_var.data, k, &d_raw, &trace.act);
        for j in 0..d_mean.len() {
            grad.b_mean.data[j] += d_mean[j];
            grad.b_var.data[j] += d_raw[j];
        }
        let mut d_act = vec![0.0; k];
        gemv_t_acc(&self.w_mean.data, k, d_mean, &mut d_act);
        gemv_t_acc(&self.w_var.data, k, &d_raw, &mut d_act);
        for (d, p) in d_act.iter_mut().zip(&trace.pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        for (b, d) in grad.b_hidden.data.iter_mut().zip(&d_act) {
            *b += d;
        }
        ger_acc(&mut grad.w_hidden.data, h, &d_act, hidden);
        let mut d_hidden = vec![0.0; h];
        gemv_t_acc(&self.w_hidden.data, h, &d_act, &mut d_hidden);
        d_hidden
    }
}

/// Maps one hidden vector to a Gaussian belief.
pub fn gaussian_head(params: &HeadParams, hidden: &[f64]) -> GaussianBelief {
    let m = params.state_dim();
    let mut mean = vec![0.0; m];
    let mut var = vec![0.0; m];
    params.forward_into(hidden, &mut mean, &mut var);
    GaussianBelief {
        mean,
        var_diag: var,
    }
}
