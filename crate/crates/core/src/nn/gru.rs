//! Gated recurrent layer with update gate `z`, reset gate `r` and candidate
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! c  = tanh(W_c x + U_c (r ⊙ h) + b_c)
//! h' = z ⊙ h + (1 − z) ⊙ c
//! ```
//!
//! The three input maps are stacked in `w_in` (rows: update, reset, candidate)
//! and the two gate recurrences in `u_gate`.

use serde::{Deserialize, Serialize};

use super::tensor::{axpy, gemv_acc, gemv_t_acc, ger_acc, Tensor};
use crate::mathcore::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    /// `3H × in`
    pub w_in: Tensor,
    /// `2H × H`
    pub u_gate: Tensor,
    /// `H × H`
    pub u_cand: Tensor,
    /// `3H`
    pub bias: Tensor,
}

/// Activations of one layer over a whole sequence, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub rh: Vec<f64>,
    pub out: Vec<f64>,
}

impl GruLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[3 * hidden, input]),
            u_gate: Tensor::zeros(&[2 * hidden, hidden]),
            u_cand: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_cand.rows()
    }

    pub fn input(&self) -> usize {
        self.w_in.cols()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_in", &self.w_in),
            ("u_gate", &self.u_gate),
            ("u_cand", &self.u_cand),
            ("bias", &self.bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_in,
            &mut self.u_gate,
            &mut self.u_cand,
            &mut self.bias,
        ]
    }

    /// One recurrence step. `scratch` must hold `3H` values.
    #[inline]
    fn step(
        &self,
        x: &[f64],
        h_prev: &[f64],
        scratch: &mut [f64],
        z: &mut [f64],
        r: &mut [f64],
        c: &mut [f64],
        rh: &mut [f64],
        out: &mut [f64],
    ) {
        let hd = self.hidden();
        let inp = self.input();
        scratch.copy_from_slice(&self.bias.data);
        gemv_acc(&self.w_in.data, inp, x, scratch);
        gemv_acc(&self.u_gate.data, hd, h_prev, &mut scratch[..2 * hd]);
        for k in 0..hd {
            z[k] = sigmoid(scratch[k]);
            r[k] = sigmoid(scratch[hd + k]);
            rh[k] = r[k] * h_prev[k];
        }
        gemv_acc(&self.u_cand.data, hd, rh, &mut scratch[2 * hd..]);
        for k in 0..hd {
            c[k] = scratch[2 * hd + k].tanh();
            out[k] = z[k] * h_prev[k] + (1.0 - z[k]) * c[k];
        }
    }

    /// Runs the layer over `T × in` inputs from a zero state; returns `T × H`.
    pub fn forward(&self, inputs: &[f64], t_len: usize) -> Vec<f64> {
        self.forward_traced(inputs, t_len).out
    }

    pub fn forward_traced(&self, inputs: &[f64], t_len: usize) -> LayerTrace {
        let hd = self.hidden();
        let inp = self.input();
        debug_assert_eq!(inputs.len(), t_len * inp);
        let mut tr = LayerTrace {
            z: vec![0.0; t_len * hd],
            r: vec![0.0; t_len * hd],
            c: vec![0.0; t_len * hd],
            rh: vec![0.0; t_len * hd],
            out: vec![0.0; t_len * hd],
        };
        let zero = vec![0.0; hd];
        let mut scratch = vec![0.0; 3 * hd];
        for t in 0..t_len {
            let (done, rest) = tr.out.split_at_mut(t * hd);
            let h_prev = if t == 0 {
                &zero[..]
            } else {
                &done[(t - 1) * hd..]
            };
            let s = t * hd..(t + 1) * hd;
            self.step(
                &inputs[t * inp..(t + 1) * inp],
                h_prev,
                &mut scratch,
                &mut tr.z[s.clone()],
                &mut tr.r[s.clone()],
                &mut tr.c[s.clone()],
                &mut tr.rh[s],
                &mut rest[..hd],
            );
        }
        tr
    }

    /// Back-propagates `d_out` (`T × H`, gradient w.r.t. every output) through
    /// time, accumulating parameter gradients into `grad`. Returns the gradient
    /// w.r.t. the inputs when `want_input_grad` is set.
    pub fn backward(
        &self,
        inputs: &[f64],
        trace: &LayerTrace,
        d_out: &[f64],
        grad: &mut GruLayer,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let hd = self.hidden();
        let inp = self.input();
        let t_len = trace.out.len() / hd;
        let mut d_in = if want_input_grad {
            Some(vec![0.0; t_len * inp])
        } else {
            None
        };
        let zero = vec![0.0; hd];
        let mut dh = vec![0.0; hd];
        let mut dh_prev = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd];
        let mut drh = vec![0.0; hd];
        for t in (0..t_len).rev() {
            let s = t * hd..(t + 1) * hd;
            let (z, r, c, rh) = (
                &trace.z[s.clone()],
                &trace.r[s.clone()],
                &trace.c[s.clone()],
                &trace.rh[s.clone()],
            );
            let h_prev = if t == 0 {
                &zero[..]
            } else {
                &trace.out[(t - 1) * hd..t * hd]
            };
            let x = &inputs[t * inp..(t + 1) * inp];
            axpy(&mut dh, 1.0, &d_out[s]);

            for k in 0..hd {
                dh_prev[k] = dh[k] * z[k];
                let dc = dh[k] * (1.0 - z[k]);
                da[2 * hd + k] = dc * (1.0 - c[k] * c[k]);
                let dz = dh[k] * (h_prev[k] - c[k]);
                da[k] = dz * z[k] * (1.0 - z[k]);
            }
            let dac = &da[2 * hd..];
            ger_acc(&mut grad.u_cand.data, hd, dac, rh);
            drh.iter_mut().for_each(|v| *v = 0.0);
            gemv_t_acc(&self.u_cand.data, hd, dac, &mut drh);
            for k in 0..hd {
                let dr = drh[k] * h_prev[k];
                dh_prev[k] += drh[k] * r[k];
                da[hd + k] = dr * r[k] * (1.0 - r[k]);
            }
            axpy(&mut grad.bias.data, 1.0, &da);
            ger_acc(&mut grad.w_in.data, inp, &da, x);
            if t > 0 {
                ger_acc(&mut grad.u_gate.data, hd, &da[..2 * hd], h_prev);
                gemv_t_acc(&self.u_gate.data, hd, &da[..2 * hd], &mut dh_prev);
            }
            if let Some(d_in) = d_in.as_mut() {
                gemv_t_acc(&self.w_in.data, inp, &da, &mut d_in[t * inp..(t + 1) * inp]);
            }
            std::mem::swap(&mut dh, &mut dh_prev);
        }
        d_in
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::RngStream;

    fn random_layer(input: usize, hidden: usize, seed: u64) -> GruLayer {
        let mut l = GruLayer::zeros(input, hidden);
        let mut s = RngStream::new(seed, 0);
        for t in l.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = s.uniform() - 0.5);
        }
        l
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let l = GruLayer::zeros(4, 6);
        let x: Vec<f64> = (0..40).map(|k| k as f64 - 7.0).collect();
        assert!(l.forward(&x, 10).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_by_hand() {
        let l = random_layer(2, 3, 17);
        let x = [0.7, -1.3];
        let out = l.forward(&x, 1);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let row = |t: &Tensor, i: usize| -> Vec<f64> {
            t.data[i * t.cols()..(i + 1) * t.cols()].to_vec()
        };
        for k in 0..3 {
            // h_prev = 0, so the recurrent terms vanish.
            let wz = row(&l.w_in, k);
            let wc = row(&l.w_in, 6 + k);
            let z = sig(wz[0] * x[0] + wz[1] * x[1] + l.bias.data[k]);
            let c = (wc[0] * x[0] + wc[1] * x[1] + l.bias.data[6 + k]).tanh();
            let expect = (1.0 - z) * c;
            assert!((out[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_by_hand() {
        let l = random_layer(1, 2, 3);
        let x = [0.4, -0.9];
        let out = l.forward(&x, 2);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let w = &l.w_in.data;
        let u = &l.u_gate.data;
        let uc = &l.u_cand.data;
        let b = &l.bias.data;
        let h1 = [out[0], out[1]];
        let mut r = [0.0; 2];
        let mut z = [0.0; 2];
        for k in 0..2 {
            z[k] = sig(w[k] * x[1] + u[2 * k] * h1[0] + u[2 * k + 1] * h1[1] + b[k]);
            r[k] = sig(w[2 + k] * x[1]
                + u[2 * (2 + k)] * h1[0]
                + u[2 * (2 + k) + 1] * h1[1]
                + b[2 + k]);
        }
        for k in 0..2 {
            let c = (w[4 + k] * x[1]
                + uc[2 * k] * r[0] * h1[0]
                + uc[2 * k + 1] * r[1] * h1[1]
                + b[4 + k])
                .tanh();
            let expect = z[k] * h1[k] + (1.0 - z[k]) * c;
            assert!((out[2 + k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_prefix() {
        let l = random_layer(3, 5, 8);
        let mut x: Vec<f64> = (0..30).map(|k| (k as f64).cos()).collect();
        let a = l.forward(&x, 10);
        x[6 * 3 + 1] += 1.0;
        let b = l.forward(&x, 10);
        assert_eq!(a[..6 * 5], b[..6 * 5]);
        assert_ne!(a[6 * 5..7 * 5], b[6 * 5..7 * 5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let l = random_layer(2, 3, 21);
        let t_len = 4;
        let x: Vec<f64> = (0..t_len * 2).map(|k| (k as f64 * 0.9).sin()).collect();
        let weights: Vec<f64> = (0..t_len * 3).map(|k| (k as f64 * 0.31).cos()).collect();
        let loss = |layer: &GruLayer, x: &[f64]| -> f64 {
            layer
                .forward(x, t_len)
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let tr = l.forward_traced(&x, t_len);
        let mut g = GruLayer::zeros(2, 3);
        let dx = l.backward(&x, &tr, &weights, &mut g, true).unwrap();
        let h = 1e-6;
        for (ti, name) in ["w_in", "u_gate", "u_cand", "bias"].iter().enumerate() {
            for i in 0..g.tensors()[ti].1.len() {
                let mut p = l.clone();
                p.tensors_mut()[ti].data[i] += h;
                let up = loss(&p, &x);
                p.tensors_mut()[ti].data[i] -= 2.0 * h;
                let dn = loss(&p, &x);
                let fd = (up - dn) / (2.0 * h);
                let an = g.tensors()[ti].1.data[i];
                assert!((fd - an).abs() < 1e-8, "{name}[{i}]: fd {fd} vs {an}");
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&l, &xp);
            xp[i] -= 2.0 * h;
            let fd = (up - loss(&l, &xp)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
    }
}
