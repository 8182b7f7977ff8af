use serde::{Deserialize, Serialize};

use super::gru::{GruLayer, LayerTrace};
use super::head::{HeadParams, HeadTrace};
use super::tensor::Tensor;
use crate::mathcore::{GaussianBelief, RngStream};

/// Sizes of one recurrent Gaussian network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub state_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub head_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 64,
            state_dim: 3,
            hidden: 80,
            layers: 2,
            head_width: 128,
        }
    }
}

/// A stack of GRU layers feeding a Gaussian head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruStackParams {
    pub layers: Vec<GruLayer>,
    pub head: HeadParams,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct StackTrace {
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) heads: Vec<HeadTrace>,
    /// `T × m`
    pub means: Vec<f64>,
    /// `T × m`
    pub vars: Vec<f64>,
}

impl StackTrace {
    pub fn beliefs(&self, m: usize) -> Vec<GaussianBelief> {
        self.means
            .chunks_exact(m)
            .zip(self.vars.chunks_exact(m))
            .map(|(mu, v)| GaussianBelief {
                mean: mu.to_vec(),
                var_diag: v.to_vec(),
            })
            .collect()
    }
}

impl GruStackParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = (0..arch.layers)
            .map(|l| {
                GruLayer::zeros(
                    if l == 0 { arch.input_dim } else { arch.hidden },
                    arch.hidden,
                )
            })
            .collect();
        Self {
            layers,
            head: HeadParams::zeros(arch.hidden, arch.head_width, arch.state_dim),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(arch: &Architecture, stream: &mut RngStream) -> Self {
        let mut p = Self::zeros(arch);
        for t in p.tensors_mut() {
            if t.shape.len() == 2 {
                let bound = 1.0 / (t.cols() as f64).sqrt();
                for v in t.data.iter_mut() {
                    *v = bound * (2.0 * stream.uniform() - 1.0);
                }
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.layers[0].input(),
            state_dim: self.head.state_dim(),
            hidden: self.head.hidden(),
            layers: self.layers.len(),
            head_width: self.head.width(),
        }
    }

    /// Tensors in a fixed order with stable names such as `layer0.w_in`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        for (name, t) in self.head.tensors() {
            out.push((format!("head.{name}"), t));
        }
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Last-layer hidden states, `T × H`.
    pub fn forward_hidden(&self, inputs: &[f64], t_len: usize) -> Vec<f64> {
        let mut x = self.layers[0].forward(inputs, t_len);
        for layer in &self.layers[1..] {
            x = layer.forward(&x, t_len);
        }
        x
    }

    /// Means and variances (`T × m` each) without keeping a trace.
    pub fn beliefs(&self, inputs: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let hidden = self.forward_hidden(inputs, t_len);
        let h = self.head.hidden();
        let m = self.head.state_dim();
        let mut means = vec![0.0; t_len * m];
        let mut vars = vec![0.0; t_len * m];
        for t in 0..t_len {
            self.head.forward_into(
                &hidden[t * h..(t + 1) * h],
                &mut means[t * m..(t + 1) * m],
                &mut vars[t * m..(t + 1) * m],
            );
        }
        (means, vars)
    }

    pub fn forward_traced(&self, inputs: &[f64], t_len: usize) -> StackTrace {
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let tr = if l == 0 {
                layer.forward_traced(inputs, t_len)
            } else {
                layer.forward_traced(&layers[l - 1].out, t_len)
            };
            layers.push(tr);
        }
        let top = &layers.last().expect("at least one layer").out;
        let h = self.head.hidden();
        let m = self.head.state_dim();
        let mut means = vec![0.0; t_len * m];
        let mut vars = vec![0.0; t_len * m];
        let heads = (0..t_len)
            .map(|t| {
                self.head.forward_into(
                    &top[t * h..(t + 1) * h],
                    &mut means[t * m..(t + 1) * m],
                    &mut vars[t * m..(t + 1) * m],
                )
            })
            .collect();
        StackTrace {
            layers,
            heads,
            means,
            vars,
        }
    }

    /// Accumulates into `grad` the gradient of a scalar whose partials with
    /// respect to the emitted means and variances are `d_mean`, `d_var`.
    pub fn backward(
        &self,
        inputs: &[f64],
        trace: &StackTrace,
        d_mean: &[f64],
        d_var: &[f64],
        grad: &mut GruStackParams,
    ) {
        let h = self.head.hidden();
        let m = self.head.state_dim();
        let t_len = trace.heads.len();
        let top = &trace.layers.last().expect("at least one layer").out;
        let mut d_hidden = vec![0.0; t_len * h];
        for t in 0..t_len {
            let dh = self.head.backward(
                &top[t * h..(t + 1) * h],
                &trace.heads[t],
                &d_mean[t * m..(t + 1) * m],
                &d_var[t * m..(t + 1) * m],
                &mut grad.head,
            );
            d_hidden[t * h..(t + 1) * h].copy_from_slice(&dh);
        }
        for l in (0..self.layers.len()).rev() {
            let layer_inputs = if l == 0 {
                inputs
            } else {
                &trace.layers[l - 1].out[..]
            };
            let d_in = self.layers[l].backward(
                layer_inputs,
                &trace.layers[l],
                &d_hidden,
                &mut grad.layers[l],
                l > 0,
            );
            if let Some(d) = d_in {
                d_hidden = d;
            }
        }
    }
}

/// Runs the recurrent layers over `T × n` inputs from a zero state and
/// returns the last layer's hidden states, `T × H`.
pub fn gru_forward(params: &GruStackParams, inputs: &[f64], t_len: usize) -> Vec<f64> {
    params.forward_hidden(inputs, t_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            input_dim: 2,
            state_dim: 2,
            hidden: 3,
            layers: 2,
            head_width: 4,
        }
    }

    #[test]
    fn zero_stack_is_silent() {
        let p = GruStackParams::zeros(&Architecture::default());
        let x: Vec<f64> = (0..64 * 5).map(|k| k as f64).collect();
        assert!(gru_forward(&p, &x, 5).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let arch = Architecture::default();
        let p = GruStackParams::init(&arch, &mut RngStream::new(1, 0));
        for (name, t) in p.named_tensors() {
            if t.shape.len() == 1 {
                assert!(t.data.iter().all(|v| *v == 0.0), "{name}");
            } else {
                let b = 1.0 / (t.cols() as f64).sqrt();
                assert!(t.data.iter().all(|v| v.abs() <= b), "{name}");
            }
        }
        assert_eq!(p.architecture(), arch);
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let arch = tiny();
        let mut p = GruStackParams::init(&arch, &mut RngStream::new(4, 0));
        for t in p.tensors_mut() {
            if t.shape.len() == 1 {
                t.data
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = 0.1 * (i as f64).sin());
            }
        }
        let t_len = 5;
        let x: Vec<f64> = (0..t_len * 2).map(|k| (k as f64 * 0.7).cos()).collect();
        let wm: Vec<f64> = (0..t_len * 2).map(|k| (k as f64 * 0.3).sin()).collect();
        let wv: Vec<f64> = (0..t_len * 2).map(|k| (k as f64 * 0.5).cos()).collect();
        let f = |q: &GruStackParams| {
            let (mu, v) = q.beliefs(&x, t_len);
            mu.iter().zip(&wm).map(|(a, b)| a * b).sum::<f64>()
                + v.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>()
        };
        let tr = p.forward_traced(&x, t_len);
        let mut g = p.zeros_like();
        p.backward(&x, &tr, &wm, &wv, &mut g);
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let grads: Vec<Vec<f64>> = g
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        let step = 1e-6;
        for (ti, name) in names.iter().enumerate() {
            for i in 0..grads[ti].len() {
                let mut q = p.clone();
                q.tensors_mut()[ti].data[i] += step;
                let up = f(&q);
                q.tensors_mut()[ti].data[i] -= 2.0 * step;
                let fd = (up - f(&q)) / (2.0 * step);
                let an = grads[ti][i];
                assert!(
                    (fd - an).abs() <= 1e-7 * (1.0 + an.abs()),
                    "{name}[{i}]: {fd} vs {an}"
                );
            }
        }
    }
}
