use super::{shifted_inputs, VseModel};
use crate::error::{Result, VseError};
use crate::mathcore::{isotropic_logpdf, kl_diag_raw, RngStream};
use crate::measurement::MeasurementModel;
use crate::nn::GruStackParams;

/// Per-step terms of the bound, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    /// `Σ_t (recon_t − kl_t)`, accumulated in step order.
    pub total: f64,
}

impl ElboReport {
    fn from_terms(recon: Vec<f64>, kl: Vec<f64>) -> Self {
        let total = recon.iter().zip(&kl).fold(0.0, |acc, (r, k)| acc + (r - k));
        Self { recon, kl, total }
    }

    pub fn steps(&self) -> usize {
        self.recon.len()
    }

    /// Bound per time step.
    pub fn per_step(&self) -> f64 {
        self.total / self.recon.len() as f64
    }
}

/// Gradients for both networks, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads {
    pub prior: GruStackParams,
    pub post: GruStackParams,
}

impl PairGrads {
    pub fn zeros_like(model: &VseModel) -> Self {
        Self {
            prior: model.prior.zeros_like(),
            post: model.post.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &PairGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            a.add_assign(b.1);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &crate::nn::Tensor)> {
        let mut out: Vec<_> = self
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

    pub fn tensors_mut(&mut self) -> Vec<&mut crate::nn::Tensor> {
        let mut out = self.prior.tensors_mut();
        out.extend(self.post.tensors_mut());
        out
    }
}

/// Scratch for one step of the bound.
struct StepScratch {
    x: Vec<f64>,
    h: Vec<f64>,
    jac: Vec<f64>,
    resid: Vec<f64>,
}

impl StepScratch {
    fn new(n: usize, m: usize) -> Self {
        Self {
            x: vec![0.0; m],
            h: vec![0.0; n],
            jac: vec![0.0; n * m],
            resid: vec![0.0; m],
        }
    }
}

/// Reconstruction and KL at one step. With `grads = Some((d_mq, d_vq, d_mp, d_vp))`
/// also accumulates `scale ×` the partials of `recon − kl`.
#[allow(clippy::too_many_arguments)]
fn step_terms(
    model: &VseModel,
    y_t: &[f64],
    mq: &[f64],
    vq: &[f64],
    mp: &[f64],
    vp: &[f64],
    eps_t: &[f64],
    scratch: &mut StepScratch,
    grads: Option<(&mut [f64], &mut [f64], &mut [f64], &mut [f64], f64)>,
) -> (f64, f64) {
    let m = mq.len();
    let n = y_t.len();
    let l_count = model.samples;
    let inv_l = 1.0 / l_count as f64;
    let mut recon_sum = 0.0;
    let want = grads.is_some();
    let mut d_mq_acc = vec![0.0; if want { m } else { 0 }];
    let mut d_vq_acc = vec![0.0; if want { m } else { 0 }];
    for l in 0..l_count {
        let e = &eps_t[l * m..(l + 1) * m];
        for j in 0..m {
            scratch.x[j] = mq[j] + vq[j].sqrt() * e[j];
        }
        if want {
            model
                .measurement
                .measure_with_jacobian(&scratch.x, &mut scratch.h, &mut scratch.jac);
            // d/dx log N(y; h(x), σ²I) = Jᵀ (y − h) / σ²
            scratch.resid.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let r = (y_t[i] - scratch.h[i]) / model.sigma_w2;
                for j in 0..m {
                    scratch.resid[j] += scratch.jac[i * m + j] * r;
                }
            }
            for j in 0..m {
                d_mq_acc[j] += scratch.resid[j];
                d_vq_acc[j] += scratch.resid[j] * e[j];
            }
        } else {
            model.measurement.measure(&scratch.x, &mut scratch.h);
        }
        recon_sum += isotropic_logpdf(y_t, &scratch.h, model.sigma_w2);
    }
    let recon = recon_sum * inv_l;
    let kl = kl_diag_raw(mq, vq, mp, vp);
    if let Some((d_mq, d_vq, d_mp, d_vp, scale)) = grads {
        for j in 0..m {
            let d = mq[j] - mp[j];
            let inv_vp = 1.0 / vp[j];
            d_mq[j] += scale * (inv_l * d_mq_acc[j] - d * inv_vp);
            d_vq[j] +=
                scale * (inv_l * d_vq_acc[j] / (2.0 * vq[j].sqrt()) - 0.5 * (inv_vp - 1.0 / vq[j]));
            d_mp[j] += scale * d * inv_vp;
            d_vp[j] += scale * 0.5 * ((vq[j] + d * d) * inv_vp * inv_vp - inv_vp);
        }
    }
    (recon, kl)
}

fn check_eps(model: &VseModel, t_len: usize, eps: &[f64]) -> Result<()> {
    let want = t_len * model.samples * model.state_dim();
    if eps.len() != want {
        return Err(VseError::DimensionMismatch {
            what: "reparameterization noise (T × L × m)",
            expected: want,
            got: eps.len(),
        });
    }
    Ok(())
}

/// The bound with caller-supplied noise, `T × L × m` standard normals.
pub fn elbo_with_eps(model: &VseModel, y: &[f64], eps: &[f64]) -> Result<ElboReport> {
    let t_len = model.sequence_len(y)?;
    check_eps(model, t_len, eps)?;
    let (n, m) = (model.input_dim(), model.state_dim());
    let (mq, vq) = model.post.beliefs(y, t_len);
    let (mp, vp) = model.prior.beliefs(&shifted_inputs(y, n), t_len);
    let mut scratch = StepScratch::new(n, m);
    let lm = model.samples * m;
    let mut recon = Vec::with_capacity(t_len);
    let mut kl = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let s = t * m..(t + 1) * m;
        let (r, k) = step_terms(
            model,
            &y[t * n..(t + 1) * n],
            &mq[s.clone()],
            &vq[s.clone()],
            &mp[s.clone()],
            &vp[s],
            &eps[t * lm..(t + 1) * lm],
            &mut scratch,
            None,
        );
        recon.push(r);
        kl.push(k);
    }
    Ok(ElboReport::from_terms(recon, kl))
}

/// The bound with `T × L × m` fresh standard normals drawn from `stream`.
pub fn elbo(model: &VseModel, y: &[f64], stream: &mut RngStream) -> Result<ElboReport> {
    let t_len = model.sequence_len(y)?;
    let mut eps = vec![0.0; t_len * model.samples * model.state_dim()];
    stream.fill_normal(&mut eps);
    elbo_with_eps(model, y, &eps)
}

/// The bound and the gradient of `scale × total` with respect to both networks,
/// accumulated into `grads`.
pub fn elbo_gradients(
    model: &VseModel,
    y: &[f64],
    eps: &[f64],
    scale: f64,
    grads: &mut PairGrads,
) -> Result<ElboReport> {
    let t_len = model.sequence_len(y)?;
    check_eps(model, t_len, eps)?;
    let (n, m) = (model.input_dim(), model.state_dim());
    let shifted = shifted_inputs(y, n);
    let post_tr = model.post.forward_traced(y, t_len);
    let prior_tr = model.prior.forward_traced(&shifted, t_len);
    let mut d_mq = vec![0.0; t_len * m];
    let mut d_vq = vec![0.0; t_len * m];
    let mut d_mp = vec![0.0; t_len * m];
    let mut d_vp = vec![0.0; t_len * m];
    let mut scratch = StepScratch::new(n, m);
    let lm = model.samples * m;
    let mut recon = Vec::with_capacity(t_len);
    let mut kl = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let s = t * m..(t + 1) * m;
        let (r, k) = step_terms(
            model,
            &y[t * n..(t + 1) * n],
            &post_tr.means[s.clone()],
            &post_tr.vars[s.clone()],
            &prior_tr.means[s.clone()],
            &prior_tr.vars[s.clone()],
            &eps[t * lm..(t + 1) * lm],
            &mut scratch,
            Some((
                &mut d_mq[s.clone()],
                &mut d_vq[s.clone()],
                &mut d_mp[s.clone()],
                &mut d_vp[s],
                scale,
            )),
        );
        recon.push(r);
        kl.push(k);
    }
    model
        .post
        .backward(y, &post_tr, &d_mq, &d_vq, &mut grads.post);
    model
        .prior
        .backward(&shifted, &prior_tr, &d_mp, &d_vp, &mut grads.prior);
    Ok(ElboReport::from_terms(recon, kl))
}
