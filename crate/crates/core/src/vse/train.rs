use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::elbo::{elbo_gradients, elbo_with_eps, PairGrads};
use super::{domain, VseModel};
use crate::error::{Result, VseError};
use crate::mathcore::RngStream;
use crate::measurement::Measurement;
use crate::nn::{adam_step, clip_global_norm, AdamState, Architecture, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Epochs without validation improvement before the rate is cut.
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Stop once validation has not improved for this many epochs. The
    /// default allows two rate cuts without progress.
    pub early_stop_patience: Option<usize>,
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            lr_patience: 20,
            lr_decay: 0.5,
            grad_clip: 10.0,
            val_fraction: 0.1,
            early_stop_patience: Some(40),
            warm_start: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VseError::Domain("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate > 0.0) {
            return Err(VseError::Domain("learning rates must be > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(VseError::Domain(format!(
                "lr decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(VseError::Domain("gradient clip must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(VseError::Domain(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Index where the held-out tail starts.
    pub fn split_point(&self, n_seq: usize) -> usize {
        let n_val =
            ((self.val_fraction * n_seq as f64).ceil() as usize).min(n_seq.saturating_sub(1));
        n_seq - n_val
    }
}

/// One row of the training log. Bounds are per time step, averaged over sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_elbo,val_elbo,lr,grad_norm,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.train_elbo, self.val_elbo, self.lr, self.grad_norm, self.wall_time_s
        )
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: VseModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub best_val: Option<f64>,
    /// Epochs since the last improvement or rate cut.
    pub stale_epochs: usize,
    /// Epochs since the last improvement.
    pub since_best: usize,
    /// Parameters at the best validation bound so far, and that epoch.
    pub best: Option<(usize, Box<VseModel>)>,
}

impl TrainState {
    /// The best-validation parameters, or the current ones before any epoch.
    pub fn best_model(&self) -> &VseModel {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final state; [`TrainState::best_model`] is the model to deploy.
    pub state: TrainState,
    /// The bound of the starting parameters, before any update.
    pub initial: EpochRecord,
    pub log: Vec<EpochRecord>,
}

/// A run that stopped on a non-finite loss or gradient.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: VseError,
    /// State after the last finite update.
    pub last_good: Option<Box<TrainState>>,
    pub log: Vec<EpochRecord>,
}

impl From<VseError> for TrainFailure {
    fn from(error: VseError) -> Self {
        Self {
            error,
            last_good: None,
            log: Vec::new(),
        }
    }
}

/// Fresh parameters, optionally warm-started on the training split.
pub fn initial_state(
    arch: Architecture,
    measurement: Measurement,
    sigma_w2: f64,
    samples: usize,
    sequences: &[&[f64]],
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    let mut model = VseModel::new(arch, measurement, sigma_w2, samples, config.seed)?;
    if config.warm_start {
        model.warm_start_mean(&sequences[..config.split_point(sequences.len())]);
    }
    let adam = AdamState::new(model.named_tensors().into_iter().map(|(_, t)| t));
    Ok(TrainState {
        model,
        adam,
        epoch: 0,
        lr: config.learning_rate,
        best_val: None,
        stale_epochs: 0,
        since_best: 0,
        best: None,
    })
}

fn noise(
    model: &VseModel,
    t_len: usize,
    domain: u8,
    major: usize,
    minor: usize,
    seed: u64,
) -> Vec<f64> {
    let mut eps = vec![0.0; t_len * model.samples * model.state_dim()];
    RngStream::keyed(seed, domain, major as u32, minor as u32).fill_normal(&mut eps);
    eps
}

/// Mean per-step bound over `indices`, with the noise keyed by
/// `(domain, major, sequence index)`.
fn mean_elbo(
    model: &VseModel,
    sequences: &[&[f64]],
    indices: &[usize],
    domain: u8,
    major: usize,
    seed: u64,
) -> Result<f64> {
    let per_seq: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let y = sequences[i];
            let t_len = model.sequence_len(y)?;
            let eps = noise(model, t_len, domain, major, i, seed);
            elbo_with_eps(model, y, &eps).map(|r| r.per_step())
        })
        .collect::<Result<_>>()?;
    Ok(per_seq.iter().sum::<f64>() / per_seq.len().max(1) as f64)
}

/// Mean per-step bound on a set of sequences with fixed, seed-keyed noise.
pub fn evaluate_elbo(model: &VseModel, sequences: &[&[f64]], seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..sequences.len()).collect();
    mean_elbo(model, sequences, &idx, domain::VAL_EPS, 0, seed)
}

fn first_non_finite(names: &[String], tensors: &[&mut Tensor]) -> Option<String> {
    tensors
        .iter()
        .zip(names)
        .find(|(t, _)| t.data.iter().any(|v| !v.is_finite()))
        .map(|(_, n)| n.clone())
}

/// Maximizes the mean per-step bound over the leading split of `sequences`;
/// the trailing `val_fraction` drives the rate schedule and early stopping.
/// Only measurement sequences are ever seen here.
pub fn train(
    sequences: &[&[f64]],
    mut state: TrainState,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(VseError::Domain("training needs at least one sequence".into()).into());
    }
    for y in sequences {
        state.model.sequence_len(y)?;
    }
    let split = config.split_point(sequences.len());
    let train_idx: Vec<usize> = (0..split).collect();
    let val_idx: Vec<usize> = if split < sequences.len() {
        (split..sequences.len()).collect()
    } else {
        train_idx.clone()
    };
    let seed = config.seed;
    let names: Vec<String> = state
        .model
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let start = Instant::now();

    let initial = EpochRecord {
        epoch: state.epoch,
        train_elbo: mean_elbo(
            &state.model,
            sequences,
            &train_idx,
            domain::TRAIN_EPS,
            state.epoch,
            seed,
        )?,
        val_elbo: mean_elbo(&state.model, sequences, &val_idx, domain::VAL_EPS, 0, seed)?,
        lr: state.lr,
        grad_norm: 0.0,
        wall_time_s: start.elapsed().as_secs_f64(),
    };

    let mut log = Vec::new();
    let first = state.epoch + 1;
    for epoch in first..first + config.epochs {
        if epoch >= 1 << 24 {
            return Err(
                VseError::Domain("epoch counter exceeds the stream key range".into()).into(),
            );
        }
        let last_good = state.clone();
        let fail = |error: VseError, log: &Vec<EpochRecord>| TrainFailure {
            error,
            last_good: Some(Box::new(last_good.clone())),
            log: log.clone(),
        };
        let mut order = train_idx.clone();
        RngStream::keyed(seed, domain::SHUFFLE, epoch as u32, 0).shuffle(&mut order);

        let mut elbo_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let model = &state.model;
            let b = batch.len() as f64;
            let parts: Vec<(f64, PairGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let y = sequences[i];
                    let t_len = y.len() / model.input_dim();
                    let eps = noise(model, t_len, domain::TRAIN_EPS, epoch, i, seed);
                    let mut g = PairGrads::zeros_like(model);
                    let rep = elbo_gradients(model, y, &eps, -1.0 / (b * t_len as f64), &mut g)?;
                    Ok((rep.per_step(), g))
                })
                .collect::<Result<_>>()
                .map_err(|e| fail(e, &log))?;
            let mut iter = parts.into_iter();
            let (e0, mut grads) = iter.next().expect("non-empty batch");
            let mut batch_elbo = e0;
            for (e, g) in iter {
                batch_elbo += e;
                grads.add_assign(&g);
            }
            if !batch_elbo.is_finite() {
                return Err(fail(VseError::TrainingDiverged { epoch }, &log));
            }
            let mut gt = grads.tensors_mut();
            if let Some(parameter) = first_non_finite(&names, &gt) {
                return Err(fail(VseError::TrainingInstability { parameter }, &log));
            }
            norm_sum += clip_global_norm(&mut gt, config.grad_clip);
            let grad_refs: Vec<&Tensor> = gt.into_iter().map(|t| &*t).collect();
            adam_step(
                &mut state.model.tensors_mut(),
                &grad_refs,
                &mut state.adam,
                state.lr,
            );
            elbo_sum += batch_elbo;
            batches += 1;
        }
        if let Some(parameter) = first_non_finite(&names, &state.model.tensors_mut()) {
            return Err(fail(VseError::TrainingInstability { parameter }, &log));
        }

        let val = mean_elbo(&state.model, sequences, &val_idx, domain::VAL_EPS, 0, seed)
            .map_err(|e| fail(e, &log))?;
        if !val.is_finite() {
            return Err(fail(VseError::TrainingDiverged { epoch }, &log));
        }
        let record = EpochRecord {
            epoch,
            train_elbo: elbo_sum / train_idx.len() as f64,
            val_elbo: val,
            lr: state.lr,
            grad_norm: norm_sum / batches.max(1) as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        state.epoch = epoch;
        if state.best_val.is_none_or(|b| val > b) {
            state.best_val = Some(val);
            state.best = Some((epoch, Box::new(state.model.clone())));
            state.stale_epochs = 0;
            state.since_best = 0;
        } else {
            state.stale_epochs += 1;
            state.since_best += 1;
            if state.stale_epochs >= config.lr_patience {
                state.lr = (state.lr * config.lr_decay).max(config.min_learning_rate);
                state.stale_epochs = 0;
            }
        }
        on_epoch(&record);
        log.push(record);
        if config
            .early_stop_patience
            .is_some_and(|p| state.since_best >= p)
        {
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        initial,
        log,
    })
}
