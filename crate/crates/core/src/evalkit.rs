//! Phase-invariant NMSE, measured SMNR and the NMSE-versus-SMNR sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera, CameraConfig};
use crate::datasets;
use crate::error::{Result, VseError};
use crate::lorenz::LorenzConfig;
use crate::mathcore::RngStream;
use crate::particle_filter::{pf_run, LorenzTransition, PfConfig};
use crate::vse::{infer, VseModel};

/// An NMSE in dB, or an exact match whose logarithm would be `-inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NmseValue {
    Exact,
    Db(f64),
}

impl NmseValue {
    /// `-inf` for [`NmseValue::Exact`].
    pub fn as_db(self) -> f64 {
        match self {
            NmseValue::Exact => f64::NEG_INFINITY,
            NmseValue::Db(v) => v,
        }
    }

    pub fn is_exact(self) -> bool {
        matches!(self, NmseValue::Exact)
    }
}

impl fmt::Display for NmseValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NmseValue::Exact => f.write_str("exact"),
            NmseValue::Db(v) => write!(f, "{v:.6}"),
        }
    }
}

impl Serialize for NmseValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NmseValue::Exact => s.serialize_str("exact"),
            NmseValue::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for NmseValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(NmseValue::Db(v)),
            Raw::Text(t) if t == "exact" => Ok(NmseValue::Exact),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "unknown NMSE value `{t}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub nmse_db: NmseValue,
    pub per_sequence_nmse_db: Vec<NmseValue>,
    pub smnr_db: Option<f64>,
    pub inference_seconds: Option<f64>,
}

/// Mean over sequences of `10 log10(Σ_t ‖|x_t| − |x̂_t|‖² / Σ_t ‖x_t‖²)`,
/// with `|·|` taken elementwise. The mean is [`NmseValue::Exact`] as soon as
/// any sequence matches exactly, since its term is `-inf`.
pub fn nmse_db(truth: &[Vec<f64>], estimates: &[Vec<f64>]) -> Result<EvalResult> {
    if truth.is_empty() {
        return Err(VseError::Domain("no sequences to score".into()));
    }
    if truth.len() != estimates.len() {
        return Err(VseError::DimensionMismatch {
            what: "estimate sequence count",
            expected: truth.len(),
            got: estimates.len(),
        });
    }
    let per: Vec<NmseValue> = truth
        .iter()
        .zip(estimates)
        .enumerate()
        .map(|(i, (x, xh))| {
            if x.len() != xh.len() {
                return Err(VseError::DimensionMismatch {
                    what: "estimate sequence length",
                    expected: x.len(),
                    got: xh.len(),
                });
            }
            let num: f64 = x
                .iter()
                .zip(xh)
                .map(|(a, b)| (a.abs() - b.abs()).powi(2))
                .sum();
            let den: f64 = x.iter().map(|a| a * a).sum();
            if !(den > 0.0) {
                return Err(VseError::DegenerateMetric { sequence: i });
            }
            if !num.is_finite() {
                return Err(VseError::Domain(format!(
                    "non-finite estimate in sequence {i}"
                )));
            }
            Ok(if num == 0.0 {
                NmseValue::Exact
            } else {
                NmseValue::Db(10.0 * (num / den).log10())
            })
        })
        .collect::<Result<_>>()?;
    let nmse = if per.iter().any(|v| v.is_exact()) {
        NmseValue::Exact
    } else {
        NmseValue::Db(per.iter().map(|v| v.as_db()).sum::<f64>() / per.len() as f64)
    };
    Ok(EvalResult {
        nmse_db: nmse,
        per_sequence_nmse_db: per,
        smnr_db: None,
        inference_seconds: None,
    })
}

/// SMNR in dB of clean `T × n` sequences under noise variance `sigma_w2`.
pub fn measured_smnr_db(clean_set: &[Vec<f64>], n: usize, sigma_w2: f64) -> Result<f64> {
    camera::smnr_db(clean_set, n, sigma_w2)
}

/// Clean camera images for flat `T × 3` state sequences.
pub fn clean_measurements(states: &[Vec<f64>], cfg: &CameraConfig) -> Vec<Vec<f64>> {
    let cam = Camera::from(cfg.clone());
    let n = cfg.pixel_count();
    states
        .par_iter()
        .map(|s| {
            let mut out = vec![0.0; s.len() / 3 * n];
            for (x, row) in s.chunks_exact(3).zip(out.chunks_exact_mut(n)) {
                camera::measure_into(cam.config(), cam.grid(), [x[0], x[1], x[2]], row);
            }
            out
        })
        .collect()
}

/// Posterior-mean estimates for every sequence and the wall time of the calls.
pub fn run_vse(model: &VseModel, sequences: &[&[f64]]) -> Result<(Vec<Vec<f64>>, f64)> {
    let start = Instant::now();
    let est = sequences
        .par_iter()
        .map(|y| infer(model, y).map(|r| r.flat_estimates()))
        .collect::<Result<Vec<_>>>()?;
    Ok((est, start.elapsed().as_secs_f64()))
}

const PF_DOMAIN: u8 = 32;

/// Particle-filter estimates for every sequence; sequence `i` uses its own
/// stream keyed by `(seed, i)`.
pub fn run_pf(
    sequences: &[&[f64]],
    cfg: &PfConfig,
    lorenz: &LorenzConfig,
    camera_cfg: &CameraConfig,
    sigma_w2: f64,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let cam = Camera::from(camera_cfg.clone());
    let tr = LorenzTransition(lorenz.clone());
    let start = Instant::now();
    let est = sequences
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            pf_run(
                y,
                cfg,
                &tr,
                &cam,
                sigma_w2,
                &mut RngStream::keyed(seed, PF_DOMAIN, 0, i as u32),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((est, start.elapsed().as_secs_f64()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub smnr_db: Vec<f64>,
    pub n_seq: usize,
    pub t_len: usize,
    pub seed: u64,
    pub lorenz: LorenzConfig,
    pub camera: CameraConfig,
    /// `None` skips the particle filter.
    pub pf: Option<PfConfig>,
    /// Score the learned estimator (needs one model per SMNR).
    pub vse: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            smnr_db: vec![0.0, 10.0, 20.0],
            n_seq: 20,
            t_len: 200,
            seed: 0,
            lorenz: LorenzConfig::default(),
            camera: CameraConfig::default(),
            pf: Some(PfConfig::default()),
            vse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub smnr_db: f64,
    pub method: String,
    pub nmse_db: NmseValue,
    pub seconds: f64,
    pub seed: u64,
}

pub const SWEEP_CSV_HEADER: &str = "smnr_db,method,nmse_db,seconds,seed";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{}",
            self.smnr_db, self.method, self.nmse_db, self.seconds, self.seed
        )
    }
}

/// Key used to look up a model for an SMNR level, e.g. `10` or `-2.5`.
pub fn smnr_key(smnr_db: f64) -> String {
    format!("{smnr_db}")
}

/// For each SMNR: a fresh test set, then each method in turn.
pub fn sweep(cfg: &SweepConfig, models: &BTreeMap<String, VseModel>) -> Result<Vec<SweepRow>> {
    if cfg.vse {
        for s in &cfg.smnr_db {
            if !models.contains_key(&smnr_key(*s)) {
                return Err(VseError::MissingForSmnr {
                    smnr_db: *s,
                    what: "trained checkpoint".into(),
                });
            }
        }
    }
    let mut rows = Vec::new();
    for (k, &smnr) in cfg.smnr_db.iter().enumerate() {
        let set_seed = cfg.seed.wrapping_add(k as u64);
        let data = datasets::generate(
            cfg.n_seq,
            cfg.t_len,
            smnr,
            &cfg.lorenz,
            &cfg.camera,
            set_seed,
        )?;
        let ys = data.measurement_slices();
        let truth = data.states().expect("generated sets carry states");
        if cfg.vse {
            let (est, secs) = run_vse(&models[&smnr_key(smnr)], &ys)?;
            rows.push(SweepRow {
                smnr_db: smnr,
                method: "vse".into(),
                nmse_db: nmse_db(truth, &est)?.nmse_db,
                seconds: secs,
                seed: set_seed,
            });
        }
        if let Some(pf) = &cfg.pf {
            let (est, secs) = run_pf(
                &ys,
                pf,
                &cfg.lorenz,
                &cfg.camera,
                data.meta.sigma_w2,
                set_seed,
            )?;
            rows.push(SweepRow {
                smnr_db: smnr,
                method: "pf".into(),
                nmse_db: nmse_db(truth, &est)?.nmse_db,
                seconds: secs,
                seed: set_seed,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorenz::simulate;
    use proptest::prelude::*;

    fn truth(seed: u64) -> Vec<Vec<f64>> {
        (0..3)
            .map(|i| {
                simulate(&LorenzConfig::default(), 40, &mut RngStream::new(seed, i))
                    .unwrap()
                    .flatten()
            })
            .collect()
    }

    #[test]
    fn exact_match_is_tagged() {
        let x = truth(1);
        let r = nmse_db(&x, &x).unwrap();
        assert_eq!(r.nmse_db, NmseValue::Exact);
        assert_eq!(r.nmse_db.to_string(), "exact");
        let flipped: Vec<Vec<f64>> = x.iter().map(|s| s.iter().map(|v| -v).collect()).collect();
        assert_eq!(nmse_db(&x, &flipped).unwrap().nmse_db, NmseValue::Exact);
    }

    #[test]
    fn zero_estimator_is_zero_db() {
        let x = truth(2);
        let zeros: Vec<Vec<f64>> = x.iter().map(|s| vec![0.0; s.len()]).collect();
        let r = nmse_db(&x, &zeros).unwrap();
        assert_eq!(r.nmse_db, NmseValue::Db(0.0));
        assert!(r
            .per_sequence_nmse_db
            .iter()
            .all(|v| *v == NmseValue::Db(0.0)));
    }

    #[test]
    fn zero_energy_truth_is_degenerate() {
        let err = nmse_db(&[vec![0.0; 6]], &[vec![1.0; 6]]).unwrap_err();
        assert!(matches!(err, VseError::DegenerateMetric { sequence: 0 }));
    }

    proptest! {
        #[test]
        fn sign_patterns_and_order_do_not_matter(signs in prop::collection::vec(prop::bool::ANY, 3), noise in 0.01f64..5.0, rot in 0usize..3) {
            let x = truth(3);
            let est: Vec<Vec<f64>> = x.iter().map(|s| s.iter().enumerate().map(|(k, v)| v + noise * ((k as f64) * 0.7).sin()).collect()).collect();
            let base = nmse_db(&x, &est).unwrap();
            let flipped: Vec<Vec<f64>> = est
                .iter()
                .map(|s| s.iter().enumerate().map(|(k, v)| if signs[k % 3] { -v } else { *v }).collect())
                .collect();
            prop_assert_eq!(&nmse_db(&x, &flipped).unwrap(), &base);
            let mut xr = x.clone();
            let mut er = est.clone();
            xr.rotate_left(rot);
            er.rotate_left(rot);
            let r = nmse_db(&xr, &er).unwrap().nmse_db.as_db();
            prop_assert!((r - base.nmse_db.as_db()).abs() < 1e-12);
        }
    }

    #[test]
    fn smnr_measure_inverts_calibration() {
        let states = truth(4);
        let cam = CameraConfig::default();
        let clean = clean_measurements(&states, &cam);
        for target in [-5.0, 0.0, 10.0, 23.5] {
            let s2 = camera::calibrate_sigma_w(&clean, 64, target).unwrap();
            assert!((measured_smnr_db(&clean, 64, s2).unwrap() - target).abs() < 1e-9);
            let hundred = measured_smnr_db(&clean, 64, 100.0 * s2).unwrap();
            assert!((hundred - (target - 20.0)).abs() < 1e-9);
        }
        let s2 = 0.37;
        let base = measured_smnr_db(&clean, 64, s2).unwrap();
        let scaled: Vec<Vec<f64>> = clean
            .iter()
            .map(|s| s.iter().map(|v| 3.0 * v).collect())
            .collect();
        assert!((measured_smnr_db(&scaled, 64, 9.0 * s2).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn nmse_values_serialize_as_tagged() {
        assert_eq!(
            serde_json::to_string(&NmseValue::Exact).unwrap(),
            "\"exact\""
        );
        assert_eq!(
            serde_json::from_str::<NmseValue>("-3.5").unwrap(),
            NmseValue::Db(-3.5)
        );
        assert_eq!(
            serde_json::from_str::<NmseValue>("\"exact\"").unwrap(),
            NmseValue::Exact
        );
    }

    #[test]
    fn sweep_reports_missing_models_by_smnr() {
        let cfg = SweepConfig {
            smnr_db: vec![5.0],
            ..SweepConfig::default()
        };
        match sweep(&cfg, &BTreeMap::new()) {
            Err(VseError::MissingForSmnr { smnr_db, .. }) => assert_eq!(smnr_db, 5.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pf_only_sweep_has_one_row_per_level() {
        let cfg = SweepConfig {
            smnr_db: vec![0.0, 20.0],
            n_seq: 2,
            t_len: 10,
            pf: Some(PfConfig {
                particles: 20,
                ..PfConfig::default()
            }),
            vse: false,
            ..SweepConfig::default()
        };
        let rows = sweep(&cfg, &BTreeMap::new()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.method == "pf"));
        assert_eq!(
            rows[1].csv_row().split(',').count(),
            SWEEP_CSV_HEADER.split(',').count()
        );
    }
}
