//! Subcommand implementations behind the `vse` binary.
//!
//! Every command resolves its settings from defaults, an optional
//! `--config` JSON file and explicit flags (flags win), then writes the
//! resolved settings to `<out>.config.json` so the run can be repeated with
//! `--config` alone.

pub mod args;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vse_core::camera::CameraConfig;
use vse_core::datasets::{self, EstimateMeta, EstimateSet, DATA_VERSION};
use vse_core::evalkit::{self, EvalResult, SweepConfig, SWEEP_CSV_HEADER};
use vse_core::lorenz::LorenzConfig;
use vse_core::measurement::Measurement;
use vse_core::nn::Architecture;
use vse_core::particle_filter::PfConfig;
use vse_core::vse::{self, EpochRecord, TrainConfig};
use vse_core::VseError;

use args::{Cli, Command, EvaluateArgs, GenerateArgs, InferArgs, PfArgs, SweepArgs, TrainArgs};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(VseError),
}

impl From<VseError> for CliError {
    fn from(e: VseError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(VseError::Domain(_)) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

macro_rules! merge {
    ($cfg:ident <- $args:ident : $($field:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() {
            $cfg.$field = v.into();
        })*
    };
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| VseError::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required {flag} (flag or config field)")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_resolved<T: Serialize>(out: &Path, cfg: &T) -> CliResult<()> {
    let path = with_suffix(out, ".config.json");
    let mut text = serde_json::to_string_pretty(cfg).map_err(VseError::from)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| VseError::Io { path, source: e })?;
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(VseError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub n: usize,
    pub t: usize,
    pub smnr: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub lorenz: LorenzConfig,
    pub camera: CameraConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            t: 200,
            smnr: 10.0,
            seed: 0,
            out: None,
            lorenz: LorenzConfig::default(),
            camera: CameraConfig::default(),
        }
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<String> {
    let mut cfg: GenerateConfig = load_config(a.config.as_deref())?;
    merge!(cfg <- a: n, t, smnr, seed);
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let out = required(&cfg.out, "--out")?;
    let d = datasets::generate(cfg.n, cfg.t, cfg.smnr, &cfg.lorenz, &cfg.camera, cfg.seed)?;
    datasets::save(&d, out)?;
    write_resolved(out, &cfg)?;
    Ok(format!(
        "wrote {} sequences x {} steps to {}\nmeasured_smnr_db={:.9}\nsigma_w2={}\n",
        d.len(),
        cfg.t,
        out.display(),
        d.meta.measured_smnr_db,
        d.meta.sigma_w2
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub n_limit: Option<usize>,
    pub samples: usize,
    pub hidden: usize,
    pub layers: usize,
    pub head: usize,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            log: None,
            resume: None,
            n_limit: None,
            samples: 10,
            hidden: 80,
            layers: 2,
            head: 128,
            train: TrainConfig::default(),
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let mut cfg: TrainRunConfig = load_config(a.config.as_deref())?;
    merge!(cfg <- a: samples, hidden, layers, head);
    for (dst, src) in [
        (&mut cfg.data, &a.data),
        (&mut cfg.out, &a.out),
        (&mut cfg.log, &a.log),
        (&mut cfg.resume, &a.resume),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    if a.n_limit.is_some() {
        cfg.n_limit = a.n_limit;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.val_fraction {
        t.val_fraction = v;
    }
    if let Some(p) = a.early_stop {
        t.early_stop_patience = (p > 0).then_some(p);
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    let data_path = required(&cfg.data, "--data")?.to_path_buf();
    let out = required(&cfg.out, "--out")?.to_path_buf();
    let log_path = cfg
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&out, ".log.csv"));

    let mut data = datasets::load(&data_path)?;
    if let Some(k) = cfg.n_limit {
        data = data.truncated(k);
    }
    let seqs = data.measurement_slices();
    let arch = Architecture {
        input_dim: data.meta.n,
        state_dim: data.meta.m,
        hidden: cfg.hidden,
        layers: cfg.layers,
        head_width: cfg.head,
    };
    let state = match &cfg.resume {
        Some(p) => {
            let (st, _) = vse::load_checkpoint(p)?;
            if st.model.architecture() != arch || st.model.samples != cfg.samples {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained with a different architecture or sample count",
                    p.display()
                )));
            }
            if st.model.input_dim() != data.meta.n {
                return Err(VseError::DimensionMismatch {
                    what: "checkpoint input vs dataset measurement dimension",
                    expected: st.model.input_dim(),
                    got: data.meta.n,
                }
                .into());
            }
            st
        }
        None => vse::initial_state(
            arch,
            Measurement::Camera(data.meta.camera.clone().into()),
            data.meta.sigma_w2,
            cfg.samples,
            &seqs,
            &cfg.train,
        )?,
    };
    let fresh_log = cfg.resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    if fresh_log {
        writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(io_err(&log_path))?;
    }
    write_resolved(&out, &cfg)?;
    let verbose = a.verbose;
    let mut write_err = None;
    let result = vse::train(&seqs, state, &cfg.train, &mut |r| {
        if verbose {
            eprintln!("{}", r.csv_row());
        }
        if let Err(e) = writeln!(log, "{}", r.csv_row()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    match result {
        Ok(outcome) => {
            vse::save_checkpoint(&out, &outcome.state, &cfg.train)?;
            let last = outcome.log.last().unwrap_or(&outcome.initial);
            Ok(format!(
                "trained epochs {}..={} ; initial val_elbo {:.6} ; final val_elbo {:.6}\nwrote {}\n",
                outcome.log.first().map_or(outcome.initial.epoch, |r| r.epoch),
                last.epoch,
                outcome.initial.val_elbo,
                last.val_elbo,
                out.display()
            ))
        }
        Err(failure) => {
            if let Some(good) = &failure.last_good {
                vse::save_checkpoint(&out, good, &cfg.train)?;
                eprintln!(
                    "saved last good state (epoch {}) to {}",
                    good.epoch,
                    out.display()
                );
            }
            Err(failure.error.into())
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_infer(a: &InferArgs) -> CliResult<String> {
    let mut cfg: InferConfig = load_config(a.config.as_deref())?;
    for (dst, src) in [
        (&mut cfg.model, &a.model),
        (&mut cfg.data, &a.data),
        (&mut cfg.out, &a.out),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    let model_path = required(&cfg.model, "--model")?;
    let data_path = required(&cfg.data, "--data")?;
    let out = required(&cfg.out, "--out")?;
    let model = vse::load_model(model_path)?;
    let data = datasets::load(data_path)?;
    if model.input_dim() != data.meta.n {
        return Err(VseError::DimensionMismatch {
            what: "model input vs dataset measurement dimension",
            expected: model.input_dim(),
            got: data.meta.n,
        }
        .into());
    }
    let (estimates, secs) = evalkit::run_vse(&model, &data.measurement_slices())?;
    save_estimate_set(out, estimates, "vse", &data, data_path, secs)?;
    write_resolved(out, &cfg)?;
    Ok(format!(
        "inference_seconds={secs:.6}\nwrote {}\n",
        out.display()
    ))
}

fn save_estimate_set(
    out: &Path,
    estimates: Vec<Vec<f64>>,
    method: &str,
    data: &datasets::SequenceDataset,
    source: &Path,
    secs: f64,
) -> CliResult<()> {
    let set = EstimateSet {
        estimates,
        meta: EstimateMeta {
            format_version: DATA_VERSION,
            method: method.into(),
            n_seq: data.meta.n_seq,
            t_len: data.meta.t_len,
            m: data.meta.m,
            source: Some(source.display().to_string()),
            inference_seconds: secs,
        },
    };
    datasets::save_estimates(&set, out)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfRunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub pf: PfConfig,
}

pub fn cmd_pf(a: &PfArgs) -> CliResult<String> {
    let mut cfg: PfRunConfig = load_config(a.config.as_deref())?;
    for (dst, src) in [(&mut cfg.data, &a.data), (&mut cfg.out, &a.out)] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    if let Some(p) = a.particles {
        cfg.pf.particles = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data_path = required(&cfg.data, "--data")?;
    let out = required(&cfg.out, "--out")?;
    let data = datasets::load(data_path)?;
    let (estimates, secs) = evalkit::run_pf(
        &data.measurement_slices(),
        &cfg.pf,
        &data.meta.lorenz,
        &data.meta.camera,
        data.meta.sigma_w2,
        cfg.seed,
    )?;
    save_estimate_set(out, estimates, "pf", &data, data_path, secs)?;
    write_resolved(out, &cfg)?;
    Ok(format!(
        "inference_seconds={secs:.6}\nwrote {}\n",
        out.display()
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub data: Option<PathBuf>,
    pub estimates: Option<PathBuf>,
    pub smnr_only: bool,
    pub out: Option<PathBuf>,
}

/// Estimates from an estimate file, or the states of a dataset file.
fn read_estimates(path: &Path) -> CliResult<(Vec<Vec<f64>>, Option<f64>)> {
    match datasets::load_estimates(path) {
        Ok(set) => Ok((set.estimates, Some(set.meta.inference_seconds))),
        Err(VseError::Malformed(_)) => {
            let d = datasets::load(path)?;
            let states = d.states().ok_or_else(|| {
                VseError::Malformed(format!(
                    "{} has no states to use as estimates",
                    path.display()
                ))
            })?;
            Ok((states.to_vec(), None))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<String> {
    let mut cfg: EvaluateConfig = load_config(a.config.as_deref())?;
    for (dst, src) in [
        (&mut cfg.data, &a.data),
        (&mut cfg.estimates, &a.estimates),
        (&mut cfg.out, &a.out),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    cfg.smnr_only |= a.smnr_only;
    let data = datasets::load(required(&cfg.data, "--data")?)?;
    let states = data
        .states()
        .ok_or_else(|| VseError::Malformed("dataset has no ground-truth states".into()))?;
    let clean = evalkit::clean_measurements(states, &data.meta.camera);
    let smnr = evalkit::measured_smnr_db(&clean, data.meta.n, data.meta.sigma_w2)?;
    let mut text = format!("smnr_db={smnr:.9}\n");
    let result = if cfg.smnr_only {
        EvalResult {
            nmse_db: evalkit::NmseValue::Db(f64::NAN),
            per_sequence_nmse_db: Vec::new(),
            smnr_db: Some(smnr),
            inference_seconds: None,
        }
    } else {
        let (est, secs) = read_estimates(required(&cfg.estimates, "--estimates")?)?;
        let mut r = evalkit::nmse_db(states, &est)?;
        r.smnr_db = Some(smnr);
        r.inference_seconds = secs;
        text.push_str(&format!("nmse_db={}\n", r.nmse_db));
        r
    };
    if let Some(out) = &cfg.out {
        let json = if cfg.smnr_only {
            serde_json::json!({ "smnr_db": smnr })
        } else {
            serde_json::to_value(&result).map_err(VseError::from)?
        };
        std::fs::write(out, format!("{json:#}\n")).map_err(io_err(out))?;
        write_resolved(out, &cfg)?;
    }
    Ok(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct SweepRunConfig {
    pub out: Option<PathBuf>,
    /// Checkpoint per SMNR level, keyed like `10` or `-2.5`.
    pub models: BTreeMap<String, PathBuf>,
    pub sweep: SweepConfig,
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<String> {
    let mut cfg: SweepRunConfig = load_config(a.config.as_deref())?;
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let s = &mut cfg.sweep;
    if let Some(v) = &a.smnr {
        s.smnr_db = v.clone();
    }
    if let Some(v) = a.n {
        s.n_seq = v;
    }
    if let Some(v) = a.t {
        s.t_len = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(p) = a.particles {
        s.pf.get_or_insert_with(PfConfig::default).particles = p;
    }
    if a.no_pf {
        s.pf = None;
    }
    if a.no_vse {
        s.vse = false;
    }
    for entry in &a.models {
        let (level, path) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--model expects SMNR=PATH, got `{entry}`")))?;
        let level: f64 = level
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad SMNR level in `{entry}`")))?;
        cfg.models
            .insert(evalkit::smnr_key(level), PathBuf::from(path));
    }
    let out = required(&cfg.out, "--out")?.to_path_buf();
    let mut models = BTreeMap::new();
    if cfg.sweep.vse {
        for level in &cfg.sweep.smnr_db {
            let key = evalkit::smnr_key(*level);
            let path = cfg
                .models
                .get(&key)
                .ok_or_else(|| VseError::MissingForSmnr {
                    smnr_db: *level,
                    what: "no --model given for this level".into(),
                })?;
            let model = vse::load_model(path).map_err(|e| VseError::MissingForSmnr {
                smnr_db: *level,
                what: format!("cannot load {}: {e}", path.display()),
            })?;
            models.insert(key, model);
        }
    }
    let rows = evalkit::sweep(&cfg.sweep, &models)?;
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(&out, &csv).map_err(io_err(&out))?;
    write_resolved(&out, &cfg)?;
    Ok(csv)
}

/// Runs one parsed command line; returns the text for stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    // A second initialization (e.g. in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Pf(a) => cmd_pf(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}
