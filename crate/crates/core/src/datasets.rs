//! Lorenz-plus-camera datasets and the `VSEDATA` container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "VSEDATA\0"
//! version  u32
//! N T n m  u64 × 4
//! flags    u32      bit 0: states present, bit 1: estimate file
//! payload  f64 × N·T·n   measurements (or estimates, with n = m)
//!          f64 × N·T·m   states, when bit 0 is set
//! crc      u64      CRC-64/XZ over every preceding byte
//! ```
//!
//! Generation settings live in a JSON sidecar at `<path>.json`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crc::{Crc, CRC_64_XZ};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraConfig};
use crate::error::{Result, VseError};
use crate::lorenz::{self, LorenzConfig};
use crate::mathcore::RngStream;

pub const DATA_MAGIC: &[u8; 8] = b"VSEDATA\0";
pub const DATA_VERSION: u32 = 1;
const FLAG_STATES: u32 = 1;
const FLAG_ESTIMATES: u32 = 2;
const HEADER_LEN: usize = 8 + 4 + 4 * 8 + 4;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Attempts per sequence before a divergent simulation is reported.
pub const MAX_REGENERATIONS: u32 = 64;

mod domain {
    pub const SIMULATE: u8 = 16;
    pub const NOISE: u8 = 17;
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n_seq: usize,
    pub t_len: usize,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub target_smnr_db: f64,
    pub measured_smnr_db: f64,
    pub sigma_w2: f64,
    pub lorenz: LorenzConfig,
    pub camera: CameraConfig,
    /// `(sequence, attempts)` for sequences whose first simulation diverged.
    pub regenerated: Vec<(usize, u32)>,
}

#[derive(Debug)]
pub struct SequenceDataset {
    /// `N` sequences of `T × n` row-major measurements.
    measurements: Vec<Vec<f64>>,
    states: Option<Vec<Vec<f64>>>,
    pub meta: DatasetMeta,
    state_reads: AtomicU64,
}

impl Clone for SequenceDataset {
    fn clone(&self) -> Self {
        Self {
            measurements: self.measurements.clone(),
            states: self.states.clone(),
            meta: self.meta.clone(),
            state_reads: AtomicU64::new(0),
        }
    }
}

impl PartialEq for SequenceDataset {
    fn eq(&self, other: &Self) -> bool {
        self.measurements == other.measurements
            && self.states == other.states
            && self.meta == other.meta
    }
}

impl SequenceDataset {
    pub fn new(
        measurements: Vec<Vec<f64>>,
        states: Option<Vec<Vec<f64>>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let d = Self {
            measurements,
            states,
            meta,
            state_reads: AtomicU64::new(0),
        };
        d.check_shapes()?;
        Ok(d)
    }

    fn check_shapes(&self) -> Result<()> {
        let m = &self.meta;
        if self.measurements.len() != m.n_seq {
            return Err(VseError::DimensionMismatch {
                what: "sequence count",
                expected: m.n_seq,
                got: self.measurements.len(),
            });
        }
        for seq in &self.measurements {
            if seq.len() != m.t_len * m.n {
                return Err(VseError::DimensionMismatch {
                    what: "measurement sequence length",
                    expected: m.t_len * m.n,
                    got: seq.len(),
                });
            }
        }
        if let Some(states) = &self.states {
            if states.len() != m.n_seq || states.iter().any(|s| s.len() != m.t_len * m.m) {
                return Err(VseError::DimensionMismatch {
                    what: "state section shape",
                    expected: m.n_seq * m.t_len * m.m,
                    got: states.iter().map(Vec::len).sum(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn measurements(&self) -> &[Vec<f64>] {
        &self.measurements
    }

    /// Borrowed measurement slices, the only view training needs.
    pub fn measurement_slices(&self) -> Vec<&[f64]> {
        self.measurements.iter().map(Vec::as_slice).collect()
    }

    pub fn has_states(&self) -> bool {
        self.states.is_some()
    }

    /// Ground-truth states for evaluation. Every call is counted.
    pub fn states(&self) -> Option<&[Vec<f64>]> {
        self.state_reads.fetch_add(1, Ordering::Relaxed);
        self.states.as_deref()
    }

    /// How often [`Self::states`] has been called on this value.
    pub fn state_reads(&self) -> u64 {
        self.state_reads.load(Ordering::Relaxed)
    }

    /// First `count` sequences, meta adjusted.
    pub fn truncated(&self, count: usize) -> Self {
        let count = count.min(self.len());
        let mut meta = self.meta.clone();
        meta.n_seq = count;
        meta.regenerated.retain(|(i, _)| *i < count);
        Self {
            measurements: self.measurements[..count].to_vec(),
            states: self.states.as_ref().map(|s| s[..count].to_vec()),
            meta,
            state_reads: AtomicU64::new(0),
        }
    }
}

fn simulate_sequence(
    lcfg: &LorenzConfig,
    t_len: usize,
    seed: u64,
    i: usize,
) -> Result<(lorenz::StateTrajectory, u32)> {
    for attempt in 0..MAX_REGENERATIONS {
        let mut s = RngStream::keyed(seed, domain::SIMULATE, attempt, i as u32);
        match lorenz::simulate(lcfg, t_len, &mut s) {
            Ok(tr) => return Ok((tr, attempt)),
            Err(VseError::SimulationDiverged { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(VseError::SimulationDiverged { step: t_len })
}

/// Simulates `n_seq` trajectories, renders them, calibrates the noise to
/// `target_smnr_db` on this set and adds it.
pub fn generate(
    n_seq: usize,
    t_len: usize,
    target_smnr_db: f64,
    lcfg: &LorenzConfig,
    ccfg: &CameraConfig,
    seed: u64,
) -> Result<SequenceDataset> {
    if n_seq == 0 || t_len == 0 {
        return Err(VseError::Domain(
            "dataset needs n_seq >= 1 and T >= 1".into(),
        ));
    }
    if n_seq > u32::MAX as usize {
        return Err(VseError::Domain("too many sequences".into()));
    }
    if !target_smnr_db.is_finite() {
        return Err(VseError::Domain(format!(
            "target SMNR must be finite, got {target_smnr_db}"
        )));
    }
    lcfg.validate()?;
    ccfg.validate()?;
    let sims: Vec<(lorenz::StateTrajectory, u32)> = (0..n_seq)
        .into_par_iter()
        .map(|i| simulate_sequence(lcfg, t_len, seed, i))
        .collect::<Result<_>>()?;
    let cam = camera::Camera::from(ccfg.clone());
    let n = ccfg.pixel_count();
    let clean: Vec<Vec<f64>> = sims
        .par_iter()
        .map(|(tr, _)| {
            let mut out = vec![0.0; t_len * n];
            for (s, row) in tr.states.iter().zip(out.chunks_exact_mut(n)) {
                camera::measure_into(cam.config(), cam.grid(), *s, row);
            }
            out
        })
        .collect();
    let sigma_w2 = camera::calibrate_sigma_w(&clean, n, target_smnr_db)?;
    let measured = camera::smnr_db(&clean, n, sigma_w2)?;
    let measurements: Vec<Vec<f64>> = clean
        .into_par_iter()
        .enumerate()
        .map(|(i, mut y)| {
            camera::add_noise(
                &mut y,
                sigma_w2,
                &mut RngStream::keyed(seed, domain::NOISE, 0, i as u32),
            );
            y
        })
        .collect();
    let regenerated = sims
        .iter()
        .enumerate()
        .filter(|(_, (_, a))| *a > 0)
        .map(|(i, (_, a))| (i, *a))
        .collect();
    let states = sims.into_iter().map(|(tr, _)| tr.flatten()).collect();
    SequenceDataset::new(
        measurements,
        Some(states),
        DatasetMeta {
            format_version: DATA_VERSION,
            n_seq,
            t_len,
            n,
            m: 3,
            seed,
            target_smnr_db,
            measured_smnr_db: measured,
            sigma_w2,
            lorenz: lcfg.clone(),
            camera: ccfg.clone(),
            regenerated,
        },
    )
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Header {
    n_seq: usize,
    t_len: usize,
    n: usize,
    m: usize,
    flags: u32,
}

fn encode(h: &Header, sections: &[&[Vec<f64>]]) -> Vec<u8> {
    let payload: usize = sections.iter().flat_map(|s| s.iter()).map(Vec::len).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * payload + 8);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    for v in [h.n_seq, h.t_len, h.n, h.m] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&h.flags.to_le_bytes());
    for section in sections {
        for seq in section.iter() {
            for v in seq {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Validates the container and splits the payload into per-sequence blocks.
fn decode(bytes: &[u8]) -> Result<(Header, Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
    if bytes.len() < 8 || &bytes[..8] != DATA_MAGIC {
        return Err(VseError::BadMagic {
            expected: "VSEDATA",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(VseError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATA_VERSION {
        return Err(VseError::VersionMismatch {
            found: version,
            supported: DATA_VERSION,
        });
    }
    let dims: Vec<usize> = (0..4)
        .map(|k| read_u64(bytes, 12 + 8 * k) as usize)
        .collect();
    let flags = u32::from_le_bytes(bytes[44..48].try_into().unwrap());
    let h = Header {
        n_seq: dims[0],
        t_len: dims[1],
        n: dims[2],
        m: dims[3],
        flags,
    };
    let per_meas = h.t_len.checked_mul(h.n);
    let per_state = if flags & FLAG_STATES != 0 {
        h.t_len.checked_mul(h.m)
    } else {
        Some(0)
    };
    let expected = per_meas
        .zip(per_state)
        .and_then(|(a, b)| a.checked_add(b))
        .and_then(|s| s.checked_mul(h.n_seq))
        .and_then(|s| s.checked_mul(8))
        .and_then(|s| s.checked_add(HEADER_LEN + 8))
        .ok_or_else(|| VseError::Malformed("header dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(VseError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(VseError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }
    let body = &bytes[..expected - 8];
    let stored = read_u64(bytes, expected - 8);
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(VseError::Checksum { stored, computed });
    }
    let values: Vec<f64> = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (meas, rest) = values.split_at(h.n_seq * per_meas.unwrap());
    let split = |flat: &[f64], len: usize| -> Vec<Vec<f64>> {
        if len == 0 {
            vec![Vec::new(); h.n_seq]
        } else {
            flat.chunks_exact(len).map(<[f64]>::to_vec).collect()
        }
    };
    let measurements = split(meas, per_meas.unwrap());
    let states = (flags & FLAG_STATES != 0).then(|| split(rest, per_state.unwrap()));
    Ok((h, measurements, states))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| VseError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| VseError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save(dataset: &SequenceDataset, path: &Path) -> Result<()> {
    let m = &dataset.meta;
    let h = Header {
        n_seq: m.n_seq,
        t_len: m.t_len,
        n: m.n,
        m: m.m,
        flags: if dataset.states.is_some() {
            FLAG_STATES
        } else {
            0
        },
    };
    let mut sections: Vec<&[Vec<f64>]> = vec![&dataset.measurements];
    if let Some(s) = &dataset.states {
        sections.push(s);
    }
    std::fs::write(path, encode(&h, &sections)).map_err(|e| VseError::io(path, e))?;
    write_json(&sidecar_path(path), m)
}

pub fn load(path: &Path) -> Result<SequenceDataset> {
    let bytes = std::fs::read(path).map_err(|e| VseError::io(path, e))?;
    let (h, measurements, states) = decode(&bytes)?;
    if h.flags & FLAG_ESTIMATES != 0 {
        return Err(VseError::Malformed(format!(
            "{} holds estimates, not a measurement dataset",
            path.display()
        )));
    }
    let meta: DatasetMeta = read_json(&sidecar_path(path))?;
    if (meta.n_seq, meta.t_len, meta.n, meta.m) != (h.n_seq, h.t_len, h.n, h.m) {
        return Err(VseError::Malformed(
            "sidecar dimensions disagree with the data file".into(),
        ));
    }
    SequenceDataset::new(measurements, states, meta)
}

/// State estimates from one method for every sequence of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    pub format_version: u32,
    pub method: String,
    pub n_seq: usize,
    pub t_len: usize,
    pub m: usize,
    /// Dataset the estimates were computed from.
    pub source: Option<String>,
    pub inference_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateSet {
    /// `N` sequences of `T × m` estimates.
    pub estimates: Vec<Vec<f64>>,
    pub meta: EstimateMeta,
}

pub fn save_estimates(set: &EstimateSet, path: &Path) -> Result<()> {
    let m = &set.meta;
    if set.estimates.len() != m.n_seq || set.estimates.iter().any(|e| e.len() != m.t_len * m.m) {
        return Err(VseError::Malformed(
            "estimate shapes disagree with their meta".into(),
        ));
    }
    let h = Header {
        n_seq: m.n_seq,
        t_len: m.t_len,
        n: m.m,
        m: m.m,
        flags: FLAG_ESTIMATES,
    };
    std::fs::write(path, encode(&h, &[&set.estimates])).map_err(|e| VseError::io(path, e))?;
    write_json(&sidecar_path(path), m)
}

pub fn load_estimates(path: &Path) -> Result<EstimateSet> {
    let bytes = std::fs::read(path).map_err(|e| VseError::io(path, e))?;
    let (h, estimates, _) = decode(&bytes)?;
    if h.flags & FLAG_ESTIMATES == 0 {
        return Err(VseError::Malformed(format!(
            "{} is not an estimate file",
            path.display()
        )));
    }
    let meta: EstimateMeta = read_json(&sidecar_path(path))?;
    if (meta.n_seq, meta.t_len, meta.m) != (h.n_seq, h.t_len, h.m) {
        return Err(VseError::Malformed(
            "sidecar dimensions disagree with the estimate file".into(),
        ));
    }
    Ok(EstimateSet { estimates, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SequenceDataset {
        generate(
            4,
            30,
            10.0,
            &LorenzConfig::default(),
            &CameraConfig::default(),
            7,
        )
        .unwrap()
    }

    #[test]
    fn generation_is_calibrated_and_deterministic() {
        let d = small();
        assert!((d.meta.measured_smnr_db - 10.0).abs() < 1e-9);
        assert_eq!(d, small());
        assert_eq!(d.len(), 4);
        assert_eq!(d.measurements()[0].len(), 30 * 64);
        assert_eq!(d.states().unwrap()[0].len(), 30 * 3);
        let other = generate(
            4,
            30,
            10.0,
            &LorenzConfig::default(),
            &CameraConfig::default(),
            8,
        )
        .unwrap();
        assert_ne!(d.measurements(), other.measurements());
    }

    #[test]
    fn sequences_use_distinct_streams() {
        let d = small();
        let s = d.states().unwrap();
        assert_ne!(s[0], s[1]);
    }

    #[test]
    fn state_reads_are_counted() {
        let d = small();
        assert_eq!(d.state_reads(), 0);
        let _ = d.measurement_slices();
        let _ = d.measurements();
        assert_eq!(d.state_reads(), 0);
        let _ = d.states();
        assert_eq!(d.state_reads(), 1);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.vsedata");
        let d = small();
        save(&d, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back, d);
        let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.measurements()), bits(d.measurements()));
        let p2 = dir.path().join("e.vsedata");
        save(&small(), &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            std::fs::read(sidecar_path(&p)).unwrap(),
            std::fs::read(sidecar_path(&p2)).unwrap()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.vsedata");
        save(&small(), &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut flipped = good.clone();
        flipped[HEADER_LEN + 1000] ^= 0x10;
        std::fs::write(&p, &flipped).unwrap();
        assert!(matches!(load(&p), Err(VseError::Checksum { .. })));

        std::fs::write(&p, &good[..good.len() - 9]).unwrap();
        assert!(matches!(load(&p), Err(VseError::Truncated { .. })));

        let mut v2 = good.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&p, &v2).unwrap();
        assert!(matches!(
            load(&p),
            Err(VseError::VersionMismatch { found: 2, .. })
        ));

        let mut magic = good.clone();
        magic[0] = b'X';
        std::fs::write(&p, &magic).unwrap();
        assert!(matches!(load(&p), Err(VseError::BadMagic { .. })));
    }

    #[test]
    fn estimates_round_trip_and_are_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("est.vsedata");
        let set = EstimateSet {
            estimates: vec![vec![1.5; 12], vec![-2.0; 12]],
            meta: EstimateMeta {
                format_version: DATA_VERSION,
                method: "pf".into(),
                n_seq: 2,
                t_len: 4,
                m: 3,
                source: Some("d.vsedata".into()),
                inference_seconds: 0.5,
            },
        };
        save_estimates(&set, &p).unwrap();
        assert_eq!(load_estimates(&p).unwrap(), set);
        assert!(matches!(load(&p), Err(VseError::Malformed(_))));
    }

    #[test]
    fn truncation_keeps_meta_consistent() {
        let d = small().truncated(2);
        assert_eq!(d.len(), 2);
        assert_eq!(d.meta.n_seq, 2);
        assert!(d.check_shapes().is_ok());
    }
}
