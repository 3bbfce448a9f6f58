//! Experiment orchestration: live session simulation, batch quantification,
//! the operator-performance study and the repeatability study.

mod operator;
mod quantify;
mod repeatability;
mod simulator;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{PhantomSpec, Primitive, Tissue, TissueKinetics};

pub use operator::{run_operator_study, OperatorFeatureRow, OperatorRunRow, OperatorStudyReport};
pub use quantify::{quantify_batch, quantify_log, FitRow, QuantifyOptions, SessionQuantification};
pub use repeatability::{
    run_repeatability, run_steady_state_study, IccRow, RepeatabilityReport, SteadyStateRow,
};
pub use simulator::{AutoFlash, SessionSimulator, SimulationConfig};

/// Mixes `parts` into `base` (SplitMix64 finaliser) so every run gets an
/// independent, scheduling-free seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, p| {
        mix(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    OperatorStudy,
    SteadyState,
    #[default]
    Repeatability,
}

/// Sampling ranges `[lo, hi]` for virtual patients. Tissue time constants
/// are stand-ins chosen so the vessel fills first and lesions vary widely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientRanges {
    pub lesion_tau: [f64; 2],
    pub lesion_level: [f64; 2],
    pub lesion_beta: [f64; 2],
    pub lesion_radius_mm: [f64; 2],
    pub lesion_shift_mm: f64,
    pub parenchyma_tau: [f64; 2],
    pub parenchyma_level: [f64; 2],
    pub parenchyma_beta: [f64; 2],
    pub vessel_tau: [f64; 2],
    pub vessel_level: [f64; 2],
    pub vessel_beta: [f64; 2],
}

impl Default for PatientRanges {
    fn default() -> Self {
        Self {
            lesion_tau: [40.0, 120.0],
            lesion_level: [0.3, 0.7],
            lesion_beta: [0.08, 0.3],
            lesion_radius_mm: [6.5, 9.0],
            lesion_shift_mm: 3.0,
            parenchyma_tau: [50.0, 70.0],
            parenchyma_level: [0.15, 0.3],
            parenchyma_beta: [0.15, 0.4],
            vessel_tau: [15.0, 25.0],
            vessel_level: [0.8, 0.95],
            vessel_beta: [0.8, 1.5],
        }
    }
}

impl PatientRanges {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.lesion_tau,
            self.lesion_level,
            self.lesion_beta,
            self.lesion_radius_mm,
            self.parenchyma_tau,
            self.parenchyma_level,
            self.parenchyma_beta,
            self.vessel_tau,
            self.vessel_level,
            self.vessel_beta,
        ];
        if ranges.iter().any(|[lo, hi]| !(*lo > 0.0 && hi >= lo && hi.is_finite())) {
            return Err(Error::Config("patient ranges must satisfy 0 < lo <= hi".into()));
        }
        if !(self.lesion_shift_mm >= 0.0) {
            return Err(Error::Config("lesion_shift_mm must be >= 0".into()));
        }
        Ok(())
    }
}

/// A virtual patient: `base` with lesion geometry and tissue kinetics drawn
/// from `ranges`.
pub fn virtual_patient(base: &PhantomSpec, ranges: &PatientRanges, seed: u64) -> Result<PhantomSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut spec = base.clone();
    let mut kin = |level, tau, beta| TissueKinetics::new(draw(level), draw(tau), draw(beta));
    let lesion = kin(ranges.lesion_level, ranges.lesion_tau, ranges.lesion_beta);
    let parenchyma = kin(ranges.parenchyma_level, ranges.parenchyma_tau, ranges.parenchyma_beta);
    let vessel = kin(ranges.vessel_level, ranges.vessel_tau, ranges.vessel_beta);
    spec.kinetics.tissues.insert(Tissue::Lesion, lesion);
    spec.kinetics.tissues.insert(Tissue::Parenchyma, parenchyma);
    spec.kinetics.tissues.insert(Tissue::Vessel, vessel);

    let radius = draw(ranges.lesion_radius_mm);
    let squash = [1.0, draw([0.9, 1.0]), draw([0.85, 1.0])];
    let shift = [0, 1, 2].map(|_| draw([-1.0, 1.0]) * ranges.lesion_shift_mm);
    let lesion_prim = spec.primitives.iter_mut().rev().find_map(|p| match p {
        Primitive::Ellipsoid {
            tissue: Tissue::Lesion,
            center,
            radii,
        } => Some((center, radii)),
        _ => None,
    });
    let (center, radii) = lesion_prim.ok_or_else(|| Error::Config("base phantom has no lesion".into()))?;
    for a in 0..3 {
        center[a] += shift[a];
        radii[a] = (radius * squash[a]).max(crate::phantom::MIN_LESION_DIAMETER_MM / 2.0);
    }
    Ok(spec)
}

/// Top-level experiment description (JSON or TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    pub seed: u64,
    /// Virtual patients (repeatability, steady-state studies).
    pub patients: usize,
    /// Simulated operators (operator study).
    pub operators: usize,
    /// Runs per operator and feedback method.
    pub runs_per_operator: usize,
    /// Holding trial length, s.
    pub hold_duration: f64,
    /// Repositioning trial length, s.
    pub reposition_duration: f64,
    pub settle_threshold_mm: f64,
    pub settle_hold_s: f64,
    /// Write every n-th tracker sample of each displacement trace.
    pub trace_stride: usize,
    pub patient_ranges: PatientRanges,
    /// Acquisition template for every virtual patient.
    pub acquisition: SimulationConfig,
    /// Replenishment fit window after each flash, s.
    pub fit_window: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            study: StudyKind::default(),
            seed: 1,
            patients: 8,
            operators: 5,
            runs_per_operator: 4,
            hold_duration: 240.0,
            reposition_duration: 90.0,
            settle_threshold_mm: crate::metrics::DEFAULT_SETTLE_THRESHOLD_MM,
            settle_hold_s: crate::metrics::DEFAULT_SETTLE_HOLD_S,
            trace_stride: 6,
            patient_ranges: PatientRanges::default(),
            acquisition: SimulationConfig::repeatability_default(),
            fit_window: crate::motionsim::FLASH_SPACING_S,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patients < 1 || self.operators < 1 || self.runs_per_operator < 1 || self.trace_stride < 1 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        if !(self.hold_duration > 0.0 && self.reposition_duration > self.settle_hold_s) {
            return Err(Error::Config("trial durations must exceed the settle hold".into()));
        }
        if !(self.settle_threshold_mm > 0.0 && self.settle_hold_s >= 0.0) {
            return Err(Error::Config("settle threshold must be > 0".into()));
        }
        if !(self.fit_window > 0.0) {
            return Err(Error::Config("fit_window must be > 0".into()));
        }
        self.patient_ranges.validate()?;
        self.acquisition.validate()
    }
}

/// Serialises `rows` as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `rows` as CSV to `path`, creating parent directories.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_csv(rows)?)?;
    Ok(())
}
