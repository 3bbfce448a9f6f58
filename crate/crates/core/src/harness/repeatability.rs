use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::quantify::{quantify_log, FitRow, QuantifyOptions};
use super::simulator::{SessionSimulator, SimulationConfig};
use super::{derive_seed, virtual_patient, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{icc_pairs, Agreement};
use crate::motionsim::{MotionModel, TrackerNoise};
use crate::phantom::{render_frame, GridGeometry, Tissue};
use crate::quant::{detect_steady_state, extract_tic, Voi};
use crate::stream::{MessageSource, SessionLog};

pub const UNALIGNED: &str = "unaligned";
pub const ALIGNED: &str = "aligned";
pub const ZERO_MOTION_UNALIGNED: &str = "zero_motion_unaligned";
pub const ZERO_MOTION_ALIGNED: &str = "zero_motion_aligned";
pub const ZERO_NOISE_ALIGNED: &str = "zero_noise_aligned";

/// ICC of one perfusion parameter under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub parameter: String,
    pub condition: String,
    pub icc: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub band: Option<Agreement>,
    pub n_pairs: usize,
    /// Patients dropped because R1 or R2 failed.
    pub excluded: usize,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityReport {
    pub icc: Vec<IccRow>,
    pub fits: Vec<FitRow>,
}

impl RepeatabilityReport {
    pub fn get(&self, parameter: &str, condition: &str) -> Option<&IccRow> {
        self.icc
            .iter()
            .find(|r| r.parameter == parameter && r.condition == condition)
    }

    /// ICC point estimate, `None` when it could not be computed.
    pub fn icc_value(&self, parameter: &str, condition: &str) -> Option<f64> {
        self.get(parameter, condition).and_then(|r| r.icc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Main,
    ZeroMotion,
    ZeroNoise,
}

fn patient_acquisition(cfg: &ExperimentConfig, patient: usize, variant: Variant) -> Result<SimulationConfig> {
    let p = patient as u64;
    let mut acq = cfg.acquisition.clone();
    acq.phantom = virtual_patient(&acq.phantom, &cfg.patient_ranges, derive_seed(cfg.seed, &[10, p]))?;
    acq.seed = derive_seed(cfg.seed, &[11, p]);
    acq.motion.seed = derive_seed(cfg.seed, &[12, p]);
    acq.emit_tracker = false;
    if variant != Variant::Main {
        acq.motion = MotionModel::still(acq.motion.seed);
        acq.tracker = TrackerNoise::none();
    }
    if variant == Variant::ZeroNoise {
        acq.render.noise_sd = 0.0;
    }
    Ok(acq)
}

fn simulate(acq: SimulationConfig, patient: usize) -> Result<SessionLog> {
    let mut sim = SessionSimulator::new(acq)?.with_header_labels(Some(format!("P{:02}", patient + 1)), None);
    let messages = sim.collect()?;
    Ok(SessionLog {
        header: sim.header(),
        messages,
    })
}

fn icc_row(parameter: &str, condition: &str, rows: &[FitRow], patients: usize) -> IccRow {
    let value = |r: &FitRow| match parameter {
        "rBV" => r.rbv,
        _ => r.rbf,
    };
    let mut by_patient: BTreeMap<&str, [Option<f64>; 2]> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.condition == condition && (1..=2).contains(&r.run)) {
        by_patient.entry(&r.patient).or_default()[r.run - 1] = value(r).filter(|v| *v > 0.0);
    }
    let pairs: Vec<(f64, f64)> = by_patient
        .values()
        .filter_map(|[a, b]| Some(((*a)?, (*b)?)))
        .collect();
    let excluded = patients - pairs.len();
    let mut row = IccRow {
        parameter: parameter.to_string(),
        condition: condition.to_string(),
        icc: None,
        ci_lo: None,
        ci_hi: None,
        band: None,
        n_pairs: pairs.len(),
        excluded,
        status: "ok".into(),
    };
    match icc_pairs(&pairs) {
        Ok(r) => {
            row.icc = Some(r.icc);
            row.ci_lo = Some(r.ci95.0);
            row.ci_hi = Some(r.ci95.1);
            row.band = Some(r.band);
        }
        Err(e) => {
            log::warn!("ICC {parameter} {condition}: {e}");
            row.status = format!("failed: {e}");
        }
    }
    row
}

/// Per virtual patient: an infusion session with a steady-state-triggered
/// flash pair under breathing motion, fitted with and without re-alignment,
/// plus zero-motion and zero-noise control sessions.
pub fn run_repeatability(cfg: &ExperimentConfig) -> Result<RepeatabilityReport> {
    cfg.validate()?;
    if cfg.patients < 3 {
        return Err(Error::Config("repeatability needs at least 3 patients".into()));
    }
    let mut fits = Vec::new();
    for p in 0..cfg.patients {
        let patient = format!("P{:02}", p + 1);
        for (variant, conditions) in [
            (Variant::Main, [UNALIGNED, ALIGNED].as_slice()),
            (Variant::ZeroMotion, [ZERO_MOTION_UNALIGNED, ZERO_MOTION_ALIGNED].as_slice()),
            (Variant::ZeroNoise, [ZERO_NOISE_ALIGNED].as_slice()),
        ] {
            let acq = patient_acquisition(cfg, p, variant)?;
            let voi = acq.resolve_voi()?;
            let reference_pose = acq.reference_pose;
            let log = simulate(acq, p)?;
            for &condition in conditions {
                let options = QuantifyOptions {
                    realign: condition.ends_with(ALIGNED) && !condition.ends_with(UNALIGNED),
                    reference_pose: Some(reference_pose),
                    fit_window: cfg.fit_window,
                    ..QuantifyOptions::default()
                };
                let q = quantify_log(&log, &voi, &options)?;
                if q.flash_times.len() < 2 {
                    log::warn!("{patient}: only {} flash(es) in the session", q.flash_times.len());
                }
                fits.extend(q.rows(&patient, "S1", condition));
            }
        }
        log::info!("{patient} done");
    }
    let mut icc = Vec::new();
    for condition in [UNALIGNED, ALIGNED, ZERO_MOTION_UNALIGNED, ZERO_MOTION_ALIGNED, ZERO_NOISE_ALIGNED] {
        for parameter in ["rBV", "rBF"] {
            icc.push(icc_row(parameter, condition, &fits, cfg.patients));
        }
    }
    Ok(RepeatabilityReport { icc, fits })
}

/// Time to steady state of each tissue for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateRow {
    pub patient: String,
    pub tissue: Tissue,
    pub infusion_tau: f64,
    pub reached: bool,
    pub time_to_steady: Option<f64>,
    pub n_voxels: usize,
}

/// Tissue label of every voxel of `grid` placed at `pose`.
fn tissue_masks(
    phantom: &crate::phantom::Phantom,
    grid: &GridGeometry,
    pose: &crate::geometry::RigidTransform,
) -> BTreeMap<Tissue, Vec<bool>> {
    let mut masks: BTreeMap<Tissue, Vec<bool>> = BTreeMap::new();
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let t = phantom.tissue_at_world(&pose.transform_point(&grid.position(i, j, k)));
                masks.entry(t).or_insert_with(|| vec![false; grid.len()])[grid.index(i, j, k)] = true;
            }
        }
    }
    masks
}

/// Infusion without flashes or motion; steady state is detected on each
/// tissue's TIC.
pub fn run_steady_state_study(cfg: &ExperimentConfig) -> Result<Vec<SteadyStateRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for p in 0..cfg.patients {
        let acq = patient_acquisition(cfg, p, Variant::ZeroMotion)?;
        let (phantom, kinetics) = acq.phantom.build()?;
        let grid = acq.render.geometry;
        let n_frames = (acq.duration * acq.frame_rate).round() as u64;
        let frames = (0..n_frames)
            .map(|f| {
                let t = f as f64 / acq.frame_rate;
                render_frame(
                    &phantom,
                    &kinetics,
                    t,
                    &acq.reference_pose,
                    &acq.render,
                    &[],
                    derive_seed(acq.seed, &[1, f]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for (tissue, mask) in tissue_masks(&phantom, &grid, &acq.reference_pose) {
            if tissue == Tissue::Background {
                continue;
            }
            let n_voxels = mask.iter().filter(|&&m| m).count();
            let voi = Voi::Mask { dims: grid.dims, mask };
            let tic = extract_tic(&frames, &voi, acq.render.dynamic_range_db)?;
            let report = detect_steady_state(&tic, acq.auto_flash.as_ref().map_or(20.0, |a| a.window), acq
                .auto_flash
                .as_ref()
                .map_or(crate::quant::DEFAULT_SLOPE_TOLERANCE, |a| a.slope_tolerance))?;
            rows.push(SteadyStateRow {
                patient: format!("P{:02}", p + 1),
                tissue,
                infusion_tau: kinetics.get(tissue).map_or(f64::NAN, |k| k.infusion_tau),
                reached: report.reached,
                time_to_steady: report.time_to_steady,
                n_voxels,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icc_rows_pair_by_patient_and_exclude_failures() {
        let row = |patient: &str, run, rbv: Option<f64>| FitRow {
            patient: patient.into(),
            session: "S1".into(),
            run,
            rbv,
            rbf: rbv,
            beta: None,
            r2: None,
            status: "ok".into(),
            condition: ALIGNED.into(),
            flash_time: 0.0,
            n_samples: 0,
            time_to_steady: None,
        };
        let rows = vec![
            row("a", 1, Some(1.0)),
            row("a", 2, Some(1.0)),
            row("b", 1, Some(2.0)),
            row("b", 2, Some(2.0)),
            row("c", 1, Some(3.0)),
            row("c", 2, Some(3.0)),
            row("d", 1, Some(4.0)),
            row("d", 2, None),
        ];
        let r = icc_row("rBV", ALIGNED, &rows, 4);
        assert_eq!(r.n_pairs, 3);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.icc, Some(1.0));
        assert_eq!(icc_row("rBV", UNALIGNED, &rows, 4).status.starts_with("failed"), true);
    }

    #[test]
    fn steady_state_vessel_first() {
        let cfg = ExperimentConfig {
            patients: 1,
            acquisition: SimulationConfig {
                duration: 240.0,
                ..SimulationConfig::repeatability_default()
            },
            ..ExperimentConfig::default()
        };
        let rows = run_steady_state_study(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        let tts = |t| rows.iter().find(|r| r.tissue == t).unwrap().time_to_steady.unwrap();
        assert!(tts(Tissue::Vessel) < tts(Tissue::Lesion));
    }
}
