use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimulationConfig;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::phantom::{VolumeFrame, DEFAULT_DYNAMIC_RANGE_DB};
use crate::quant::{
    detect_steady_state, extract_tic, fit_replenishment, linearize_table, FitOptions, FitResult,
    SteadyStateReport, TimeIntensityCurve, Voi, DEFAULT_SLOPE_TOLERANCE, DEFAULT_STEADY_WINDOW_S,
};
use crate::realign::{interpolated_pose, realign_indices, PoseGapPolicy};
use crate::stream::{read_session, ControlEvent, MessageBody, SessionLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantifyOptions {
    /// Taken from the session config when absent, else 60 dB.
    pub dynamic_range_db: Option<f64>,
    pub realign: bool,
    /// Pose the sequence is resampled to; the first posed frame when absent.
    pub reference_pose: Option<RigidTransform>,
    pub pose_gap: PoseGapPolicy,
    /// Frames in `(t_flash, t_flash + fit_window)` feed each fit.
    pub fit_window: f64,
    pub fit: FitOptions,
    pub steady_window: f64,
    pub slope_tolerance: f64,
}

impl Default for QuantifyOptions {
    fn default() -> Self {
        Self {
            dynamic_range_db: None,
            realign: false,
            reference_pose: None,
            pose_gap: PoseGapPolicy::default(),
            fit_window: crate::motionsim::FLASH_SPACING_S,
            fit: FitOptions::default(),
            steady_window: DEFAULT_STEADY_WINDOW_S,
            slope_tolerance: DEFAULT_SLOPE_TOLERANCE,
        }
    }
}

/// One replenishment fit per flash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub patient: String,
    pub session: String,
    pub run: usize,
    #[serde(rename = "rBV")]
    pub rbv: Option<f64>,
    #[serde(rename = "rBF")]
    pub rbf: Option<f64>,
    pub beta: Option<f64>,
    pub r2: Option<f64>,
    pub status: String,
    pub condition: String,
    pub flash_time: f64,
    pub n_samples: usize,
    pub time_to_steady: Option<f64>,
}

#[derive(Debug)]
pub struct SessionQuantification {
    /// Raw (unaligned) whole-session TIC.
    pub tic: TimeIntensityCurve,
    pub steady_state: Option<SteadyStateReport>,
    pub flash_times: Vec<f64>,
    pub fits: Vec<(f64, Result<FitResult>)>,
}

impl SessionQuantification {
    pub fn rows(&self, patient: &str, session: &str, condition: &str) -> Vec<FitRow> {
        let tts = self.steady_state.and_then(|s| s.time_to_steady);
        self.fits
            .iter()
            .enumerate()
            .map(|(run, (t, fit))| {
                let ok = fit.as_ref().ok();
                FitRow {
                    patient: patient.to_string(),
                    session: session.to_string(),
                    run: run + 1,
                    rbv: ok.map(|f| f.rbv),
                    rbf: ok.map(|f| f.rbf),
                    beta: ok.map(|f| f.beta),
                    r2: ok.map(|f| f.r_squared),
                    status: match fit {
                        Ok(f) if f.at_bound => "at_bound".into(),
                        Ok(f) if f.degenerate => "degenerate".into(),
                        Ok(_) => "ok".into(),
                        Err(e) => format!("failed: {e}"),
                    },
                    condition: condition.to_string(),
                    flash_time: *t,
                    n_samples: ok.map_or(0, |f| f.n_samples),
                    time_to_steady: tts,
                }
            })
            .collect()
    }
}

fn session_config(log: &SessionLog) -> Option<SimulationConfig> {
    serde_json::from_value(log.header.config.clone()).ok()
}

/// Flash times announced by control messages, in order.
pub fn flash_times(log: &SessionLog) -> Vec<f64> {
    log.messages
        .iter()
        .filter_map(|m| match &m.body {
            MessageBody::Control(c) if ControlEvent::from_payload(c) == Some(ControlEvent::Flash) => {
                Some(m.timestamp_s())
            }
            _ => None,
        })
        .collect()
}

/// Steady-state detection on the raw TIC, then one replenishment fit per
/// flash, optionally after re-alignment of the frames each fit uses.
pub fn quantify_log(log: &SessionLog, voi: &Voi, options: &QuantifyOptions) -> Result<SessionQuantification> {
    if !(options.fit_window > 0.0) {
        return Err(Error::Config("fit_window must be > 0".into()));
    }
    let range = options
        .dynamic_range_db
        .or_else(|| session_config(log).map(|c| c.render.dynamic_range_db))
        .unwrap_or(DEFAULT_DYNAMIC_RANGE_DB);
    let frames: Vec<VolumeFrame> = log.frames().collect();
    let tic = extract_tic(&frames, voi, range)?;
    let steady_state = match detect_steady_state(&tic, options.steady_window, options.slope_tolerance) {
        Ok(r) => Some(r),
        Err(Error::InsufficientData(msg)) => {
            log::warn!("steady state not assessed: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let flashes = flash_times(log);

    let reference = match (options.realign, options.reference_pose) {
        (false, _) => None,
        (true, Some(p)) => Some(p),
        (true, None) => Some(
            frames
                .iter()
                .find_map(|f| f.pose)
                .ok_or_else(|| Error::InvalidInput("no frame carries a pose".into()))?,
        ),
    };

    let mut fits = Vec::with_capacity(flashes.len());
    for (k, &tf) in flashes.iter().enumerate() {
        let end = flashes.get(k + 1).map_or(tf + options.fit_window, |&n| n.min(tf + options.fit_window));
        let in_window: Vec<usize> = (0..frames.len())
            .filter(|&i| frames[i].timestamp > tf && frames[i].timestamp < end)
            .collect();
        let fit_opts = FitOptions {
            t0: Some(tf),
            ..options.fit
        };
        let fit = window_tic(&frames, &in_window, reference.as_ref(), options.pose_gap, voi, range)
            .and_then(|seg| fit_replenishment(&seg, &fit_opts));
        if let Err(e) = &fit {
            log::warn!("fit after flash at {tf:.2} s failed: {e}");
        }
        fits.push((tf, fit));
    }
    Ok(SessionQuantification {
        tic,
        steady_state,
        flash_times: flashes,
        fits,
    })
}

fn window_tic(
    frames: &[VolumeFrame],
    indices: &[usize],
    reference: Option<&RigidTransform>,
    policy: PoseGapPolicy,
    voi: &Voi,
    range: f64,
) -> Result<TimeIntensityCurve> {
    if indices.is_empty() {
        return Err(Error::InsufficientData("no frames in the fit window".into()));
    }
    let Some(ref_pose) = reference else {
        let sel: Vec<VolumeFrame> = indices.iter().map(|&i| frames[i].clone()).collect();
        return extract_tic(&sel, voi, range);
    };
    // only the VOI voxels of the reference grid are resampled
    let grid = frames[0].geometry();
    let voi_idx = voi.indices(&grid)?;
    let table = linearize_table(range);
    let mut tic = TimeIntensityCurve::default();
    for &i in indices {
        let pose = match (frames[i].pose, policy) {
            (Some(p), _) => Some(p),
            (None, PoseGapPolicy::Interpolate) => interpolated_pose(frames, i),
            (None, PoseGapPolicy::Exclude) => None,
        };
        let Some(pose) = pose else { continue };
        let src = VolumeFrame {
            pose: Some(pose),
            ..frames[i].clone()
        };
        let codes = realign_indices(&src, ref_pose, &grid, &voi_idx)?;
        let (sum, n) = codes
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), &c| (s + table[c as usize], n + 1));
        if n > 0 {
            tic.push(src.timestamp, sum / n as f64, n)?;
        }
    }
    if tic.is_empty() {
        return Err(Error::InsufficientData("no posed frames in the fit window".into()));
    }
    Ok(tic)
}

fn quantify_file(path: &Path, voi: Option<&Voi>, options: &QuantifyOptions) -> Result<(SessionLog, SessionQuantification)> {
    let log = read_session(path)?;
    let voi = match voi {
        Some(v) => v.clone(),
        None => session_config(&log)
            .ok_or_else(|| Error::Config("no VOI given and none in the session".into()))?
            .resolve_voi()?,
    };
    let q = quantify_log(&log, &voi, options)?;
    Ok((log, q))
}

/// Quantifies recorded sessions; a file that cannot be processed yields a
/// single `failed` row. Without `voi`, each session's own config supplies it.
pub fn quantify_batch(
    paths: &[impl AsRef<Path>],
    voi: Option<&Voi>,
    options: &QuantifyOptions,
    condition: &str,
) -> Result<Vec<FitRow>> {
    let mut rows = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        match quantify_file(path, voi, options) {
            Ok((log, q)) => {
                let patient = log.header.patient.clone().unwrap_or_default();
                let session = log.header.session.clone().unwrap_or(stem);
                rows.extend(q.rows(&patient, &session, condition));
            }
            Err(e) => {
                log::error!("{}: {e}", path.display());
                rows.push(FitRow {
                    patient: String::new(),
                    session: stem,
                    run: 0,
                    rbv: None,
                    rbf: None,
                    beta: None,
                    r2: None,
                    status: format!("failed: {e}"),
                    condition: condition.to_string(),
                    flash_time: f64::NAN,
                    n_samples: 0,
                    time_to_steady: None,
                });
            }
        }
    }
    Ok(rows)
}
