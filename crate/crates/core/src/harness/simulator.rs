use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::motionsim::{
    measure_tracker, tracker_rng, MotionModel, MotionTrajectory, TrackerNoise, TrackerReading, FLASH_SPACING_S,
};
use crate::phantom::{render_frame, Kinetics, Phantom, PhantomSpec, RenderSettings, VolumeFrame};
use crate::quant::{linearize_table, voi_mean, SteadyStateMonitor, Voi, DEFAULT_SLOPE_TOLERANCE, DEFAULT_STEADY_WINDOW_S};
use crate::stream::{
    seconds_to_us, ControlEvent, ControlPayload, FeedbackMode, Message, MessageSource, SessionHeader,
    TrackerPayload,
};

/// Flash the pair automatically once the live lesion TIC is steady.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoFlash {
    pub window: f64,
    pub slope_tolerance: f64,
    pub spacing: f64,
    /// Flash at this time even if steady state was not detected.
    pub latest: f64,
    /// Breath-hold length after each flash, s (0 = none).
    pub breath_hold: f64,
}

impl Default for AutoFlash {
    fn default() -> Self {
        Self {
            window: DEFAULT_STEADY_WINDOW_S,
            slope_tolerance: DEFAULT_SLOPE_TOLERANCE,
            spacing: FLASH_SPACING_S,
            latest: 175.0,
            breath_hold: 0.0,
        }
    }
}

/// Everything needed to reproduce one simulated acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub seed: u64,
    pub duration: f64,
    /// Volumes per second.
    pub frame_rate: f64,
    pub phantom: PhantomSpec,
    pub render: RenderSettings,
    pub motion: MotionModel,
    pub tracker: TrackerNoise,
    /// Probe reference pose (image → world).
    pub reference_pose: RigidTransform,
    pub flash_times: Vec<f64>,
    pub auto_flash: Option<AutoFlash>,
    /// VOI on the reference image grid; the lesion shrunk by
    /// `voi_margin_mm` when absent.
    pub voi: Option<Voi>,
    pub voi_margin_mm: f64,
    /// Emit tracker messages (frames always carry their pose).
    pub emit_tracker: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 480.0,
            frame_rate: 1.0,
            phantom: PhantomSpec::default(),
            render: RenderSettings {
                noise_sd: 0.05,
                ..RenderSettings::default()
            },
            motion: MotionModel::still(1),
            tracker: TrackerNoise::default(),
            reference_pose: RigidTransform::identity(),
            flash_times: Vec::new(),
            auto_flash: None,
            voi: None,
            voi_margin_mm: 1.0,
            emit_tracker: true,
        }
    }
}

impl SimulationConfig {
    /// Eight-minute infusion with a steady-state-triggered flash pair,
    /// freehand tracked holding and shallow breathing.
    pub fn repeatability_default() -> Self {
        let mut motion = MotionModel::hold(FeedbackMode::Tracked, 1);
        motion.breathing_amplitude = 1.5;
        motion.breathing_period = 4.5;
        Self {
            motion,
            auto_flash: Some(AutoFlash::default()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be > 0".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config("frame_rate must be > 0".into()));
        }
        if let Some(f) = self.flash_times.iter().find(|f| !(**f >= 0.0 && **f <= self.duration)) {
            return Err(Error::Config(format!("flash at {f} s is outside the session")));
        }
        if let Some(a) = &self.auto_flash {
            if !(a.window > 0.0 && a.slope_tolerance > 0.0 && a.spacing > 0.0 && a.breath_hold >= 0.0) {
                return Err(Error::Config("invalid auto_flash settings".into()));
            }
        }
        if !(self.render.noise_sd >= 0.0 && self.render.dynamic_range_db > 0.0) {
            return Err(Error::Config("invalid render settings".into()));
        }
        if !(self.voi_margin_mm >= 0.0) {
            return Err(Error::Config("voi_margin_mm must be >= 0".into()));
        }
        self.render.geometry.validate()?;
        self.motion.validate()?;
        self.tracker.validate()?;
        self.reference_pose.validate()?;
        Ok(())
    }

    /// Configured VOI, or the lesion ellipsoid expressed on the reference
    /// image grid and shrunk by the margin.
    pub fn resolve_voi(&self) -> Result<Voi> {
        if let Some(v) = &self.voi {
            return Ok(v.clone());
        }
        let (center, radii) = self
            .phantom
            .lesion()
            .ok_or_else(|| Error::Config("phantom has no lesion".into()))?;
        let world = self.phantom.world_pose.transform_point(&center.into());
        let local = self.reference_pose.inverse().transform_point(&world);
        let radii = radii.map(|r| (r - self.voi_margin_mm).max(0.5));
        Ok(Voi::ellipsoid(local.into(), radii))
    }
}

/// Live acquisition: tracker samples at the tracker rate, volumes at the
/// frame rate and flash controls, in timestamp order.
pub struct SessionSimulator {
    config: SimulationConfig,
    header: SessionHeader,
    phantom: Phantom,
    kinetics: Kinetics,
    trajectory: MotionTrajectory,
    /// Start time of the current trajectory (feedback-mode switches restart it).
    trajectory_t0: f64,
    tracker_rng: ChaCha8Rng,
    voi_indices: Vec<usize>,
    table: [f64; 256],
    monitor: Option<SteadyStateMonitor>,
    auto_pending: bool,
    flash_times: Vec<f64>,
    pending_flashes: Vec<f64>,
    queue: VecDeque<Message>,
    tracker_index: u64,
    frame_index: u64,
    last_reading: Option<(u64, TrackerReading)>,
    truth: Vec<(f64, RigidTransform)>,
    controls: Vec<(f64, ControlPayload)>,
    reference_captures: Vec<(f64, RigidTransform)>,
    finished: bool,
}

impl SessionSimulator {
    pub fn new(config: SimulationConfig) -> Result<Self> {
        config.validate()?;
        let (phantom, kinetics) = config.phantom.build()?;
        let voi_indices = config.resolve_voi()?.indices(&config.render.geometry)?;
        let header = SessionHeader::new(
            config.seed,
            serde_json::to_value(&config)?,
            serde_json::to_value(&config.phantom)?,
        );
        let monitor = match &config.auto_flash {
            Some(a) => Some(SteadyStateMonitor::new(a.window, a.slope_tolerance)?),
            None => None,
        };
        let mut pending: Vec<f64> = config.flash_times.clone();
        pending.sort_by(f64::total_cmp);
        Ok(Self {
            trajectory: MotionTrajectory::new(config.motion.clone())?,
            tracker_rng: tracker_rng(derive_seed(config.seed, &[7])),
            table: linearize_table(config.render.dynamic_range_db),
            flash_times: pending.clone(),
            pending_flashes: pending,
            header,
            phantom,
            kinetics,
            trajectory_t0: 0.0,
            voi_indices,
            auto_pending: monitor.is_some(),
            monitor,
            queue: VecDeque::new(),
            tracker_index: 0,
            frame_index: 0,
            last_reading: None,
            truth: Vec::new(),
            controls: Vec::new(),
            reference_captures: Vec::new(),
            finished: false,
            config,
        })
    }

    pub fn with_header_labels(mut self, patient: Option<String>, session: Option<String>) -> Self {
        self.header.patient = patient;
        self.header.session = session;
        self
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    /// All flash times so far (scheduled and received).
    pub fn flash_times(&self) -> &[f64] {
        &self.flash_times
    }

    /// True image pose of every emitted frame.
    pub fn ground_truth(&self) -> &[(f64, RigidTransform)] {
        &self.truth
    }

    pub fn received_controls(&self) -> &[(f64, ControlPayload)] {
        &self.controls
    }

    pub fn reference_captures(&self) -> &[(f64, RigidTransform)] {
        &self.reference_captures
    }

    pub fn steady_state(&self) -> Option<&crate::quant::SteadyStateReport> {
        self.monitor.as_ref().map(|m| m.report())
    }

    /// Runs the session to completion and returns every message.
    pub fn collect(&mut self) -> Result<Vec<Message>> {
        let mut out = Vec::new();
        while let Some(m) = self.try_next()? {
            out.push(m);
        }
        Ok(out)
    }

    fn true_pose(&mut self, t: f64) -> Result<RigidTransform> {
        let m = self.trajectory.perturbation((t - self.trajectory_t0).max(0.0))?;
        Ok(self.config.reference_pose * m)
    }

    fn tracker_time_us(&self, k: u64) -> u64 {
        seconds_to_us(k as f64 / self.config.tracker.rate)
    }

    fn frame_time(&self, f: u64) -> f64 {
        f as f64 / self.config.frame_rate
    }

    fn add_flash(&mut self, t: f64) {
        self.flash_times.push(t);
        self.flash_times.sort_by(f64::total_cmp);
        if let Some(a) = &self.config.auto_flash {
            if a.breath_hold > 0.0 {
                self.trajectory.add_breath_hold(t - self.trajectory_t0, t - self.trajectory_t0 + a.breath_hold);
            }
        }
    }

    fn schedule_pair(&mut self, t_detect: f64) {
        let Some(a) = self.config.auto_flash.clone() else {
            return;
        };
        // the flash follows the frame that revealed steady state
        let first = t_detect + 0.5 / self.config.frame_rate;
        for t in [first, first + a.spacing] {
            if t <= self.config.duration {
                self.pending_flashes.push(t);
                self.add_flash(t);
            }
        }
        self.pending_flashes.sort_by(f64::total_cmp);
        log::info!("flash pair at {first:.1} s and +{:.0} s", a.spacing);
        self.auto_pending = false;
    }

    fn emit_frame(&mut self, f: u64) -> Result<Message> {
        let t = self.frame_time(f);
        let truth = self.true_pose(t)?;
        let t_us = seconds_to_us(t);
        let measured = match self.last_reading {
            Some((us, reading)) if us <= t_us => reading,
            _ => measure_tracker(&truth, t, &self.config.tracker, &mut self.tracker_rng),
        };
        let frame = render_frame(
            &self.phantom,
            &self.kinetics,
            t,
            &truth,
            &self.config.render,
            &self.flash_times,
            derive_seed(self.config.seed, &[1, f]),
        )?;
        let frame = VolumeFrame {
            pose: measured.pose().copied(),
            ..frame
        };
        self.truth.push((t, truth));
        if let (true, Some(monitor)) = (self.auto_pending, self.monitor.as_mut()) {
            let (mean, _) = voi_mean(&frame, &self.voi_indices, None, &self.table);
            let latest = self.config.auto_flash.as_ref().map_or(f64::INFINITY, |a| a.latest);
            let steady = monitor.push(t, mean).unwrap_or(false);
            if steady || t >= latest {
                self.schedule_pair(t);
            }
        }
        Ok(Message::frame(&frame)?)
    }

    fn try_next(&mut self) -> Result<Option<Message>> {
        if let Some(m) = self.queue.pop_front() {
            return Ok(Some(m));
        }
        if self.finished {
            return Ok(None);
        }
        let end_us = seconds_to_us(self.config.duration);
        let tracker_us = if self.config.emit_tracker {
            Some(self.tracker_time_us(self.tracker_index)).filter(|&u| u < end_us)
        } else {
            None
        };
        let frame_us = Some(seconds_to_us(self.frame_time(self.frame_index))).filter(|&u| u < end_us);
        let flash_us = self.pending_flashes.first().map(|&t| seconds_to_us(t));
        let next = [flash_us, tracker_us, frame_us].into_iter().flatten().min();
        let Some(now) = next else {
            self.finished = true;
            return Ok(None);
        };
        if flash_us == Some(now) {
            self.pending_flashes.remove(0);
            return Ok(Some(Message::control(now, ControlEvent::Flash)));
        }
        if tracker_us == Some(now) {
            let t = self.tracker_index as f64 / self.config.tracker.rate;
            let truth = self.true_pose(t)?;
            let reading = measure_tracker(&truth, t, &self.config.tracker, &mut self.tracker_rng);
            self.last_reading = Some((now, reading));
            self.tracker_index += 1;
            let payload = match reading {
                TrackerReading::Sample(s) => TrackerPayload::Sample {
                    pose: s.marker_pose,
                    quality: s.quality as f32,
                },
                TrackerReading::Dropout { .. } => TrackerPayload::Dropout,
            };
            return Ok(Some(Message::tracker(now, payload)));
        }
        let f = self.frame_index;
        self.frame_index += 1;
        Ok(Some(self.emit_frame(f)?))
    }
}

impl MessageSource for SessionSimulator {
    fn header(&self) -> SessionHeader {
        self.header.clone()
    }

    fn next_message(&mut self) -> Option<Message> {
        match self.try_next() {
            Ok(m) => m,
            Err(e) => {
                log::error!("simulation stopped: {e}");
                self.finished = true;
                None
            }
        }
    }

    fn handle_control(&mut self, control: &ControlPayload, session_time_s: f64) {
        self.controls.push((session_time_s, control.clone()));
        match ControlEvent::from_payload(control) {
            Some(ControlEvent::Flash) => self.add_flash(session_time_s),
            Some(ControlEvent::CaptureReference) => match self.true_pose(session_time_s) {
                Ok(pose) => self.reference_captures.push((session_time_s, pose)),
                Err(e) => log::warn!("reference capture failed: {e}"),
            },
            Some(ControlEvent::FeedbackMode(mode)) => {
                let model = MotionModel {
                    breathing_amplitude: self.config.motion.breathing_amplitude,
                    breathing_period: self.config.motion.breathing_period,
                    breathing_axis: self.config.motion.breathing_axis,
                    ..MotionModel::hold(mode, derive_seed(self.config.motion.seed, &[session_time_s.to_bits()]))
                };
                match MotionTrajectory::new(model) {
                    Ok(tr) => {
                        self.trajectory = tr;
                        self.trajectory_t0 = session_time_s;
                    }
                    Err(e) => log::warn!("feedback mode switch failed: {e}"),
                }
            }
            Some(ControlEvent::InfusionStart | ControlEvent::InfusionStop) => {
                log::info!("infusion control at {session_time_s:.3} s recorded");
            }
            None => log::warn!("unrecognised control {:?}", control.entries),
        }
    }
}
