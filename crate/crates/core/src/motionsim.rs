//! Simulated probe motion and optical tracker measurements.
//!
//! Motion is a perturbation `M(t)` applied in the probe frame, so the image
//! pose at time `t` is `T_ref · M(t)`. Hand-held holding is mean-reverting
//! (Ornstein–Uhlenbeck) toward a small operator bias; blind holding adds an
//! unbounded random walk; breathing is a single-axis sinusoid.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, TrackedSample};
use crate::stream::FeedbackMode;

/// Integration step of the motion processes, s.
const STEP_S: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    HoldBmode,
    HoldTracked,
    HoldBlind,
    Reposition,
    Breathing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionModel {
    pub kind: MotionKind,
    /// Blind random-walk rate: RMS 3D displacement after one minute, mm.
    pub drift_rate: f64,
    /// Stationary per-axis SD of the hand jitter, mm.
    pub jitter_sd: f64,
    pub breathing_amplitude: f64,
    pub breathing_period: f64,
    /// Stationary SD of the rotational jitter per axis, degrees.
    pub rot_jitter_sd: f64,
    pub seed: u64,
    /// Mean-reversion rate of the jitter, 1/s.
    pub reversion_rate: f64,
    /// Magnitude of the operator's systematic offset from the reference, mm.
    pub hold_offset_mm: f64,
    /// Initial displacement for repositioning trials, mm.
    pub start_offset_mm: f64,
    /// Breathing direction in the probe frame.
    pub breathing_axis: [f64; 3],
    /// Intervals `[start, end]` (s) during which breathing is suspended.
    pub breath_holds: Vec<[f64; 2]>,
}

impl Default for MotionModel {
    fn default() -> Self {
        Self {
            kind: MotionKind::HoldBmode,
            drift_rate: 0.0,
            jitter_sd: 0.0,
            breathing_amplitude: 0.0,
            breathing_period: 4.0,
            rot_jitter_sd: 0.0,
            seed: 0,
            reversion_rate: 0.2,
            hold_offset_mm: 0.0,
            start_offset_mm: 0.0,
            breathing_axis: [1.0, 0.0, 0.0],
            breath_holds: Vec::new(),
        }
    }
}

impl MotionModel {
    /// No motion at all.
    pub fn still(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Tuned holding model for one feedback condition.
    pub fn hold(mode: FeedbackMode, seed: u64) -> Self {
        match mode {
            FeedbackMode::Bmode => Self {
                kind: MotionKind::HoldBmode,
                jitter_sd: 0.9,
                rot_jitter_sd: 0.4,
                reversion_rate: 0.15,
                hold_offset_mm: 2.0,
                seed,
                ..Self::default()
            },
            FeedbackMode::Tracked => Self {
                kind: MotionKind::HoldTracked,
                jitter_sd: 0.35,
                rot_jitter_sd: 0.2,
                reversion_rate: 0.4,
                hold_offset_mm: 1.2,
                seed,
                ..Self::default()
            },
            FeedbackMode::Blind => Self {
                kind: MotionKind::HoldBlind,
                drift_rate: 3.5,
                jitter_sd: 0.3,
                rot_jitter_sd: 0.4,
                reversion_rate: 1.0,
                seed,
                ..Self::default()
            },
        }
    }

    /// Return toward the reference from a displaced start.
    pub fn reposition(mode: FeedbackMode, seed: u64) -> Self {
        let hold = Self::hold(mode, seed);
        let (rate, offset) = match mode {
            FeedbackMode::Tracked => (0.4, 0.8),
            FeedbackMode::Bmode => (0.15, 1.5),
            FeedbackMode::Blind => (0.05, 3.0),
        };
        Self {
            kind: MotionKind::Reposition,
            reversion_rate: rate,
            hold_offset_mm: offset,
            start_offset_mm: 20.0,
            jitter_sd: hold.jitter_sd.min(0.5),
            ..hold
        }
    }

    /// Patient breathing along the probe x axis.
    pub fn breathing(amplitude: f64, period: f64, seed: u64) -> Self {
        Self {
            kind: MotionKind::Breathing,
            breathing_amplitude: amplitude,
            breathing_period: period,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let magnitudes = [
            self.drift_rate,
            self.jitter_sd,
            self.breathing_amplitude,
            self.rot_jitter_sd,
            self.reversion_rate,
            self.hold_offset_mm,
            self.start_offset_mm,
        ];
        if magnitudes.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Config(format!("motion magnitudes must be >= 0: {self:?}")));
        }
        if self.breathing_amplitude > 0.0 && !(self.breathing_period > 0.0) {
            return Err(Error::Config("breathing_period must be > 0".into()));
        }
        if self.breathing_amplitude > 0.0 && Vector3::from(self.breathing_axis).norm() == 0.0 {
            return Err(Error::Config("breathing_axis must be nonzero".into()));
        }
        Ok(())
    }

    fn breathing_offset(&self, t: f64) -> Vector3<f64> {
        if self.breathing_amplitude == 0.0 || self.breath_holds.iter().any(|w| t >= w[0] && t <= w[1]) {
            return Vector3::zeros();
        }
        let axis = Vector3::from(self.breathing_axis).normalize();
        axis * (self.breathing_amplitude * (std::f64::consts::TAU * t / self.breathing_period).sin())
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

fn unit3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = normal3(rng);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct MotionState {
    jitter: Vector3<f64>,
    walk: Vector3<f64>,
    rot: Vector3<f64>,
}

/// Lazily integrated motion process for one model; evaluation at
/// arbitrary `t` interpolates between fixed steps.
#[derive(Debug, Clone)]
pub struct MotionTrajectory {
    model: MotionModel,
    rng: ChaCha8Rng,
    target: Vector3<f64>,
    states: Vec<MotionState>,
}

impl MotionTrajectory {
    pub fn new(model: MotionModel) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        let direction = unit3(&mut rng);
        let start_dir = unit3(&mut rng);
        let (target, start) = match model.kind {
            MotionKind::HoldBmode | MotionKind::HoldTracked => (direction * model.hold_offset_mm, Vector3::zeros()),
            MotionKind::Reposition => (direction * model.hold_offset_mm, start_dir * model.start_offset_mm),
            MotionKind::HoldBlind | MotionKind::Breathing => (Vector3::zeros(), Vector3::zeros()),
        };
        let first = MotionState {
            jitter: start,
            ..MotionState::default()
        };
        Ok(Self {
            model,
            rng,
            target,
            states: vec![first],
        })
    }

    pub fn model(&self) -> &MotionModel {
        &self.model
    }

    /// Suspends breathing over `[start, end]` from now on.
    pub fn add_breath_hold(&mut self, start: f64, end: f64) {
        self.model.breath_holds.push([start, end]);
    }

    fn step(&mut self) {
        let m = &self.model;
        let prev = *self.states.last().expect("trajectory starts with a state");
        let decay = (-m.reversion_rate * STEP_S).exp();
        let spread = (1.0 - decay * decay).sqrt();
        let rot_sd = m.rot_jitter_sd.to_radians();
        let n_j = normal3(&mut self.rng);
        let n_w = normal3(&mut self.rng);
        let n_r = normal3(&mut self.rng);
        let walk_sd = m.drift_rate / 180f64.sqrt() * STEP_S.sqrt();
        let next = MotionState {
            jitter: self.target + (prev.jitter - self.target) * decay + n_j * (m.jitter_sd * spread),
            walk: if m.kind == MotionKind::HoldBlind {
                prev.walk + n_w * walk_sd
            } else {
                prev.walk
            },
            rot: prev.rot * decay + n_r * (rot_sd * spread),
        };
        self.states.push(next);
    }

    /// Perturbation from the reference pose at time `t`.
    pub fn perturbation(&mut self, t: f64) -> Result<RigidTransform> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("time {t} must be finite and >= 0")));
        }
        let pos = t / STEP_S;
        let i = pos.floor() as usize;
        while self.states.len() < i + 2 {
            self.step();
        }
        let w = pos - i as f64;
        let (a, b) = (self.states[i], self.states[i + 1]);
        let lerp = |x: Vector3<f64>, y: Vector3<f64>| if w == 0.0 { x } else { x + (y - x) * w };
        let translation = lerp(a.jitter, b.jitter) + lerp(a.walk, b.walk) + self.model.breathing_offset(t);
        Ok(RigidTransform::from_rotation_vector(lerp(a.rot, b.rot), translation))
    }
}

/// Perturbation of `model` at `t` (fresh trajectory; deterministic per seed).
pub fn sample_motion(model: &MotionModel, t: f64) -> Result<RigidTransform> {
    MotionTrajectory::new(model.clone())?.perturbation(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerNoise {
    pub trans_sd: f64,
    /// Degrees.
    pub rot_sd: f64,
    pub dropout_prob: f64,
    /// Hz.
    pub rate: f64,
}

impl Default for TrackerNoise {
    fn default() -> Self {
        Self {
            trans_sd: 0.1,
            rot_sd: 0.05,
            dropout_prob: 0.0,
            rate: 60.0,
        }
    }
}

impl TrackerNoise {
    pub fn none() -> Self {
        Self {
            trans_sd: 0.0,
            rot_sd: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trans_sd >= 0.0 && self.rot_sd >= 0.0) {
            return Err(Error::Config("tracker noise SDs must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must be in [0, 1]".into()));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Config("tracker rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackerReading {
    Sample(TrackedSample),
    Dropout { timestamp: f64 },
}

impl TrackerReading {
    pub fn timestamp(&self) -> f64 {
        match self {
            TrackerReading::Sample(s) => s.timestamp,
            TrackerReading::Dropout { timestamp } => *timestamp,
        }
    }

    pub fn pose(&self) -> Option<&RigidTransform> {
        match self {
            TrackerReading::Sample(s) => Some(&s.marker_pose),
            TrackerReading::Dropout { .. } => None,
        }
    }
}

/// One noisy tracker reading of `true_pose`.
///
/// Translation noise is isotropic Gaussian; rotation noise is a small random
/// rotation vector with per-axis SD `rot_sd`. Quality is the RMS of four
/// simulated marker residuals.
pub fn measure_tracker(
    true_pose: &RigidTransform,
    timestamp: f64,
    noise: &TrackerNoise,
    rng: &mut impl Rng,
) -> TrackerReading {
    if noise.dropout_prob > 0.0 && rng.random::<f64>() < noise.dropout_prob {
        return TrackerReading::Dropout { timestamp };
    }
    if noise.trans_sd == 0.0 && noise.rot_sd == 0.0 {
        return TrackerReading::Sample(TrackedSample {
            timestamp,
            marker_pose: *true_pose,
            quality: 0.0,
        });
    }
    let mut n3 = || Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
    let dt = n3() * noise.trans_sd;
    let dr = n3() * noise.rot_sd.to_radians();
    let rotation = UnitQuaternion::from_scaled_axis(dr) * true_pose.rotation();
    let pose = RigidTransform::new(rotation, true_pose.translation() + dt);
    let residual: f64 = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>() / 4.0;
    TrackerReading::Sample(TrackedSample {
        timestamp,
        marker_pose: pose,
        quality: noise.trans_sd * residual.sqrt(),
    })
}

/// Tracker stream plus ground truth for one simulated session.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub readings: Vec<TrackerReading>,
    /// True perturbation at each reading time.
    pub truth: Vec<(f64, RigidTransform)>,
    pub flash_times: Vec<f64>,
}

/// Samples `model` at `noise.rate` for `duration` seconds, starting at t = 0.
pub fn generate_session(
    model: &MotionModel,
    noise: &TrackerNoise,
    duration: f64,
    flash_times: &[f64],
) -> Result<SimulatedSession> {
    noise.validate()?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Config(format!("duration {duration} must be > 0")));
    }
    if let Some(f) = flash_times.iter().find(|f| !(**f >= 0.0 && **f <= duration)) {
        return Err(Error::Config(format!("flash at {f} s is outside [0, {duration}]")));
    }
    let mut trajectory = MotionTrajectory::new(model.clone())?;
    let mut rng = tracker_rng(model.seed);
    let n = (duration * noise.rate).round() as usize;
    let mut readings = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / noise.rate;
        let pose = trajectory.perturbation(t)?;
        readings.push(measure_tracker(&pose, t, noise, &mut rng));
        truth.push((t, pose));
    }
    let mut flash_times = flash_times.to_vec();
    flash_times.sort_by(f64::total_cmp);
    Ok(SimulatedSession {
        readings,
        truth,
        flash_times,
    })
}

/// Tracker noise stream, independent of the motion stream for the same seed.
pub fn tracker_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5452_4b52_4e4f_4953)
}

/// Spacing of the two replenishment runs, s.
pub const FLASH_SPACING_S: f64 = 150.0;

/// Flash pair: the first at steady state, the second one spacing later.
pub fn flash_pair(t_steady: f64) -> [f64; 2] {
    [t_steady, t_steady + FLASH_SPACING_S]
}

/// Session configuration document (JSON or TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub model: MotionModel,
    #[serde(default)]
    pub noise: TrackerNoise,
    pub duration: f64,
    #[serde(default)]
    pub flash_times: Vec<f64>,
}

impl SessionConfig {
    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.model.validate()?;
        cfg.noise.validate()?;
        Ok(cfg)
    }

    pub fn generate(&self) -> Result<SimulatedSession> {
        generate_session(&self.model, &self.noise, self.duration, &self.flash_times)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn displacement(p: &RigidTransform) -> f64 {
        // image centre of a 64 mm grid
        let c = Vector3::new(31.5, 31.5, 31.5);
        (p.transform_point(&c) - c).norm()
    }

    fn mean_disp(model: &MotionModel, from: f64, to: f64) -> f64 {
        let mut tr = MotionTrajectory::new(model.clone()).unwrap();
        let n = ((to - from) * 2.0) as usize;
        (0..n)
            .map(|i| displacement(&tr.perturbation(from + i as f64 * 0.5).unwrap()))
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn zero_magnitudes_give_identity() {
        for kind in [
            MotionKind::HoldBmode,
            MotionKind::HoldTracked,
            MotionKind::HoldBlind,
            MotionKind::Reposition,
            MotionKind::Breathing,
        ] {
            let m = MotionModel {
                kind,
                seed: 3,
                ..MotionModel::default()
            };
            for t in [0.0, 0.37, 12.0, 240.0] {
                assert_eq!(sample_motion(&m, t).unwrap(), RigidTransform::identity());
            }
        }
    }

    #[test]
    fn breathing_peak() {
        let m = MotionModel::breathing(2.0, 4.0, 1);
        let p = sample_motion(&m, 1.0).unwrap();
        assert!((p.translation() - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        let held = MotionModel {
            breath_holds: vec![[0.5, 1.5]],
            ..m
        };
        assert_eq!(sample_motion(&held, 1.0).unwrap(), RigidTransform::identity());
    }

    #[test]
    fn negative_time_is_domain_error() {
        assert!(matches!(sample_motion(&MotionModel::default(), -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_models_rejected() {
        let m = MotionModel {
            jitter_sd: -1.0,
            ..MotionModel::default()
        };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let m = MotionModel {
            breathing_amplitude: 1.0,
            breathing_period: 0.0,
            ..MotionModel::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let m = MotionModel::hold(FeedbackMode::Blind, 9);
        let a = generate_session(&m, &TrackerNoise::default(), 20.0, &[]).unwrap();
        let b = generate_session(&m, &TrackerNoise::default(), 20.0, &[]).unwrap();
        assert_eq!(a, b);
        let c = generate_session(&MotionModel { seed: 10, ..m }, &TrackerNoise::default(), 20.0, &[]).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn random_access_matches_sequential() {
        let m = MotionModel::hold(FeedbackMode::Bmode, 4);
        let mut seq = MotionTrajectory::new(m.clone()).unwrap();
        let late = seq.perturbation(100.0).unwrap();
        assert_eq!(sample_motion(&m, 100.0).unwrap(), late);
    }

    #[test]
    fn session_sample_count_and_order() {
        let s = generate_session(&MotionModel::still(1), &TrackerNoise::default(), 10.0, &[2.0]).unwrap();
        assert_eq!(s.readings.len(), 600);
        assert!(s.readings.windows(2).all(|w| w[1].timestamp() > w[0].timestamp()));
        assert_eq!(s.truth.len(), 600);
    }

    #[test]
    fn flash_outside_duration_is_config_error() {
        let r = generate_session(&MotionModel::still(1), &TrackerNoise::default(), 10.0, &[11.0]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn flash_pair_spacing() {
        assert_eq!(flash_pair(95.0), [95.0, 245.0]);
    }

    #[test]
    fn tracker_zero_noise_and_dropout() {
        let pose = RigidTransform::from_translation(1.0, 2.0, 3.0);
        let mut rng = tracker_rng(0);
        match measure_tracker(&pose, 1.0, &TrackerNoise::none(), &mut rng) {
            TrackerReading::Sample(s) => assert_eq!(s.marker_pose, pose),
            TrackerReading::Dropout { .. } => panic!("unexpected dropout"),
        }
        let all = TrackerNoise {
            dropout_prob: 1.0,
            ..TrackerNoise::default()
        };
        assert!((0..100).all(|_| matches!(measure_tracker(&pose, 0.0, &all, &mut rng), TrackerReading::Dropout { .. })));
    }

    #[test]
    fn tracker_translation_sd() {
        let noise = TrackerNoise {
            trans_sd: 0.2,
            ..TrackerNoise::default()
        };
        let mut rng = tracker_rng(42);
        let pose = RigidTransform::identity();
        let mut sq = 0.0;
        let n = 10_000;
        for _ in 0..n {
            if let TrackerReading::Sample(s) = measure_tracker(&pose, 0.0, &noise, &mut rng) {
                sq += s.marker_pose.translation().norm_squared();
            }
        }
        let sd = (sq / (3 * n) as f64).sqrt();
        assert!((sd - 0.2).abs() / 0.2 < 0.1, "sd {sd}");
    }

    #[test]
    fn mean_reverting_is_stationary() {
        for mode in [FeedbackMode::Bmode, FeedbackMode::Tracked] {
            let (mut early, mut late) = (0.0, 0.0);
            for seed in 0..20 {
                let m = MotionModel::hold(mode, seed);
                early += mean_disp(&m, 0.0, 120.0);
                late += mean_disp(&m, 120.0, 240.0);
            }
            assert!((late - early).abs() / early < 0.5, "{mode}: {early} {late}");
        }
    }

    #[test]
    fn blind_drift_grows() {
        let (mut one, mut four) = (0.0, 0.0);
        for seed in 0..20 {
            let m = MotionModel::hold(FeedbackMode::Blind, seed);
            one += mean_disp(&m, 0.0, 60.0);
            four += mean_disp(&m, 0.0, 240.0);
        }
        assert!(four > one);
    }

    #[test]
    fn blind_mean_exceeds_tracked() {
        let (mut blind, mut tracked) = (0.0, 0.0);
        for seed in 0..20 {
            blind += mean_disp(&MotionModel::hold(FeedbackMode::Blind, seed), 0.0, 240.0);
            tracked += mean_disp(&MotionModel::hold(FeedbackMode::Tracked, seed), 0.0, 240.0);
        }
        assert!(blind > tracked);
    }

    #[test]
    fn config_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("s.toml");
        std::fs::write(
            &toml_path,
            "duration = 30.0\nflash_times = [5.0]\n[model]\nkind = \"breathing\"\nbreathing_amplitude = 1.5\nseed = 7\n",
        )
        .unwrap();
        let cfg = SessionConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.model.kind, MotionKind::Breathing);
        assert_eq!(cfg.noise, TrackerNoise::default());
        let json_path = dir.path().join("s.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(SessionConfig::load(&json_path).unwrap(), cfg);
        std::fs::write(&json_path, "{\"duration\": 1}").unwrap();
        assert!(SessionConfig::load(&json_path).unwrap_err().is_config());
    }
}
