//! Hand-eye calibration (`A·X = X·B`) with sample rejection.
//!
//! Rotation is solved in closed form from the quaternion constraint
//! `q_A ⊗ q_X = q_X ⊗ q_B` stacked over all pairs (smallest eigenvector of
//! the normal matrix), then translation from the linear system
//! `(R_A − I)·t_X = R_X·t_B − t_A` by least squares.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::RigidTransform;
use crate::error::{Error, Result};

/// Lever arm used to express rotation residuals in millimetres.
pub const DEFAULT_LEVER_ARM_MM: f64 = 50.0;
pub const DEFAULT_MAX_DISPLACEMENT_MM: f64 = 5.0;
pub const DEFAULT_MAX_QUALITY_MM: f64 = 0.5;

/// Rotation axes closer than this are treated as parallel.
const PARALLEL_AXIS_DEG: f64 = 1.0;
/// Motions with a smaller rotation carry no usable axis.
const MIN_AXIS_ANGLE_RAD: f64 = 1e-6;

/// One motion pair: image-space motion `a` and marker-space motion `b`,
/// plus the tracker diagnostics used for rejection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPair {
    pub a: RigidTransform,
    pub b: RigidTransform,
    /// Marker displacement between the tracker samples bracketing the
    /// image acquisition, mm.
    #[serde(default)]
    pub marker_displacement_mm: f64,
    /// Worst marker-fit RMS residual of the two stations, mm.
    #[serde(default)]
    pub quality_mm: f64,
}

impl MotionPair {
    pub fn new(a: RigidTransform, b: RigidTransform) -> Self {
        Self {
            a,
            b,
            marker_displacement_mm: 0.0,
            quality_mm: 0.0,
        }
    }

    pub fn with_diagnostics(mut self, displacement_mm: f64, quality_mm: f64) -> Self {
        self.marker_displacement_mm = displacement_mm;
        self.quality_mm = quality_mm;
        self
    }
}

/// Relative motion between two absolute poses: `from⁻¹ · to`.
pub fn relative_motion(from: &RigidTransform, to: &RigidTransform) -> RigidTransform {
    from.inverse() * *to
}

/// Result of a hand-eye solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationRepr", into = "CalibrationRepr")]
pub struct Calibration {
    /// Image → marker transform.
    pub x: RigidTransform,
    pub rms_error: f64,
    pub n_accepted: usize,
    pub n_rejected: usize,
}

#[derive(Serialize, Deserialize)]
struct CalibrationRepr {
    quaternion: [f64; 4],
    translation_mm: [f64; 3],
    rms_error_mm: f64,
    n_accepted: usize,
    n_rejected: usize,
}

impl From<Calibration> for CalibrationRepr {
    fn from(c: Calibration) -> Self {
        CalibrationRepr {
            quaternion: c.x.quaternion_wxyz(),
            translation_mm: c.x.translation_mm(),
            rms_error_mm: c.rms_error,
            n_accepted: c.n_accepted,
            n_rejected: c.n_rejected,
        }
    }
}

impl TryFrom<CalibrationRepr> for Calibration {
    type Error = Error;

    fn try_from(r: CalibrationRepr) -> Result<Self> {
        if !(r.rms_error_mm >= 0.0) {
            return Err(Error::InvalidInput("rms_error_mm must be >= 0".into()));
        }
        Ok(Calibration {
            x: RigidTransform::from_components(r.quaternion, r.translation_mm)?,
            rms_error: r.rms_error_mm,
            n_accepted: r.n_accepted,
            n_rejected: r.n_rejected,
        })
    }
}

/// Counts from [`reject_samples`]. A pair failing both tests is counted in
/// both categories but only once in `n_rejected`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub n_input: usize,
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub rejected_displacement: usize,
    pub rejected_quality: usize,
}

/// Drops pairs whose marker displacement or fit quality exceeds the limits.
pub fn reject_samples(
    pairs: &[MotionPair],
    max_displacement_mm: f64,
    max_quality_mm: f64,
) -> (Vec<MotionPair>, RejectionReport) {
    let mut report = RejectionReport {
        n_input: pairs.len(),
        ..Default::default()
    };
    let mut accepted = Vec::with_capacity(pairs.len());
    for pair in pairs {
        // A non-positive limit accepts nothing; NaN diagnostics count as failures.
        let moved =
            max_displacement_mm <= 0.0 || !(pair.marker_displacement_mm <= max_displacement_mm);
        let noisy = max_quality_mm <= 0.0 || !(pair.quality_mm <= max_quality_mm);
        report.rejected_displacement += moved as usize;
        report.rejected_quality += noisy as usize;
        if moved || noisy {
            report.n_rejected += 1;
        } else {
            accepted.push(*pair);
        }
    }
    report.n_accepted = accepted.len();
    (accepted, report)
}

fn quat_left(q: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
}

fn quat_right(q: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w)
}

/// Quaternion with non-negative scalar part.
fn canonical(q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    }
}

fn check_axis_diversity(pairs: &[MotionPair]) -> Result<()> {
    let axes: Vec<Vector3<f64>> = pairs
        .iter()
        .filter(|p| p.a.rotation_angle() > MIN_AXIS_ANGLE_RAD)
        .filter_map(|p| p.a.rotation().axis().map(|a| a.into_inner()))
        .collect();
    let cos_limit = PARALLEL_AXIS_DEG.to_radians().cos();
    for (i, u) in axes.iter().enumerate() {
        for v in &axes[i + 1..] {
            if u.dot(v).abs() < cos_limit {
                return Ok(());
            }
        }
    }
    Err(Error::DegenerateMotion(format!(
        "all rotation axes parallel within {PARALLEL_AXIS_DEG}°"
    )))
}

/// Solves `A_i·X = X·B_i` over all pairs.
///
/// The returned `rms_error` is [`self_consistency_error`] over the input
/// pairs with the default lever arm; `n_rejected` is zero (see
/// [`calibrate`] for the rejecting variant).
pub fn hand_eye_calibrate(pairs: &[MotionPair]) -> Result<Calibration> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 motion pairs, got {}",
            pairs.len()
        )));
    }
    check_axis_diversity(pairs)?;

    let mut normal = Matrix4::<f64>::zeros();
    for p in pairs {
        let qa = canonical(p.a.rotation());
        let qb = canonical(p.b.rotation());
        let m = quat_left(&qa) - quat_right(&qb);
        normal += m.transpose() * m;
    }
    let eig = normal.symmetric_eigen();
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("4 eigenvalues");
    let v: Vector4<f64> = eig.eigenvectors.column(min_idx).into_owned();
    let rotation = canonical(&UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        v[0], v[1], v[2], v[3],
    )));
    let rot_x = rotation.to_rotation_matrix().into_inner();

    let mut lhs = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for p in pairs {
        let c = p.a.rotation_matrix() - Matrix3::identity();
        let d = rot_x * p.b.translation() - p.a.translation();
        lhs += c.transpose() * c;
        rhs += c.transpose() * d;
    }
    let translation = lhs
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .or_else(|| lhs.try_inverse().map(|inv| inv * rhs))
        .ok_or_else(|| Error::DegenerateMotion("translation system is singular".into()))?;

    let x = RigidTransform::new(rotation, translation);
    let rms_error = residual_rms(&x, pairs, DEFAULT_LEVER_ARM_MM);
    Ok(Calibration {
        x,
        rms_error,
        n_accepted: pairs.len(),
        n_rejected: 0,
    })
}

/// Options for [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub max_displacement_mm: f64,
    pub max_quality_mm: f64,
    pub lever_arm_mm: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            max_displacement_mm: DEFAULT_MAX_DISPLACEMENT_MM,
            max_quality_mm: DEFAULT_MAX_QUALITY_MM,
            lever_arm_mm: DEFAULT_LEVER_ARM_MM,
        }
    }
}

/// Rejection followed by the hand-eye solve.
pub fn calibrate(
    pairs: &[MotionPair],
    options: &CalibrationOptions,
) -> Result<(Calibration, RejectionReport)> {
    let (accepted, report) =
        reject_samples(pairs, options.max_displacement_mm, options.max_quality_mm);
    let mut cal = hand_eye_calibrate(&accepted)?;
    cal.rms_error = residual_rms(&cal.x, &accepted, options.lever_arm_mm);
    cal.n_rejected = report.n_rejected;
    Ok((cal, report))
}

fn pair_residual(x: &RigidTransform, pair: &MotionPair, lever_arm_mm: f64) -> f64 {
    let ax = pair.a * *x;
    let xb = *x * pair.b;
    ax.translation_distance(&xb) + lever_arm_mm * ax.rotation_distance(&xb)
}

fn residual_rms(x: &RigidTransform, pairs: &[MotionPair], lever_arm_mm: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let ss: f64 = pairs
        .iter()
        .map(|p| pair_residual(x, p, lever_arm_mm).powi(2))
        .sum();
    (ss / pairs.len() as f64).sqrt()
}

/// RMS over pairs of `‖t(A·X) − t(X·B)‖ + lever_arm · ∠(A·X, X·B)`, in mm.
pub fn self_consistency_error(
    cal: &Calibration,
    pairs: &[MotionPair],
    lever_arm_mm: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no motion pairs".into()));
    }
    Ok(residual_rms(&cal.x, pairs, lever_arm_mm))
}
