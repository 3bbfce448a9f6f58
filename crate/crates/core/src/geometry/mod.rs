//! Rigid pose algebra and the tracker → marker → image transform chain.
//!
//! All frames are right-handed and every transform maps a local frame into
//! its parent (e.g. an image pose maps image millimetres into world
//! millimetres). Composition `a * b` applies `b` first.

mod handeye;

pub use handeye::{
    calibrate, hand_eye_calibrate, reject_samples, relative_motion, self_consistency_error,
    Calibration, CalibrationOptions, MotionPair, RejectionReport, DEFAULT_LEVER_ARM_MM,
    DEFAULT_MAX_DISPLACEMENT_MM, DEFAULT_MAX_QUALITY_MM,
};

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum deviation of the quaternion norm from one.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A rigid transform: unit-quaternion rotation followed by a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    quaternion: [f64; 4],
    translation_mm: [f64; 3],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        RigidTransform::from_components(r.quaternion, r.translation_mm)
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        TransformRepr {
            quaternion: t.quaternion_wxyz(),
            translation_mm: t.translation_mm(),
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a transform from raw `[w, x, y, z]` quaternion components and a
    /// translation. The components are kept bit-for-bit; the quaternion must
    /// already be unit length within [`UNIT_TOLERANCE`].
    pub fn from_components(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        if q.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite component".into()));
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "quaternion norm {norm} is not unit"
            )));
        }
        Ok(Self {
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
            translation: Vector3::new(t[0], t[1], t[2]),
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Rotation of `angle` radians about `axis` (normalised internally),
    /// followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match Unit::try_new(axis, 1e-12) {
            Some(axis) => UnitQuaternion::from_axis_angle(&axis, angle),
            None => UnitQuaternion::identity(),
        };
        Self::new(rotation, translation)
    }

    /// Rotation given as a rotation vector (axis × angle, radians).
    pub fn from_rotation_vector(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(rotvec), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_mm(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4×4 matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Maps a point: `R·p + t`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction (no translation).
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Rotation vector (axis × angle).
    pub fn rotation_vector(&self) -> Vector3<f64> {
        self.rotation.scaled_axis()
    }

    /// Angle (rad) of the relative rotation between two transforms.
    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Euclidean distance between translations (mm).
    pub fn translation_distance(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Checks the quaternion norm against [`UNIT_TOLERANCE`].
    pub fn validate(&self) -> Result<()> {
        let norm = self.rotation.quaternion().norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "quaternion norm {norm} is not unit"
            )));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(())
    }

    /// Interpolates between two poses: slerp for rotation, linear for
    /// translation. `s = 0` gives `self`, `s = 1` gives `other`.
    pub fn interpolate(&self, other: &RigidTransform, s: f64) -> RigidTransform {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(self.rotation);
        RigidTransform {
            rotation,
            translation: self.translation.lerp(&other.translation, s),
        }
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// One timestamped tracker observation of the probe marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedSample {
    /// Seconds since session start.
    pub timestamp: f64,
    /// Marker → tracker-world pose.
    pub marker_pose: RigidTransform,
    /// RMS residual of the marker sphere fit, mm.
    pub quality: f64,
}

/// Checks that timestamps are strictly increasing.
pub fn check_strictly_increasing(samples: &[TrackedSample]) -> Result<()> {
    for w in samples.windows(2) {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(Error::InvalidInput(format!(
                "timestamps not strictly increasing at t = {}",
                w[1].timestamp
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0f64..std::f64::consts::PI,
            prop::array::uniform3(-200.0f64..200.0),
        )
            .prop_map(|(axis, angle, t)| {
                RigidTransform::from_axis_angle(
                    Vector3::from(axis) + Vector3::new(1e-3, 0.0, 0.0),
                    angle,
                    Vector3::from(t),
                )
            })
    }

    fn is_identity(t: &RigidTransform, tol: f64) -> bool {
        t.rotation_angle() < tol && t.translation().norm() < tol
    }

    #[test]
    fn identity_maps_point_to_itself() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().transform_point(&p), p);
    }

    #[test]
    fn translation_moves_origin() {
        let t = RigidTransform::from_translation(3.0, 4.0, 0.0);
        let p = t.transform_point(&Vector3::zeros());
        assert_eq!(p, Vector3::new(3.0, 4.0, 0.0));
        assert!((p.norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let p = t.transform_point(&Vector3::x());
        assert!((p - Vector3::y()).norm() < 1e-9);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let err = RigidTransform::from_components([1.0, 0.1, 0.0, 0.0], [0.0; 3]);
        assert!(matches!(err, Err(Error::InvalidTransform(_))));
        let err = RigidTransform::from_components([f64::NAN, 0.0, 0.0, 0.0], [0.0; 3]);
        assert!(err.is_err());
    }

    #[test]
    fn json_shape() {
        let t = RigidTransform::from_translation(1.0, 2.0, 3.0);
        let v = serde_json::to_value(t).unwrap();
        assert_eq!(v["quaternion"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(v["translation_mm"], serde_json::json!([1.0, 2.0, 3.0]));
        let back: RigidTransform = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
        let bad = serde_json::json!({"quaternion": [2.0, 0.0, 0.0, 0.0], "translation_mm": [0.0, 0.0, 0.0]});
        assert!(serde_json::from_value::<RigidTransform>(bad).is_err());
    }

    #[test]
    fn interpolate_endpoints() {
        let a = RigidTransform::from_translation(0.0, 0.0, 0.0);
        let b = RigidTransform::from_axis_angle(Vector3::z(), 0.4, Vector3::new(2.0, 0.0, 0.0));
        let mid = a.interpolate(&b, 0.5);
        assert!((mid.rotation_angle() - 0.2).abs() < 1e-12);
        assert!((mid.translation().x - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(t in arb_transform()) {
            prop_assert!(is_identity(&t.compose(&t.inverse()), 1e-9));
            prop_assert!(is_identity(&t.inverse().compose(&t), 1e-9));
        }

        #[test]
        fn composition_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = (a * b) * c;
            let right = a * (b * c);
            prop_assert!(left.rotation_distance(&right) < 1e-9);
            prop_assert!(left.translation_distance(&right) < 1e-9);
        }

        #[test]
        fn transform_preserves_distances(
            t in arb_transform(),
            p in prop::array::uniform3(-100.0f64..100.0),
            q in prop::array::uniform3(-100.0f64..100.0),
        ) {
            let (p, q) = (Vector3::from(p), Vector3::from(q));
            let d0 = (p - q).norm();
            let d1 = (t.transform_point(&p) - t.transform_point(&q)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn quaternion_stays_unit(a in arb_transform(), b in arb_transform()) {
            prop_assert!((a * b).validate().is_ok());
            prop_assert!(a.inverse().validate().is_ok());
        }
    }
}
