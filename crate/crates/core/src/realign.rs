//! Pose-based 4D re-alignment: every frame is resampled onto the reference
//! frame's grid so a fixed VOI follows the same world anatomy.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::phantom::{GridGeometry, VolumeFrame};
use crate::stream::{Message, SessionHeader, SessionLog};

/// Slack (in source voxels) for samples that land on the grid boundary.
const BOUNDARY_TOL: f64 = 1e-6;

/// Handling of frames acquired during tracker dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseGapPolicy {
    /// Keep the frame but mark it unaligned with an all-false mask.
    #[default]
    Exclude,
    /// Slerp/lerp a pose from the nearest frames that have one.
    Interpolate,
}

/// Affine map from reference voxel index to source continuous index.
struct IndexMap {
    origin: Vector3<f64>,
    steps: [Vector3<f64>; 3],
    limits: [f64; 3],
}

impl IndexMap {
    fn new(src_pose: &RigidTransform, src: &GridGeometry, ref_pose: &RigidTransform, dst: &GridGeometry) -> Self {
        let m = src_pose.inverse() * *ref_pose;
        let r = m.rotation_matrix();
        let inv = Vector3::from_fn(|a, _| 1.0 / src.voxel_size[a]);
        let steps = [0, 1, 2].map(|a| r.column(a).component_mul(&inv) * dst.voxel_size[a]);
        Self {
            origin: m.translation().component_mul(&inv),
            steps,
            limits: src.dims.map(|n| n as f64 - 1.0),
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + self.steps[0] * i as f64 + self.steps[1] * j as f64 + self.steps[2] * k as f64
    }

    /// Clamped index if `c` falls inside the source grid.
    #[inline]
    fn inside(&self, c: &Vector3<f64>) -> Option<[f64; 3]> {
        let mut out = [0.0; 3];
        for a in 0..3 {
            if !(c[a] >= -BOUNDARY_TOL && c[a] <= self.limits[a] + BOUNDARY_TOL) {
                return None;
            }
            out[a] = c[a].clamp(0.0, self.limits[a]);
        }
        Some(out)
    }
}

#[inline]
fn split(x: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    // x is clamped to >= 0, so truncation is floor
    let i = (x as usize).min(n - 2);
    (i, x - i as f64)
}

struct Sampler<'a> {
    dims: [usize; 3],
    offsets: [usize; 3],
    voxels: &'a [u8],
}

impl<'a> Sampler<'a> {
    fn new(g: &GridGeometry, voxels: &'a [u8]) -> Self {
        let [nx, ny, nz] = g.dims;
        let offsets = [usize::from(nx > 1), if ny > 1 { nx } else { 0 }, if nz > 1 { nx * ny } else { 0 }];
        Self {
            dims: g.dims,
            offsets,
            voxels,
        }
    }

    /// Trilinear code at a clamped continuous index, rounded half up.
    #[inline]
    fn trilinear(&self, [x, y, z]: [f64; 3]) -> u8 {
        let (x0, fx) = split(x, self.dims[0]);
        let (y0, fy) = split(y, self.dims[1]);
        let (z0, fz) = split(z, self.dims[2]);
        let [dx, dy, dz] = self.offsets;
        let base = x0 + self.dims[0] * (y0 + self.dims[1] * z0);
        let at = |o: usize| self.voxels[base + o] as f64;
        let c00 = at(0) + (at(dx) - at(0)) * fx;
        let c10 = at(dy) + (at(dy + dx) - at(dy)) * fx;
        let c01 = at(dz) + (at(dz + dx) - at(dz)) * fx;
        let c11 = at(dz + dy) + (at(dz + dy + dx) - at(dz + dy)) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        let value = c0 + (c1 - c0) * fz;
        // a convex combination of codes, so the cast cannot saturate
        (value + 0.5) as u8
    }
}

fn check_frame(frame: &VolumeFrame) -> Result<GridGeometry> {
    let g = frame.geometry();
    g.validate().map_err(|e| Error::InvalidInput(e.to_string()))?;
    if frame.voxels.len() != g.len() {
        return Err(Error::InvalidInput("frame voxel count does not match dims".into()));
    }
    Ok(g)
}

/// Resamples `src` onto the grid `(ref_dims, ref_voxel_size)` at `ref_pose`.
///
/// Trilinear interpolation on the raw 8-bit codes, rounded half up.
/// Reference voxels whose source position falls outside the source grid are
/// set to 0 with a false mask entry.
pub fn realign_frame(
    src: &VolumeFrame,
    ref_pose: &RigidTransform,
    ref_dims: [usize; 3],
    ref_voxel_size: [f64; 3],
) -> Result<(VolumeFrame, Vec<bool>)> {
    let src_pose = src
        .pose
        .ok_or_else(|| Error::InvalidInput("source frame has no pose".into()))?;
    let sg = check_frame(src)?;
    let dst = GridGeometry {
        dims: ref_dims,
        voxel_size: ref_voxel_size,
    };
    dst.validate().map_err(|e| Error::InvalidInput(e.to_string()))?;
    src_pose.validate()?;
    ref_pose.validate()?;

    if src_pose == *ref_pose && sg == dst {
        let out = VolumeFrame {
            pose: Some(*ref_pose),
            ..src.clone()
        };
        return Ok((out, vec![true; dst.len()]));
    }

    let map = IndexMap::new(&src_pose, &sg, ref_pose, &dst);
    let sampler = Sampler::new(&sg, &src.voxels);
    let mut voxels = Vec::with_capacity(dst.len());
    let mut mask = Vec::with_capacity(dst.len());
    for k in 0..dst.dims[2] {
        for j in 0..dst.dims[1] {
            for i in 0..dst.dims[0] {
                match map.inside(&map.at(i, j, k)) {
                    None => {
                        voxels.push(0);
                        mask.push(false);
                    }
                    Some(x) => {
                        voxels.push(sampler.trilinear(x));
                        mask.push(true);
                    }
                }
            }
        }
    }
    let frame = VolumeFrame {
        timestamp: src.timestamp,
        pose: Some(*ref_pose),
        dims: ref_dims,
        voxel_size: ref_voxel_size,
        voxels,
    };
    Ok((frame, mask))
}

/// Resampled codes at the reference voxels `indices` only (`None` where out
/// of field). Matches the corresponding entries of [`realign_frame`].
pub fn realign_indices(
    src: &VolumeFrame,
    ref_pose: &RigidTransform,
    dst: &GridGeometry,
    indices: &[usize],
) -> Result<Vec<Option<u8>>> {
    let src_pose = src
        .pose
        .ok_or_else(|| Error::InvalidInput("source frame has no pose".into()))?;
    let sg = check_frame(src)?;
    dst.validate().map_err(|e| Error::InvalidInput(e.to_string()))?;
    src_pose.validate()?;
    ref_pose.validate()?;
    if let Some(&i) = indices.iter().find(|&&i| i >= dst.len()) {
        return Err(Error::InvalidInput(format!("voxel index {i} outside the reference grid")));
    }
    if src_pose == *ref_pose && sg == *dst {
        return Ok(indices.iter().map(|&i| Some(src.voxels[i])).collect());
    }
    let map = IndexMap::new(&src_pose, &sg, ref_pose, dst);
    let sampler = Sampler::new(&sg, &src.voxels);
    let [nx, ny, _] = dst.dims;
    Ok(indices
        .iter()
        .map(|&idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            map.inside(&map.at(i, j, k)).map(|x| sampler.trilinear(x))
        })
        .collect())
}

/// In-field flags only, without resampling.
pub fn validity_mask(
    src_pose: &RigidTransform,
    src: &GridGeometry,
    ref_pose: &RigidTransform,
    dst: &GridGeometry,
) -> Vec<bool> {
    let map = IndexMap::new(src_pose, src, ref_pose, dst);
    let mut mask = Vec::with_capacity(dst.len());
    for k in 0..dst.dims[2] {
        for j in 0..dst.dims[1] {
            for i in 0..dst.dims[0] {
                mask.push(map.inside(&map.at(i, j, k)).is_some());
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub reference_index: usize,
    pub frames: Vec<VolumeFrame>,
    pub validity_masks: Vec<Vec<bool>>,
    /// False for frames left unaligned (no pose available).
    pub aligned: Vec<bool>,
    pub original_poses: Vec<Option<RigidTransform>>,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn valid_count(&self, index: usize) -> usize {
        self.validity_masks[index].iter().filter(|&&m| m).count()
    }

    /// Session log flagged aligned, with the original poses as metadata.
    pub fn to_session_log(&self, mut header: SessionHeader) -> Result<SessionLog> {
        header.aligned = true;
        header.original_poses = Some(self.original_poses.clone());
        let messages = self.frames.iter().map(Message::frame).collect::<Result<_, _>>()?;
        Ok(SessionLog { header, messages })
    }

    /// Rebuilds an aligned sequence from a log written by
    /// [`AlignedSequence::to_session_log`]; masks are recomputed from the
    /// stored original poses.
    pub fn from_session_log(log: &SessionLog) -> Result<Self> {
        if !log.header.aligned {
            return Err(Error::InvalidInput("session is not flagged aligned".into()));
        }
        let frames: Vec<VolumeFrame> = log.frames().collect();
        let original_poses = log
            .header
            .original_poses
            .clone()
            .ok_or_else(|| Error::InvalidInput("aligned session lacks original poses".into()))?;
        if original_poses.len() != frames.len() {
            return Err(Error::InvalidInput("original pose count does not match frames".into()));
        }
        let ref_pose = frames
            .first()
            .and_then(|f| f.pose)
            .ok_or_else(|| Error::InvalidInput("aligned frames carry no reference pose".into()))?;
        let reference_index = original_poses.iter().position(|p| *p == Some(ref_pose)).unwrap_or(0);
        let mut masks = Vec::with_capacity(frames.len());
        let mut aligned = Vec::with_capacity(frames.len());
        for (frame, orig) in frames.iter().zip(&original_poses) {
            let g = frame.geometry();
            match orig {
                Some(p) => {
                    masks.push(validity_mask(p, &g, &ref_pose, &g));
                    aligned.push(true);
                }
                None => {
                    masks.push(vec![false; g.len()]);
                    aligned.push(false);
                }
            }
        }
        Ok(Self {
            reference_index,
            frames,
            validity_masks: masks,
            aligned,
            original_poses,
        })
    }
}

pub(crate) fn interpolated_pose(frames: &[VolumeFrame], index: usize) -> Option<RigidTransform> {
    let before = frames[..index].iter().rev().find(|f| f.pose.is_some());
    let after = frames[index + 1..].iter().find(|f| f.pose.is_some());
    let t = frames[index].timestamp;
    match (before, after) {
        (Some(a), Some(b)) => {
            let (pa, pb) = (a.pose?, b.pose?);
            let span = b.timestamp - a.timestamp;
            let s = if span > 0.0 { (t - a.timestamp) / span } else { 0.0 };
            Some(pa.interpolate(&pb, s))
        }
        (Some(a), None) => a.pose,
        (None, Some(b)) => b.pose,
        (None, None) => None,
    }
}

/// Resamples every frame onto the grid and pose of `frames[reference_index]`.
pub fn realign_sequence(frames: &[VolumeFrame], reference_index: usize, policy: PoseGapPolicy) -> Result<AlignedSequence> {
    let reference = frames
        .get(reference_index)
        .ok_or_else(|| Error::InvalidInput(format!("reference index {reference_index} out of range")))?;
    let ref_pose = reference
        .pose
        .ok_or_else(|| Error::InvalidInput("reference frame has no pose".into()))?;
    let rg = check_frame(reference)?;
    let mut out = AlignedSequence {
        reference_index,
        frames: Vec::with_capacity(frames.len()),
        validity_masks: Vec::with_capacity(frames.len()),
        aligned: Vec::with_capacity(frames.len()),
        original_poses: frames.iter().map(|f| f.pose).collect(),
    };
    for (i, frame) in frames.iter().enumerate() {
        if i == reference_index {
            out.frames.push(frame.clone());
            out.validity_masks.push(vec![true; rg.len()]);
            out.aligned.push(true);
            continue;
        }
        let pose = match (frame.pose, policy) {
            (Some(p), _) => Some(p),
            (None, PoseGapPolicy::Interpolate) => interpolated_pose(frames, i),
            (None, PoseGapPolicy::Exclude) => None,
        };
        match pose {
            Some(p) => {
                let src = VolumeFrame {
                    pose: Some(p),
                    ..frame.clone()
                };
                let (f, m) = realign_frame(&src, &ref_pose, rg.dims, rg.voxel_size)?;
                out.frames.push(f);
                out.validity_masks.push(m);
                out.aligned.push(true);
            }
            None => {
                log::debug!("frame {i} at {} s has no pose; left unaligned", frame.timestamp);
                out.frames.push(frame.clone());
                out.validity_masks.push(vec![false; frame.voxels.len()]);
                out.aligned.push(false);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motionsim::{MotionModel, MotionTrajectory};
    use crate::phantom::{render_frame, PhantomSpec, RenderSettings};
    use crate::quant::{extract_tic, extract_tic_masked, Voi};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, dims: [usize; 3], pose: RigidTransform) -> VolumeFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        VolumeFrame {
            timestamp: 1.0,
            pose: Some(pose),
            dims,
            voxel_size: [1.0; 3],
            voxels: (0..n).map(|_| rng.random()).collect(),
        }
    }

    #[test]
    fn index_subset_matches_full_resample() {
        let dims = [12, 10, 9];
        let src_pose = RigidTransform::from_rotation_vector(Vector3::new(0.05, -0.1, 0.2), Vector3::new(0.7, -1.3, 0.4));
        let src = random_frame(5, dims, src_pose);
        let dst = GridGeometry {
            dims,
            voxel_size: [1.0; 3],
        };
        let (full, mask) = realign_frame(&src, &RigidTransform::identity(), dims, [1.0; 3]).unwrap();
        let idx: Vec<usize> = (0..dst.len()).step_by(7).collect();
        let sub = realign_indices(&src, &RigidTransform::identity(), &dst, &idx).unwrap();
        for (&i, v) in idx.iter().zip(&sub) {
            assert_eq!(*v, mask[i].then_some(full.voxels[i]));
        }
    }

    #[test]
    fn identical_pose_is_copy() {
        let pose = RigidTransform::from_axis_angle(Vector3::new(0.2, 1.0, 0.0), 0.4, Vector3::new(5.0, 1.0, 2.0));
        let f = random_frame(1, [10, 9, 8], pose);
        let (out, mask) = realign_frame(&f, &pose, f.dims, f.voxel_size).unwrap();
        assert_eq!(out.voxels, f.voxels);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_shift_matches_direct_indexing() {
        let reference = RigidTransform::identity();
        let dims = [12, 10, 9];
        // source probe sits 2 mm further along +x: reference voxel i sees source voxel i - 2
        let src = random_frame(2, dims, RigidTransform::from_translation(2.0, 0.0, 0.0));
        let (out, mask) = realign_frame(&src, &reference, dims, [1.0; 3]).unwrap();
        let g = GridGeometry { dims, voxel_size: [1.0; 3] };
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = g.index(i, j, k);
                    if i >= 2 {
                        assert!(mask[idx]);
                        assert_eq!(out.voxels[idx], src.get(i - 2, j, k));
                    } else {
                        assert!(!mask[idx]);
                        assert_eq!(out.voxels[idx], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn full_turn_is_identity() {
        let dims = [11, 11, 11];
        for axis in [Vector3::x(), Vector3::y(), Vector3::new(1.0, 2.0, -0.5)] {
            let pose = RigidTransform::from_axis_angle(axis, std::f64::consts::TAU, Vector3::zeros());
            let f = random_frame(3, dims, pose);
            let (out, mask) = realign_frame(&f, &RigidTransform::identity(), dims, [1.0; 3]).unwrap();
            assert!(mask.iter().all(|&m| m));
            assert!(out.voxels.iter().zip(&f.voxels).all(|(a, b)| a.abs_diff(*b) <= 1));
        }
    }

    #[test]
    fn missing_pose() {
        let mut f = random_frame(4, [4, 4, 4], RigidTransform::identity());
        f.pose = None;
        assert!(realign_frame(&f, &RigidTransform::identity(), f.dims, f.voxel_size).is_err());
        let frames = vec![random_frame(5, [4, 4, 4], RigidTransform::identity()), f.clone()];
        let seq = realign_sequence(&frames, 0, PoseGapPolicy::Exclude).unwrap();
        assert_eq!(seq.aligned, vec![true, false]);
        assert_eq!(seq.valid_count(1), 0);
        assert!(realign_sequence(&frames, 1, PoseGapPolicy::Exclude).is_err());
    }

    #[test]
    fn interpolated_gap_pose() {
        let dims = [8, 8, 8];
        let mut frames: Vec<_> = (0..3)
            .map(|i| {
                let mut f = random_frame(6, dims, RigidTransform::from_translation(i as f64 * 2.0, 0.0, 0.0));
                f.timestamp = i as f64;
                f
            })
            .collect();
        frames[1].pose = None;
        let seq = realign_sequence(&frames, 0, PoseGapPolicy::Interpolate).unwrap();
        assert!(seq.aligned.iter().all(|&a| a));
        // interpolated pose is +2 mm: exactly two voxel columns fall out of field
        assert_eq!(seq.valid_count(1), 6 * 8 * 8);
    }

    #[test]
    fn identical_poses_leave_sequence_unchanged() {
        let pose = RigidTransform::from_translation(1.0, 2.0, 3.0);
        let frames: Vec<_> = (0..4).map(|s| random_frame(s, [6, 6, 6], pose)).collect();
        let seq = realign_sequence(&frames, 2, PoseGapPolicy::Exclude).unwrap();
        assert_eq!(seq.frames, frames);
        let single = realign_sequence(&frames[..1], 0, PoseGapPolicy::Exclude).unwrap();
        assert_eq!(single.frames, frames[..1].to_vec());
    }

    #[test]
    fn aligned_session_round_trip() {
        let dims = [6, 6, 6];
        let frames: Vec<_> = (0..3)
            .map(|i| {
                let mut f = random_frame(i, dims, RigidTransform::from_translation(0.5 * i as f64, 0.0, 0.0));
                f.timestamp = i as f64;
                f
            })
            .collect();
        let seq = realign_sequence(&frames, 0, PoseGapPolicy::Exclude).unwrap();
        let log = seq.to_session_log(SessionHeader::empty()).unwrap();
        let back = AlignedSequence::from_session_log(&SessionLog::from_bytes(&log.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert_eq!(back.validity_masks, seq.validity_masks);
        assert_eq!(back.original_poses, seq.original_poses);
    }

    fn relative_rms(a: &[f64], oracle: &[f64]) -> f64 {
        let mse = a.iter().zip(oracle).map(|(x, o)| (x - o).powi(2)).sum::<f64>() / a.len() as f64;
        mse.sqrt() / (oracle.iter().sum::<f64>() / oracle.len() as f64)
    }

    #[test]
    fn breathing_motion_tic_recovered() {
        let spec = PhantomSpec::default();
        let (ph, kin) = spec.build().unwrap();
        let settings = RenderSettings {
            noise_sd: 0.05,
            ..Default::default()
        };
        let (center, radii) = spec.lesion().unwrap();
        let voi = Voi::ellipsoid(center, radii.map(|r| r - 1.0));
        let mut motion = MotionTrajectory::new(MotionModel::breathing(2.0, 4.7, 1)).unwrap();
        let (mut moving, mut still) = (Vec::new(), Vec::new());
        for i in 0..60 {
            let t = 2.0 * i as f64;
            let pose = motion.perturbation(t).unwrap();
            moving.push(render_frame(&ph, &kin, t, &pose, &settings, &[], i).unwrap());
            still.push(render_frame(&ph, &kin, t, &RigidTransform::identity(), &settings, &[], i).unwrap());
        }
        let oracle = extract_tic(&still, &voi, 60.0).unwrap();
        let raw = extract_tic(&moving, &voi, 60.0).unwrap();
        let seq = realign_sequence(&moving, 0, PoseGapPolicy::Exclude).unwrap();
        let aligned = extract_tic_masked(&seq.frames, Some(&seq.validity_masks), &voi, 60.0).unwrap();
        let e_aligned = relative_rms(&aligned.values, &oracle.values);
        let e_raw = relative_rms(&raw.values, &oracle.values);
        assert!(e_aligned < 0.05 && e_raw > e_aligned, "aligned {e_aligned} raw {e_raw}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mask_bounded_and_realign_idempotent(
            seed in 0u64..1000,
            tx in -3.0f64..3.0, ty in -3.0f64..3.0, angle in -0.3f64..0.3,
        ) {
            let dims = [9, 8, 7];
            let pose = RigidTransform::from_axis_angle(Vector3::z(), angle, Vector3::new(tx, ty, 0.0));
            let src = random_frame(seed, dims, pose);
            let reference = RigidTransform::identity();
            let (once, mask) = realign_frame(&src, &reference, dims, [1.0; 3]).unwrap();
            prop_assert!(mask.iter().filter(|&&m| m).count() <= once.voxels.len());
            let (twice, _) = realign_frame(&once, &reference, dims, [1.0; 3]).unwrap();
            prop_assert!(once.voxels.iter().zip(&twice.voxels).all(|(a, b)| a.abs_diff(*b) <= 1));
        }
    }
}
