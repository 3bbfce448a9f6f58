//! Synthetic 4D contrast phantom.
//!
//! A labelled voxel grid (background, parenchyma, lesion, vessel) with
//! per-tissue infusion and disruption-replenishment kinetics, rendered to
//! log-compressed 8-bit volumes at an arbitrary probe pose.
//!
//! Grid convention used throughout the crate: voxel `(i, j, k)` has its
//! centre at `(i·sx, j·sy, k·sz)` mm in the grid's local frame and is
//! stored at `i + nx·(j + ny·k)`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;
/// Smallest admissible lesion diameter, mm.
pub const MIN_LESION_DIAMETER_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Parenchyma = 1,
    Lesion = 2,
    Vessel = 3,
}

impl Tissue {
    pub const ALL: [Tissue; 4] = [
        Tissue::Background,
        Tissue::Parenchyma,
        Tissue::Lesion,
        Tissue::Vessel,
    ];
}

impl TryFrom<u8> for Tissue {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        Tissue::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown tissue id {id}")))
    }
}

/// Dimensions and spacing of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
}

impl GridGeometry {
    pub fn cubic(n: usize, voxel_mm: f64) -> Self {
        Self {
            dims: [n; 3],
            voxel_size: [voxel_mm; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Local position (mm) of a voxel centre.
    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            i as f64 * self.voxel_size[0],
            j as f64 * self.voxel_size[1],
            k as f64 * self.voxel_size[2],
        )
    }

    /// Local position of the grid centre.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|a, _| (self.dims[a] as f64 - 1.0) / 2.0 * self.voxel_size[a])
    }

    /// Nearest voxel to a local position, if inside the grid.
    #[inline]
    pub fn nearest(&self, p: &Vector3<f64>) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let c = (p[a] / self.voxel_size[a] + 0.5).floor();
            if !(c >= 0.0 && c < self.dims[a] as f64) {
                return None;
            }
            idx[a] = c as usize;
        }
        Some(self.index(idx[0], idx[1], idx[2]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("grid dims {:?} must be positive", self.dims)));
        }
        if self.voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!(
                "voxel size {:?} must be positive",
                self.voxel_size
            )));
        }
        Ok(())
    }
}

/// A timestamped volume with its acquisition pose.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFrame {
    /// Seconds since session start.
    pub timestamp: f64,
    /// Image → world pose; `None` when tracking dropped out.
    pub pose: Option<RigidTransform>,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub voxels: Vec<u8>,
}

impl VolumeFrame {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            dims: self.dims,
            voxel_size: self.voxel_size,
        }
    }

    pub fn filled(timestamp: f64, pose: Option<RigidTransform>, geometry: GridGeometry, code: u8) -> Self {
        Self {
            timestamp,
            pose,
            dims: geometry.dims,
            voxel_size: geometry.voxel_size,
            voxels: vec![code; geometry.len()],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.voxels[i + self.dims[0] * (j + self.dims[1] * k)]
    }
}

/// Infusion and replenishment kinetics of one tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueKinetics {
    /// Steady-state linear intensity, in (0, 1].
    pub steady_level: f64,
    /// Infusion wash-in time constant, s.
    pub infusion_tau: f64,
    /// Replenishment rate, 1/s.
    pub replenishment_beta: f64,
    /// Refill plateau for a flash at steady state; the plateau after any
    /// flash is `pre_flash_level · replenishment_a / steady_level`.
    pub replenishment_a: f64,
    /// Fraction of contrast destroyed by a flash.
    #[serde(default = "one")]
    pub destruction_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl TissueKinetics {
    /// Full destruction, refilling to the pre-flash level.
    pub fn new(steady_level: f64, infusion_tau: f64, replenishment_beta: f64) -> Self {
        Self {
            steady_level,
            infusion_tau,
            replenishment_beta,
            replenishment_a: steady_level,
            destruction_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.steady_level,
            self.infusion_tau,
            self.replenishment_beta,
            self.replenishment_a,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("kinetic parameters must be positive: {self:?}")));
        }
        if self.steady_level > 1.0 {
            return Err(Error::Config("steady_level must be <= 1".into()));
        }
        if self.replenishment_a > self.steady_level {
            return Err(Error::Config("replenishment_a must not exceed steady_level".into()));
        }
        if !(0.0..=1.0).contains(&self.destruction_fraction) {
            return Err(Error::Config("destruction_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Intensity at `t` given flash times sorted ascending.
    fn evaluate(&self, t: f64, sorted_flashes: &[f64]) -> f64 {
        let infusion = |t: f64| self.steady_level * (1.0 - (-t / self.infusion_tau).exp());
        let refill = |t: f64, t_f: f64, level: f64| {
            let plateau = level * self.replenishment_a / self.steady_level;
            let residual = level * (1.0 - self.destruction_fraction);
            plateau - (plateau - residual) * (-self.replenishment_beta * (t - t_f)).exp()
        };
        let mut last: Option<(f64, f64)> = None;
        for &t_f in sorted_flashes.iter().take_while(|&&f| f <= t) {
            let pre = match last {
                None => infusion(t_f),
                Some((prev_f, level)) => refill(t_f, prev_f, level),
            };
            last = Some((t_f, pre));
        }
        match last {
            None => infusion(t),
            Some((t_f, level)) => refill(t, t_f, level),
        }
    }
}

/// Kinetics table keyed by tissue. Background carries no contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kinetics {
    pub tissues: BTreeMap<Tissue, TissueKinetics>,
}

impl Default for Kinetics {
    /// Vessel fastest, then parenchyma, then lesion.
    fn default() -> Self {
        let mut tissues = BTreeMap::new();
        tissues.insert(Tissue::Vessel, TissueKinetics::new(0.9, 20.0, 1.0));
        tissues.insert(Tissue::Parenchyma, TissueKinetics::new(0.25, 60.0, 0.25));
        tissues.insert(Tissue::Lesion, TissueKinetics::new(0.6, 90.0, 0.15));
        Self { tissues }
    }
}

impl Kinetics {
    pub fn get(&self, tissue: Tissue) -> Option<&TissueKinetics> {
        self.tissues.get(&tissue)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tissues.contains_key(&Tissue::Background) {
            return Err(Error::Config("background carries no kinetics".into()));
        }
        self.tissues.values().try_for_each(TissueKinetics::validate)
    }

    /// Linear intensity of every tissue at `t`, indexed by tissue id.
    pub fn intensities(&self, t: f64, flash_times: &[f64]) -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for (tissue, slot) in Tissue::ALL.iter().zip(out.iter_mut()) {
            if *tissue != Tissue::Background && self.tissues.contains_key(tissue) {
                *slot = intensity_at(self, *tissue, t, flash_times)?;
            }
        }
        Ok(out)
    }
}

fn sorted(flash_times: &[f64]) -> Vec<f64> {
    let mut f: Vec<f64> = flash_times.iter().copied().filter(|v| v.is_finite()).collect();
    f.sort_by(f64::total_cmp);
    f
}

/// Linear contrast intensity of `tissue` at time `t`.
///
/// Infusion follows `C_ss·(1 − e^(−t/τ))`. A flash at `t_f` zeroes the
/// signal, which then refills as `level·(1 − e^(−β(t − t_f)))` where `level`
/// is the value just before the flash.
pub fn intensity_at(kinetics: &Kinetics, tissue: Tissue, t: f64, flash_times: &[f64]) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time {t} must be >= 0")));
    }
    if tissue == Tissue::Background {
        return Ok(0.0);
    }
    let k = kinetics
        .get(tissue)
        .ok_or_else(|| Error::Domain(format!("no kinetics for tissue {tissue:?}")))?;
    Ok(k.evaluate(t, &sorted(flash_times)))
}

/// Log compression of a linear intensity to an 8-bit code:
/// `round(255·clamp((20·log10(I) + D)/D, 0, 1))`, rounding half up.
#[inline]
pub fn log_compress(intensity: f64, dynamic_range_db: f64) -> u8 {
    if !(intensity > 0.0) {
        return 0;
    }
    let x = ((20.0 * intensity.log10() + dynamic_range_db) / dynamic_range_db).clamp(0.0, 1.0);
    (255.0 * x + 0.5).floor() as u8
}

/// Geometric primitive painted into the label grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Ellipsoid {
        tissue: Tissue,
        center: [f64; 3],
        radii: [f64; 3],
    },
    /// Capsule around a segment.
    Tube {
        tissue: Tissue,
        start: [f64; 3],
        end: [f64; 3],
        radius: f64,
    },
}

impl Primitive {
    fn tissue(&self) -> Tissue {
        match self {
            Primitive::Ellipsoid { tissue, .. } | Primitive::Tube { tissue, .. } => *tissue,
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Ellipsoid { center, radii, .. } => {
                (0..3)
                    .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Primitive::Tube {
                start, end, radius, ..
            } => {
                let (a, b) = (Vector3::from(*start), Vector3::from(*end));
                let ab = b - a;
                let len2 = ab.norm_squared();
                let s = if len2 > 0.0 {
                    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p - (a + ab * s)).norm() <= *radius
            }
        }
    }
}

/// Serializable phantom description: grid, primitives painted in order
/// over `fill`, and the kinetics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub geometry: GridGeometry,
    #[serde(default)]
    pub world_pose: RigidTransform,
    #[serde(default = "background")]
    pub fill: Tissue,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub kinetics: Kinetics,
}

fn background() -> Tissue {
    Tissue::Background
}

impl Default for PhantomSpec {
    /// 64³ grid at 1 mm: liver parenchyma, a 16 mm lesion and a portal-vein tube.
    fn default() -> Self {
        PhantomSpec {
            geometry: GridGeometry::cubic(64, 1.0),
            world_pose: RigidTransform::identity(),
            fill: Tissue::Background,
            primitives: vec![
                Primitive::Ellipsoid {
                    tissue: Tissue::Parenchyma,
                    center: [32.0, 32.0, 34.0],
                    radii: [36.0, 34.0, 32.0],
                },
                Primitive::Tube {
                    tissue: Tissue::Vessel,
                    start: [6.0, 50.0, 8.0],
                    end: [58.0, 50.0, 58.0],
                    radius: 3.5,
                },
                Primitive::Ellipsoid {
                    tissue: Tissue::Lesion,
                    center: [31.5, 30.0, 31.5],
                    radii: [8.0, 8.0, 7.0],
                },
            ],
            kinetics: Kinetics::default(),
        }
    }
}

impl PhantomSpec {
    /// The lesion ellipsoid (last one painted), if any.
    pub fn lesion(&self) -> Option<([f64; 3], [f64; 3])> {
        self.primitives.iter().rev().find_map(|p| match p {
            Primitive::Ellipsoid {
                tissue: Tissue::Lesion,
                center,
                radii,
            } => Some((*center, *radii)),
            _ => None,
        })
    }

    pub fn build(&self) -> Result<(Phantom, Kinetics)> {
        self.geometry.validate()?;
        self.kinetics.validate()?;
        self.world_pose.validate()?;
        for p in &self.primitives {
            match p {
                Primitive::Ellipsoid { radii, .. } if radii.iter().any(|r| !(*r > 0.0)) => {
                    return Err(Error::Config("ellipsoid radii must be positive".into()))
                }
                Primitive::Tube { radius, .. } if !(*radius > 0.0) => {
                    return Err(Error::Config("tube radius must be positive".into()))
                }
                _ => {}
            }
        }
        let g = self.geometry;
        let mut labels = vec![self.fill; g.len()];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let p = g.position(i, j, k);
                    if let Some(prim) = self.primitives.iter().rev().find(|prim| prim.contains(&p)) {
                        labels[g.index(i, j, k)] = prim.tissue();
                    }
                }
            }
        }
        let phantom = Phantom {
            geometry: g,
            labels,
            world_pose: self.world_pose,
        };
        phantom.validate_lesion(self)?;
        Ok((phantom, self.kinetics.clone()))
    }
}

/// Labelled voxel grid placed in the world.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub geometry: GridGeometry,
    pub labels: Vec<Tissue>,
    /// Grid → world.
    pub world_pose: RigidTransform,
}

impl Phantom {
    fn validate_lesion(&self, spec: &PhantomSpec) -> Result<()> {
        let (_, radii) = spec
            .lesion()
            .ok_or_else(|| Error::Config("phantom has no lesion ellipsoid".into()))?;
        let diameter = 2.0 * radii.iter().copied().fold(f64::INFINITY, f64::min);
        if diameter < MIN_LESION_DIAMETER_MM {
            return Err(Error::Config(format!(
                "lesion diameter {diameter} mm is below {MIN_LESION_DIAMETER_MM} mm"
            )));
        }
        if self.count(Tissue::Lesion) == 0 {
            return Err(Error::Config("lesion covers no voxels".into()));
        }
        Ok(())
    }

    pub fn count(&self, tissue: Tissue) -> usize {
        self.labels.iter().filter(|&&t| t == tissue).count()
    }

    /// Tissue at a world position (nearest neighbour); background outside.
    pub fn tissue_at_world(&self, p: &Vector3<f64>) -> Tissue {
        let local = self.world_pose.inverse().transform_point(p);
        self.geometry
            .nearest(&local)
            .map_or(Tissue::Background, |i| self.labels[i])
    }
}

/// Image grid and display settings for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub geometry: GridGeometry,
    pub dynamic_range_db: f64,
    /// SD of the multiplicative speckle proxy (fraction of intensity).
    pub noise_sd: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            geometry: GridGeometry::cubic(64, 1.0),
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
            noise_sd: 0.0,
        }
    }
}

/// Code lookup by comparison against the intensities at which
/// [`log_compress`] steps, starting from a nearby code.
struct Compressor {
    /// `steps[c]`: lowest intensity mapped to code `c` (`steps[0]` unused).
    steps: [f64; 256],
    dynamic_range_db: f64,
}

impl Compressor {
    fn new(dynamic_range_db: f64) -> Self {
        let mut steps = [0.0; 256];
        for (c, s) in steps.iter_mut().enumerate().skip(1) {
            let x = (c as f64 - 0.5) / 255.0;
            *s = 10f64.powf((x - 1.0) * dynamic_range_db / 20.0);
        }
        Self { steps, dynamic_range_db }
    }

    #[inline]
    fn code_near(&self, intensity: f64, start: u8) -> u8 {
        if !(intensity > 0.0) {
            return 0;
        }
        let mut c = start as usize;
        while c < 255 && intensity >= self.steps[c + 1] {
            c += 1;
        }
        while c > 0 && intensity < self.steps[c] {
            c -= 1;
        }
        // the table and the logarithm may disagree right at a step
        let near = |k: usize| k > 0 && (intensity - self.steps[k]).abs() <= 1e-12 * self.steps[k];
        if near(c) || (c < 255 && near(c + 1)) {
            return log_compress(intensity, self.dynamic_range_db);
        }
        c as u8
    }
}

const SPECKLE_BITS: u32 = 11;

/// Midpoint quantiles of N(0,1) on `2^SPECKLE_BITS` equiprobable bins.
fn normal_quantiles() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = 1usize << SPECKLE_BITS;
        let normal = Normal::standard();
        (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect()
    })
}

/// Code of `level·(1 + noise_sd·q)` for every quantile `q`.
fn speckle_codes(level: f64, noise_sd: f64, dynamic_range_db: f64) -> Vec<u8> {
    let compressor = Compressor::new(dynamic_range_db);
    let mut code = log_compress(level, dynamic_range_db);
    normal_quantiles()
        .iter()
        .map(|q| {
            code = compressor.code_near(level * (1.0 + noise_sd * q), code);
            code
        })
        .collect()
}

/// Renders the phantom as seen from an image grid at `pose` (image → world).
///
/// Each image voxel is mapped into the phantom (nearest neighbour), given
/// its tissue intensity at `t`, multiplied by `1 + noise_sd·n` and
/// log-compressed. `n` is standard normal, drawn as one of 2048
/// equiprobable quantiles. Deterministic for a given `seed`.
pub fn render_frame(
    phantom: &Phantom,
    kinetics: &Kinetics,
    t: f64,
    pose: &RigidTransform,
    settings: &RenderSettings,
    flash_times: &[f64],
    seed: u64,
) -> Result<VolumeFrame> {
    settings.geometry.validate()?;
    if !(settings.noise_sd >= 0.0) {
        return Err(Error::InvalidInput("noise_sd must be >= 0".into()));
    }
    let levels = kinetics.intensities(t, flash_times)?;
    let d = settings.dynamic_range_db;
    let codes: [u8; 4] = levels.map(|l| log_compress(l, d));

    let img = settings.geometry;
    let ph = phantom.geometry;
    // image voxel index → phantom continuous index (affine)
    let to_phantom = phantom.world_pose.inverse() * *pose;
    let r = to_phantom.rotation_matrix();
    let t0 = to_phantom.translation();
    let inv_ph = Vector3::from_fn(|a, _| 1.0 / ph.voxel_size[a]);
    let col = |a: usize| -> Vector3<f64> { r.column(a).component_mul(&inv_ph) * img.voxel_size[a] };
    let (step_i, step_j, step_k) = (col(0), col(1), col(2));
    let origin = t0.component_mul(&inv_ph);
    let limits = ph.dims.map(|n| n as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speckled: [Option<Vec<u8>>; 4] = std::array::from_fn(|tissue| {
        (settings.noise_sd > 0.0 && levels[tissue] > 0.0).then(|| speckle_codes(levels[tissue], settings.noise_sd, d))
    });
    let mut voxels = Vec::with_capacity(img.len());
    for k in 0..img.dims[2] {
        let pk = origin + step_k * k as f64;
        for j in 0..img.dims[1] {
            let mut p = pk + step_j * j as f64;
            for _ in 0..img.dims[0] {
                // round half up; truncation equals floor once x + 0.5 >= 0
                let (x, y, z) = (p.x + 0.5, p.y + 0.5, p.z + 0.5);
                let tissue = if x >= 0.0 && y >= 0.0 && z >= 0.0 && x < limits[0] && y < limits[1] && z < limits[2] {
                    phantom.labels[ph.index(x as usize, y as usize, z as usize)] as usize
                } else {
                    0
                };
                let code = match &speckled[tissue] {
                    Some(table) => table[(rng.next_u32() >> (32 - SPECKLE_BITS)) as usize],
                    None => codes[tissue],
                };
                voxels.push(code);
                p += step_i;
            }
        }
    }
    Ok(VolumeFrame {
        timestamp: t,
        pose: Some(*pose),
        dims: img.dims,
        voxel_size: img.voxel_size,
        voxels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::quant::linearize;

    fn kin() -> Kinetics {
        Kinetics::default()
    }

    #[test]
    fn stepped_compression_matches_log_compress() {
        for d in [40.0, 60.0] {
            let c = Compressor::new(d);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..100_000 {
                let i = 10f64.powf(rng.random_range(-4.0..0.5));
                let start = rng.random_range(0..=255u8);
                assert_eq!(c.code_near(i, start), log_compress(i, d), "I = {i}");
            }
            for k in 1..256 {
                let s = c.steps[k];
                assert_eq!(c.code_near(s, 0), log_compress(s, d));
            }
        }
    }

    #[test]
    fn infusion_at_tau() {
        let k = kin();
        let lesion = k.get(Tissue::Lesion).unwrap();
        let v = intensity_at(&k, Tissue::Lesion, lesion.infusion_tau, &[]).unwrap();
        let expected = lesion.steady_level * (1.0 - (-1.0f64).exp());
        assert!((v - expected).abs() < 1e-12);
        assert!((v / lesion.steady_level - 0.632).abs() < 1e-3);
    }

    #[test]
    fn flash_zeroes_then_refills() {
        let k = kin();
        let lesion = *k.get(Tissue::Lesion).unwrap();
        let t_f = 200.0;
        let level = intensity_at(&k, Tissue::Lesion, t_f - 1e-9, &[]).unwrap();
        assert_eq!(intensity_at(&k, Tissue::Lesion, t_f, &[t_f]).unwrap(), 0.0);
        let t = t_f + 3.0 / lesion.replenishment_beta;
        let v = intensity_at(&k, Tissue::Lesion, t, &[t_f]).unwrap();
        assert!((v - level * (1.0 - (-3.0f64).exp())).abs() < 1e-9);
        assert!((v / level - 0.950).abs() < 1e-3);
    }

    #[test]
    fn second_flash_uses_pre_flash_value() {
        let k = kin();
        let f1 = 100.0;
        let f2 = 110.0;
        let pre = intensity_at(&k, Tissue::Lesion, f2 - 1e-9, &[f1]).unwrap();
        let after = intensity_at(&k, Tissue::Lesion, f2 + 5.0, &[f2, f1]).unwrap();
        let beta = k.get(Tissue::Lesion).unwrap().replenishment_beta;
        assert!((after - pre * (1.0 - (-beta * 5.0).exp())).abs() < 1e-9);
    }

    #[test]
    fn background_and_unknown_tissue() {
        let mut k = kin();
        assert_eq!(intensity_at(&k, Tissue::Background, 10.0, &[]).unwrap(), 0.0);
        k.tissues.remove(&Tissue::Vessel);
        assert!(matches!(intensity_at(&k, Tissue::Vessel, 1.0, &[]), Err(Error::Domain(_))));
        assert!(matches!(Tissue::try_from(9), Err(Error::Domain(_))));
        assert!(matches!(intensity_at(&kin(), Tissue::Lesion, -1.0, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn log_compress_anchor_points() {
        assert_eq!(log_compress(1.0, 60.0), 255);
        assert_eq!(log_compress(1e-3, 60.0), 0);
        assert_eq!(log_compress(10f64.powf(-30.0 / 20.0), 60.0), 128);
        assert_eq!(log_compress(0.0, 60.0), 0);
        assert_eq!(log_compress(-1.0, 60.0), 0);
        assert_eq!(log_compress(5.0, 60.0), 255);
    }

    #[test]
    fn default_phantom_is_valid() {
        let (ph, _) = PhantomSpec::default().build().unwrap();
        assert!(ph.count(Tissue::Lesion) > 500);
        assert!(ph.count(Tissue::Vessel) > 0);
        assert!(ph.count(Tissue::Parenchyma) > ph.count(Tissue::Lesion));
        assert_eq!(ph.labels.len(), 64 * 64 * 64);
    }

    #[test]
    fn small_lesion_rejected() {
        let mut spec = PhantomSpec::default();
        spec.primitives.retain(|p| !matches!(p, Primitive::Ellipsoid { tissue: Tissue::Lesion, .. }));
        assert!(spec.build().is_err());
        spec.primitives.push(Primitive::Ellipsoid {
            tissue: Tissue::Lesion,
            center: [32.0; 3],
            radii: [4.0, 8.0, 8.0],
        });
        assert!(matches!(spec.build(), Err(Error::Config(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PhantomSpec::default();
        let json = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn uniform_tissue_renders_uniform_volume() {
        let spec = PhantomSpec {
            geometry: GridGeometry::cubic(16, 1.0),
            world_pose: RigidTransform::identity(),
            fill: Tissue::Lesion,
            primitives: vec![Primitive::Ellipsoid {
                tissue: Tissue::Lesion,
                center: [8.0; 3],
                radii: [6.0; 3],
            }],
            kinetics: kin(),
        };
        let (ph, k) = spec.build().unwrap();
        let settings = RenderSettings {
            geometry: GridGeometry::cubic(16, 1.0),
            ..Default::default()
        };
        let frame = render_frame(&ph, &k, 1e6, &RigidTransform::identity(), &settings, &[], 1).unwrap();
        let expected = log_compress(k.get(Tissue::Lesion).unwrap().steady_level, 60.0);
        assert!(frame.voxels.iter().all(|&v| v == expected));
    }

    #[test]
    fn rendering_is_deterministic() {
        let (ph, k) = PhantomSpec::default().build().unwrap();
        let settings = RenderSettings {
            noise_sd: 0.1,
            ..Default::default()
        };
        let pose = RigidTransform::from_translation(0.3, -1.2, 0.7);
        let a = render_frame(&ph, &k, 50.0, &pose, &settings, &[], 77).unwrap();
        let b = render_frame(&ph, &k, 50.0, &pose, &settings, &[], 77).unwrap();
        assert_eq!(a, b);
        let c = render_frame(&ph, &k, 50.0, &pose, &settings, &[], 78).unwrap();
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn outside_phantom_is_background() {
        let (ph, k) = PhantomSpec::default().build().unwrap();
        let far = RigidTransform::from_translation(1000.0, 0.0, 0.0);
        let f = render_frame(&ph, &k, 100.0, &far, &RenderSettings::default(), &[], 0).unwrap();
        assert!(f.voxels.iter().all(|&v| v == 0));
    }

    #[test]
    fn lesion_mean_at_tau_matches_analytic() {
        let (ph, k) = PhantomSpec::default().build().unwrap();
        let lesion = *k.get(Tissue::Lesion).unwrap();
        let settings = RenderSettings {
            noise_sd: 0.05,
            ..Default::default()
        };
        let f = render_frame(&ph, &k, lesion.infusion_tau, &RigidTransform::identity(), &settings, &[], 5).unwrap();
        let (sum, n) = f
            .voxels
            .iter()
            .zip(&ph.labels)
            .filter(|(_, &t)| t == Tissue::Lesion)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + linearize(v, 60.0), n + 1));
        let mean = sum / n as f64;
        let expected = 0.632 * lesion.steady_level;
        assert!((mean - expected).abs() / expected < 0.02, "mean {mean} vs {expected}");
    }

    #[test]
    fn flash_resets_lesion_signal() {
        let (ph, k) = PhantomSpec::default().build().unwrap();
        let settings = RenderSettings {
            noise_sd: 0.05,
            ..Default::default()
        };
        let id = RigidTransform::identity();
        let lesion_mean = |f: &VolumeFrame| {
            let (s, n) = f
                .voxels
                .iter()
                .zip(&ph.labels)
                .filter(|(_, &t)| t == Tissue::Lesion)
                .fold((0.0, 0usize), |(s, n), (&v, _)| (s + linearize(v, 60.0), n + 1));
            s / n as f64
        };
        let before = render_frame(&ph, &k, 199.0, &id, &settings, &[200.0], 1).unwrap();
        let after = render_frame(&ph, &k, 200.0, &id, &settings, &[200.0], 2).unwrap();
        assert!(lesion_mean(&after) < 0.05 * lesion_mean(&before));
    }
}
