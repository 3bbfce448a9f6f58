//! Perfusion quantification: linearization, VOI time-intensity curves,
//! steady-state detection and mono-exponential replenishment fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{GridGeometry, VolumeFrame};

/// Inverse of the scanner's log compression: `10^((v/255·D − D)/20)`.
#[inline]
pub fn linearize(code: u8, dynamic_range_db: f64) -> f64 {
    let d = dynamic_range_db;
    10f64.powf((code as f64 / 255.0 * d - d) / 20.0)
}

/// All 256 linearized values for one dynamic range.
pub fn linearize_table(dynamic_range_db: f64) -> [f64; 256] {
    std::array::from_fn(|v| linearize(v as u8, dynamic_range_db))
}

/// Volume of interest in image-grid coordinates (mm, same convention as
/// [`GridGeometry::position`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Voi {
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    Mask { dims: [usize; 3], mask: Vec<bool> },
}

impl Voi {
    pub fn ellipsoid(center: [f64; 3], radii: [f64; 3]) -> Self {
        Voi::Ellipsoid { center, radii }
    }

    /// Flat indices of the voxels inside the VOI on `geometry`.
    pub fn indices(&self, geometry: &GridGeometry) -> Result<Vec<usize>> {
        let out: Vec<usize> = match self {
            Voi::Ellipsoid { center, radii } => {
                if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(Error::InvalidInput(format!("VOI radii {radii:?} must be positive")));
                }
                let mut idx = Vec::new();
                for k in 0..geometry.dims[2] {
                    for j in 0..geometry.dims[1] {
                        for i in 0..geometry.dims[0] {
                            let p = geometry.position(i, j, k);
                            let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                            if r2 <= 1.0 {
                                idx.push(geometry.index(i, j, k));
                            }
                        }
                    }
                }
                idx
            }
            Voi::Mask { dims, mask } => {
                if *dims != geometry.dims || mask.len() != geometry.len() {
                    return Err(Error::InvalidInput(format!(
                        "VOI mask dims {dims:?} do not match grid {:?}",
                        geometry.dims
                    )));
                }
                mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
            }
        };
        if out.is_empty() {
            return Err(Error::EmptyVoi);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeIntensityCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub n_voxels: Vec<usize>,
}

impl TimeIntensityCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n_voxels = vec![0; times.len()];
        let tic = Self {
            times,
            values,
            n_voxels,
        };
        tic.validate()?;
        Ok(tic)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() || self.times.len() != self.n_voxels.len() {
            return Err(Error::InvalidInput("TIC arrays differ in length".into()));
        }
        if self.values.iter().chain(&self.times).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("TIC contains non-finite values".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("TIC times must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Samples with `from <= t < to`.
    pub fn segment(&self, from: f64, to: f64) -> TimeIntensityCurve {
        let keep = |t: &f64| *t >= from && *t < to;
        let mut out = TimeIntensityCurve::default();
        for i in (0..self.len()).filter(|&i| keep(&self.times[i])) {
            out.times.push(self.times[i]);
            out.values.push(self.values[i]);
            out.n_voxels.push(self.n_voxels[i]);
        }
        out
    }

    /// Appends a sample; times must keep increasing.
    pub fn push(&mut self, t: f64, value: f64, n_voxels: usize) -> Result<()> {
        if self.times.last().is_some_and(|&last| t <= last) {
            return Err(Error::InvalidInput(format!("TIC time {t} is not increasing")));
        }
        self.times.push(t);
        self.values.push(value);
        self.n_voxels.push(n_voxels);
        Ok(())
    }
}

/// Mean linearized intensity inside `voi` for one frame, over voxels whose
/// `valid` flag is set. Returns the mean and the number of contributing voxels.
pub fn voi_mean(
    frame: &VolumeFrame,
    indices: &[usize],
    valid: Option<&[bool]>,
    table: &[f64; 256],
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in indices {
        if valid.is_none_or(|m| m[i]) {
            sum += table[frame.voxels[i] as usize];
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// TIC of a frame sequence: per frame, the mean of per-voxel linearized
/// values inside the VOI.
pub fn extract_tic(frames: &[VolumeFrame], voi: &Voi, dynamic_range_db: f64) -> Result<TimeIntensityCurve> {
    extract_tic_masked(frames, None, voi, dynamic_range_db)
}

/// As [`extract_tic`], excluding voxels flagged invalid in `masks`
/// (one mask per frame). Frames with no valid VOI voxel are skipped.
pub fn extract_tic_masked(
    frames: &[VolumeFrame],
    masks: Option<&[Vec<bool>]>,
    voi: &Voi,
    dynamic_range_db: f64,
) -> Result<TimeIntensityCurve> {
    if !(dynamic_range_db > 0.0) {
        return Err(Error::InvalidInput("dynamic range must be > 0".into()));
    }
    if let Some(m) = masks {
        if m.len() != frames.len() {
            return Err(Error::InvalidInput("one validity mask per frame required".into()));
        }
    }
    let table = linearize_table(dynamic_range_db);
    let mut cached: Option<(GridGeometry, Vec<usize>)> = None;
    let mut tic = TimeIntensityCurve::default();
    for (f, frame) in frames.iter().enumerate() {
        let g = frame.geometry();
        if frame.voxels.len() != g.len() {
            return Err(Error::InvalidInput("frame voxel count does not match dims".into()));
        }
        if cached.as_ref().is_none_or(|(cg, _)| *cg != g) {
            let idx = match voi.indices(&g) {
                Ok(idx) => idx,
                Err(Error::EmptyVoi) => Vec::new(),
                Err(e) => return Err(e),
            };
            cached = Some((g, idx));
        }
        let indices = &cached.as_ref().expect("cached above").1;
        let valid = masks.map(|m| m[f].as_slice());
        if let Some(v) = valid {
            if v.len() != frame.voxels.len() {
                return Err(Error::InvalidInput("validity mask size mismatch".into()));
            }
        }
        let (mean, n) = voi_mean(frame, indices, valid, &table);
        if n > 0 {
            tic.push(frame.timestamp, mean, n)?;
        }
    }
    if tic.is_empty() {
        return Err(Error::EmptyVoi);
    }
    Ok(tic)
}

pub const DEFAULT_STEADY_WINDOW_S: f64 = 20.0;
pub const DEFAULT_SLOPE_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateReport {
    pub reached: bool,
    /// Seconds from the first TIC sample; `None` unless reached.
    pub time_to_steady: Option<f64>,
    /// Absolute time of detection.
    pub detected_at: Option<f64>,
    pub window: f64,
    pub slope_tolerance: f64,
}

fn ls_slope(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (ti, yi) in t.iter().zip(y) {
        sxy += (ti - tm) * (yi - ym);
        sxx += (ti - tm) * (ti - tm);
    }
    (sxy / sxx, ym)
}

/// Live steady-state check over a growing TIC. Each pushed sample closes a
/// window `[t − window, t]`; the first window whose normalised
/// least-squares slope is within tolerance marks steady state.
#[derive(Debug, Clone)]
pub struct SteadyStateMonitor {
    window: f64,
    slope_tolerance: f64,
    times: Vec<f64>,
    values: Vec<f64>,
    lo: usize,
    report: SteadyStateReport,
}

impl SteadyStateMonitor {
    pub fn new(window: f64, slope_tolerance: f64) -> Result<Self> {
        if !(slope_tolerance > 0.0) || !(window > 0.0) {
            return Err(Error::InvalidInput("window and tolerance must be > 0".into()));
        }
        Ok(Self {
            window,
            slope_tolerance,
            times: Vec::new(),
            values: Vec::new(),
            lo: 0,
            report: SteadyStateReport {
                reached: false,
                time_to_steady: None,
                detected_at: None,
                window,
                slope_tolerance,
            },
        })
    }

    pub fn report(&self) -> &SteadyStateReport {
        &self.report
    }

    /// Adds a sample; returns whether steady state has been reached.
    pub fn push(&mut self, t: f64, value: f64) -> Result<bool> {
        if self.report.reached {
            return Ok(true);
        }
        if self.times.last().is_some_and(|&last| t <= last) {
            return Err(Error::InvalidInput(format!("TIC time {t} is not increasing")));
        }
        self.times.push(t);
        self.values.push(value);
        let t_first = self.times[0];
        if t - t_first < self.window {
            return Ok(false);
        }
        while self.times[self.lo] < t - self.window {
            self.lo += 1;
        }
        let n = self.times.len() - self.lo;
        if n < 3 {
            return Err(Error::InsufficientData(format!("{n} samples in window ending at {t} s")));
        }
        let (slope, mean) = ls_slope(&self.times[self.lo..], &self.values[self.lo..]);
        if slope.abs() <= self.slope_tolerance * mean.abs() {
            self.report.reached = true;
            self.report.time_to_steady = Some(t - t_first);
            self.report.detected_at = Some(t);
        }
        Ok(self.report.reached)
    }
}

/// Earliest time `t` at which the least-squares slope over `[t − window, t]`,
/// divided by the window-mean level, has magnitude `<= slope_tolerance`.
pub fn detect_steady_state(tic: &TimeIntensityCurve, window: f64, slope_tolerance: f64) -> Result<SteadyStateReport> {
    let mut monitor = SteadyStateMonitor::new(window, slope_tolerance)?;
    if tic.times.len() != tic.values.len() {
        return Err(Error::InvalidInput("TIC arrays differ in length".into()));
    }
    let (Some(&t_first), Some(&t_last)) = (tic.times.first(), tic.times.last()) else {
        return Err(Error::InsufficientData("empty TIC".into()));
    };
    if t_last - t_first < window {
        return Err(Error::InsufficientData(format!(
            "TIC span {} s is shorter than window {window} s",
            t_last - t_first
        )));
    }
    for (t, v) in tic.times.iter().zip(&tic.values) {
        if monitor.push(*t, *v)? {
            break;
        }
    }
    Ok(*monitor.report())
}

pub const DEFAULT_MIN_SPAN_S: f64 = 60.0;
pub const MIN_FIT_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub min_span: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Replenishment origin; the first sample time when `None`.
    pub t0: Option<f64>,
    pub grid_points: usize,
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            min_span: DEFAULT_MIN_SPAN_S,
            beta_min: 1e-4,
            beta_max: 10.0,
            t0: None,
            grid_points: 64,
            rel_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(rename = "A")]
    pub a: f64,
    pub beta: f64,
    #[serde(rename = "rBV")]
    pub rbv: f64,
    #[serde(rename = "rBF")]
    pub rbf: f64,
    pub rms_residual: f64,
    pub r_squared: f64,
    pub t0: f64,
    pub n_samples: usize,
    /// Zero-variance data: r² is undefined and reported as 0.
    pub degenerate: bool,
    /// The optimum sits on the β search bound.
    pub at_bound: bool,
}

struct Projection<'a> {
    dt: Vec<f64>,
    y: &'a [f64],
}

impl Projection<'_> {
    /// Closed-form amplitude and residual sum of squares at `beta`.
    fn eval(&self, beta: f64) -> (f64, f64) {
        let (mut syp, mut spp) = (0.0, 0.0);
        for (d, y) in self.dt.iter().zip(self.y) {
            let phi = 1.0 - (-beta * d).exp();
            syp += y * phi;
            spp += phi * phi;
        }
        let a = if spp > 0.0 { (syp / spp).max(0.0) } else { 0.0 };
        let mut ssr = 0.0;
        for (d, y) in self.dt.iter().zip(self.y) {
            let r = y - a * (1.0 - (-beta * d).exp());
            ssr += r * r;
        }
        (a, ssr)
    }
}

/// Fits `A·(1 − e^(−β(t − t0)))` by variable projection: `A` in closed form
/// for each `β`, `β` by a log-spaced scan followed by golden-section
/// refinement. The returned point is the best of every probe.
pub fn fit_replenishment(tic: &TimeIntensityCurve, options: &FitOptions) -> Result<FitResult> {
    if tic.times.len() != tic.values.len() {
        return Err(Error::InvalidInput("TIC arrays differ in length".into()));
    }
    if tic.values.iter().chain(&tic.times).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("TIC contains non-finite values".into()));
    }
    if !(options.beta_min > 0.0 && options.beta_max > options.beta_min) || options.grid_points < 3 {
        return Err(Error::InvalidInput("invalid beta search range".into()));
    }
    let t0 = options
        .t0
        .or(tic.times.first().copied())
        .ok_or_else(|| Error::InsufficientData("empty TIC".into()))?;
    let (mut dt, mut y) = (Vec::new(), Vec::new());
    for (t, v) in tic.times.iter().zip(&tic.values) {
        if *t >= t0 {
            dt.push(t - t0);
            y.push(*v);
        }
    }
    if y.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} samples after t0, need {MIN_FIT_SAMPLES}",
            y.len()
        )));
    }
    let span = dt.last().copied().unwrap_or(0.0);
    if span < options.min_span {
        return Err(Error::InsufficientData(format!(
            "fit span {span} s is shorter than {} s",
            options.min_span
        )));
    }
    let proj = Projection { dt, y: &y };

    let (lmin, lmax) = (options.beta_min.ln(), options.beta_max.ln());
    let n = options.grid_points;
    let grid: Vec<f64> = (0..n).map(|i| lmin + (lmax - lmin) * i as f64 / (n - 1) as f64).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0); // (ssr, ln beta, A)
    let consider = |lb: f64, best: &mut (f64, f64, f64)| {
        let (a, ssr) = proj.eval(lb.exp());
        if ssr < best.0 {
            *best = (ssr, lb, a);
        }
        ssr
    };
    let mut best_i = 0;
    for (i, &lb) in grid.iter().enumerate() {
        let before = best.0;
        consider(lb, &mut best);
        if best.0 < before {
            best_i = i;
        }
    }

    // golden section on ln β inside the bracketing grid cells
    let (mut a, mut b) = (grid[best_i.saturating_sub(1)], grid[(best_i + 1).min(n - 1)]);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = consider(c, &mut best);
    let mut fd = consider(d, &mut best);
    let tol = options.rel_tol;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = consider(c, &mut best);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = consider(d, &mut best);
        }
    }

    let (ssr, lb, amp) = best;
    let beta = lb.exp();
    let count = y.len() as f64;
    let mean = y.iter().sum::<f64>() / count;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let degenerate = !(sst > 0.0);
    let r_squared = if degenerate { 0.0 } else { 1.0 - ssr / sst };
    let edge = 1e-6;
    let at_bound = lb - lmin < edge || lmax - lb < edge;
    if at_bound && !degenerate {
        log::warn!("replenishment fit hit the beta bound (beta = {beta:.3e})");
    }
    Ok(FitResult {
        a: amp,
        beta,
        rbv: amp,
        rbf: amp * beta,
        rms_residual: (ssr / count).sqrt(),
        r_squared,
        t0,
        n_samples: y.len(),
        degenerate,
        at_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::log_compress;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn model(a: f64, beta: f64, n: usize) -> TimeIntensityCurve {
        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let values = times.iter().map(|t| a * (1.0 - (-beta * t).exp())).collect();
        TimeIntensityCurve::new(times, values).unwrap()
    }

    #[test]
    fn linearize_endpoints() {
        assert!((linearize(255, 60.0) - 1.0).abs() < 1e-15);
        assert!((linearize(0, 60.0) - 0.001).abs() < 1e-15);
        let table = linearize_table(60.0);
        assert!(table.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn round_trip_all_codes() {
        // one code step is a factor 10^(D/255/20)
        let step = 10f64.powf(60.0 / 255.0 / 20.0) - 1.0;
        for v in 0..=255u8 {
            let i = linearize(v, 60.0);
            assert_eq!(log_compress(i, 60.0), v);
            let back = linearize(log_compress(i, 60.0), 60.0);
            assert!((back - i).abs() / i <= step);
        }
    }

    fn uniform(code: u8, t: f64) -> VolumeFrame {
        VolumeFrame::filled(t, None, GridGeometry::cubic(8, 1.0), code)
    }

    #[test]
    fn uniform_full_scale_tic() {
        let frames: Vec<_> = (0..4).map(|i| uniform(255, i as f64)).collect();
        let tic = extract_tic(&frames, &Voi::ellipsoid([3.5; 3], [2.0; 3]), 60.0).unwrap();
        assert_eq!(tic.len(), 4);
        assert!(tic.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(tic.n_voxels.iter().all(|&n| n > 0));
    }

    #[test]
    fn two_voxel_mean() {
        let g = GridGeometry::cubic(4, 1.0);
        let mut f = uniform(0, 0.0);
        f.dims = g.dims;
        f.voxels = vec![0; g.len()];
        let c02 = log_compress(0.2, 60.0);
        let c04 = log_compress(0.4, 60.0);
        f.voxels[0] = c02;
        f.voxels[1] = c04;
        let mut mask = vec![false; g.len()];
        mask[0] = true;
        mask[1] = true;
        let tic = extract_tic(&[f], &Voi::Mask { dims: g.dims, mask }, 60.0).unwrap();
        let expected = (linearize(c02, 60.0) + linearize(c04, 60.0)) / 2.0;
        assert!((tic.values[0] - expected).abs() < 1e-15);
        assert!((tic.values[0] - 0.3).abs() < 0.3 * 0.03);
        assert_eq!(tic.n_voxels[0], 2);
    }

    #[test]
    fn voi_outside_grid_is_empty() {
        let frames = vec![uniform(10, 0.0)];
        let r = extract_tic(&frames, &Voi::ellipsoid([100.0; 3], [2.0; 3]), 60.0);
        assert!(matches!(r, Err(Error::EmptyVoi)));
    }

    #[test]
    fn constant_tic_is_steady_at_first_window() {
        let tic = TimeIntensityCurve::new((0..60).map(f64::from).collect(), vec![0.4; 60]).unwrap();
        let r = detect_steady_state(&tic, 20.0, 0.005).unwrap();
        assert!(r.reached);
        assert_eq!(r.time_to_steady, Some(20.0));
    }

    #[test]
    fn ramp_never_steady() {
        let times: Vec<f64> = (0..=60).map(f64::from).collect();
        let values = times.iter().map(|t| 0.1 * t).collect();
        let r = detect_steady_state(&TimeIntensityCurve::new(times, values).unwrap(), 20.0, 0.005).unwrap();
        assert!(!r.reached);
        assert_eq!(r.time_to_steady, None);
    }

    #[test]
    fn sparse_window_is_insufficient() {
        let tic = TimeIntensityCurve::new(vec![0.0, 15.0, 30.0, 45.0], vec![1.0; 4]).unwrap();
        assert!(matches!(detect_steady_state(&tic, 20.0, 0.005), Err(Error::InsufficientData(_))));
    }

    fn analytic_crossing(tau: f64, tol: f64) -> f64 {
        // relative slope e^(-t/τ)/(τ(1 − e^(-t/τ))) is decreasing; bisect
        let f = |t: f64| (-t / tau).exp() / tau / (1.0 - (-t / tau).exp()) - tol;
        let (mut lo, mut hi) = (1e-6, 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn exponential_detection_near_analytic() {
        let times: Vec<f64> = (0..=300).map(f64::from).collect();
        let values = times.iter().map(|t| 1.0 - (-t / 30.0).exp()).collect();
        let tic = TimeIntensityCurve::new(times, values).unwrap();
        let r = detect_steady_state(&tic, 20.0, 0.005).unwrap();
        let t_star = analytic_crossing(30.0, 0.005);
        assert!((t_star - 61.1).abs() < 0.1);
        assert!((r.time_to_steady.unwrap() - t_star).abs() <= 20.0);
    }

    #[test]
    fn noise_free_fit() {
        let tic = model(2.0, 0.5, 61);
        let fit = fit_replenishment(&tic, &FitOptions::default()).unwrap();
        assert!((fit.a - 2.0).abs() / 2.0 < 1e-6);
        assert!((fit.beta - 0.5).abs() / 0.5 < 1e-6);
        assert!((fit.rbf - 1.0).abs() < 1e-6);
        assert!(fit.r_squared > 0.999_999);
        assert!(!fit.degenerate && !fit.at_bound);
    }

    #[test]
    fn zero_tic_is_degenerate() {
        let tic = TimeIntensityCurve::new((0..61).map(f64::from).collect(), vec![0.0; 61]).unwrap();
        let fit = fit_replenishment(&tic, &FitOptions::default()).unwrap();
        assert_eq!((fit.a, fit.rbv, fit.rbf, fit.r_squared), (0.0, 0.0, 0.0, 0.0));
        assert!(fit.degenerate);
    }

    #[test]
    fn short_or_bad_segments_rejected() {
        assert!(matches!(
            fit_replenishment(&model(1.0, 0.3, 30), &FitOptions::default()),
            Err(Error::InsufficientData(_))
        ));
        let tic = TimeIntensityCurve::new(vec![0.0, 20.0, 40.0, 61.0], vec![0.0, 0.5, 0.8, 0.9]).unwrap();
        assert!(matches!(fit_replenishment(&tic, &FitOptions::default()), Err(Error::InsufficientData(_))));
        let mut bad = model(1.0, 0.3, 61);
        bad.values[5] = f64::NAN;
        assert!(matches!(fit_replenishment(&bad, &FitOptions::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn step_data_flags_bound() {
        let mut tic = model(1.0, 0.3, 61);
        tic.values.iter_mut().skip(1).for_each(|v| *v = 1.0);
        let fit = fit_replenishment(&tic, &FitOptions::default()).unwrap();
        assert!(fit.at_bound);
    }

    #[test]
    fn noisy_monte_carlo_median_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let (mut ea, mut eb) = (Vec::new(), Vec::new());
        for _ in 0..100 {
            let mut tic = model(2.0, 0.5, 61);
            for v in &mut tic.values {
                *v *= 1.0 + noise.sample(&mut rng);
            }
            let fit = fit_replenishment(&tic, &FitOptions::default()).unwrap();
            ea.push((fit.a - 2.0).abs() / 2.0);
            eb.push((fit.beta - 0.5).abs() / 0.5);
        }
        ea.sort_by(f64::total_cmp);
        eb.sort_by(f64::total_cmp);
        assert!(ea[50] < 0.05 && eb[50] < 0.05, "{} {}", ea[50], eb[50]);
    }

    #[test]
    fn json_row_fields() {
        let fit = fit_replenishment(&model(2.0, 0.5, 61), &FitOptions::default()).unwrap();
        let v = serde_json::to_value(fit).unwrap();
        for key in ["A", "beta", "rBV", "rBF", "rms_residual", "r_squared", "t0"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let r = detect_steady_state(&model(1.0, 0.1, 100), 20.0, 0.005).unwrap();
        let v = serde_json::to_value(r).unwrap();
        assert!(v.get("reached").is_some() && v.get("time_to_steady").is_some());
    }

    fn noisy(seed: u64, a: f64, beta: f64) -> TimeIntensityCurve {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut tic = model(a, beta, 70);
        for v in &mut tic.values {
            *v *= 1.0 + noise.sample(&mut rng);
        }
        tic
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scale_equivariance(seed in 0u64..1000, a in 0.05f64..2.0, beta in 0.02f64..2.0, e in -4i32..4) {
            let tic = noisy(seed, a, beta);
            let k = 2f64.powi(e);
            let mut scaled = tic.clone();
            scaled.values.iter_mut().for_each(|v| *v *= k);
            let f1 = fit_replenishment(&tic, &FitOptions::default()).unwrap();
            let f2 = fit_replenishment(&scaled, &FitOptions::default()).unwrap();
            prop_assert_eq!(f2.beta, f1.beta);
            prop_assert_eq!(f2.a, k * f1.a);
            prop_assert_eq!(f2.rbf, k * f1.rbf);
        }

        #[test]
        fn time_shift_invariance(seed in 0u64..1000, a in 0.05f64..2.0, beta in 0.02f64..2.0, shift in -64i32..512) {
            let tic = noisy(seed, a, beta);
            let mut shifted = tic.clone();
            shifted.times.iter_mut().for_each(|t| *t += shift as f64);
            let f1 = fit_replenishment(&tic, &FitOptions::default()).unwrap();
            let f2 = fit_replenishment(&shifted, &FitOptions::default()).unwrap();
            prop_assert_eq!(f2.beta, f1.beta);
            prop_assert_eq!(f2.a, f1.a);
            prop_assert_eq!(f2.t0, f1.t0 + shift as f64);
        }

        #[test]
        fn steady_state_monotone_in_tolerance(tau in 5f64..120.0, tols in proptest::collection::vec(1e-4f64..0.05, 10)) {
            let times: Vec<f64> = (0..=400).map(f64::from).collect();
            let values = times.iter().map(|t| 1.0 - (-t / tau).exp()).collect();
            let tic = TimeIntensityCurve::new(times, values).unwrap();
            let mut tols = tols;
            tols.sort_by(f64::total_cmp);
            let detect = |tol| detect_steady_state(&tic, 20.0, tol).unwrap().time_to_steady.unwrap_or(f64::INFINITY);
            for w in tols.windows(2) {
                prop_assert!(detect(w[1]) <= detect(w[0]));
            }
        }
    }
}
