//! Operator-performance metrics and repeatability statistics.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

pub const DEFAULT_SETTLE_THRESHOLD_MM: f64 = 2.0;
pub const DEFAULT_SETTLE_HOLD_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisplacementTrace {
    pub times: Vec<f64>,
    pub displacement: Vec<f64>,
}

impl DisplacementTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `d(t) = ‖T_t·c − T_ref·c‖` for the image-centre offset `c`.
pub fn displacement_trace(
    poses: &[(f64, RigidTransform)],
    reference: &RigidTransform,
    center_offset: &Vector3<f64>,
) -> Result<DisplacementTrace> {
    if poses.is_empty() {
        return Err(Error::InsufficientData("no poses".into()));
    }
    reference.validate()?;
    let anchor = reference.transform_point(center_offset);
    let mut trace = DisplacementTrace::default();
    for (t, pose) in poses {
        pose.validate()?;
        trace.times.push(*t);
        trace.displacement.push((pose.transform_point(center_offset) - anchor).norm());
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramFeatures {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub skewness: f64,
    /// Zero spread: skewness is undefined and reported as 0.
    pub degenerate: bool,
}

/// Sample mean, median, SD (n − 1) and adjusted Fisher–Pearson skewness.
pub fn histogram_features(values: &[f64]) -> Result<HistogramFeatures> {
    let n = values.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} samples, need 3")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (mut m2, mut m3) = (0.0, 0.0);
    for v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    let sd = (m2 / (nf - 1.0)).sqrt();
    let (m2, m3) = (m2 / nf, m3 / nf);
    // relative to the data scale, to absorb rounding in the mean
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let degenerate = m2.sqrt() <= 1e-12 * scale.max(f64::MIN_POSITIVE);
    let skewness = if degenerate {
        0.0
    } else {
        let g1 = m3 / m2.powf(1.5);
        g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
    };
    Ok(HistogramFeatures {
        mean,
        median,
        sd: if degenerate { 0.0 } else { sd },
        skewness,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepositioningResult {
    /// Mean displacement over the hold window, mm (NaN when not settled).
    pub error: f64,
    /// Seconds from the first sample.
    pub time_to_recovery: f64,
    pub settled: bool,
}

/// First time the displacement stays at or below `threshold` for `hold`
/// seconds, and the mean displacement over that window.
pub fn repositioning_result(trace: &DisplacementTrace, threshold: f64, hold: f64) -> Result<RepositioningResult> {
    let (Some(&t0), Some(&t_end)) = (trace.times.first(), trace.times.last()) else {
        return Err(Error::InsufficientData("empty trace".into()));
    };
    if !(hold >= 0.0 && hold < t_end - t0) {
        return Err(Error::InvalidInput(format!("hold {hold} s must be shorter than the trace")));
    }
    let d = &trace.displacement;
    let t = &trace.times;
    let mut run_start: Option<usize> = None;
    for i in 0..t.len() {
        if d[i] <= threshold {
            let start = *run_start.get_or_insert(i);
            if t[i] - t[start] >= hold {
                let window: Vec<f64> = (start..t.len())
                    .take_while(|&j| t[j] <= t[start] + hold)
                    .map(|j| d[j])
                    .collect();
                return Ok(RepositioningResult {
                    error: window.iter().sum::<f64>() / window.len() as f64,
                    time_to_recovery: t[start] - t0,
                    settled: true,
                });
            }
        } else {
            run_start = None;
        }
    }
    Ok(RepositioningResult {
        error: f64::NAN,
        time_to_recovery: t_end - t0,
        settled: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    None,
    Poor,
    Moderate,
    Good,
    Excellent,
}

impl fmt::Display for Agreement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agreement::None => "none",
            Agreement::Poor => "poor",
            Agreement::Moderate => "moderate",
            Agreement::Good => "good",
            Agreement::Excellent => "excellent",
        })
    }
}

/// Agreement band; each boundary value belongs to the lower band.
pub fn classify_agreement(icc: f64) -> Agreement {
    match icc {
        x if x > 0.80 => Agreement::Excellent,
        x if x > 0.60 => Agreement::Good,
        x if x > 0.40 => Agreement::Moderate,
        x if x > 0.20 => Agreement::Poor,
        _ => Agreement::None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityResult {
    pub icc: f64,
    pub ci95: (f64, f64),
    pub band: Agreement,
    pub n_pairs: usize,
    pub msb: f64,
    pub msw: f64,
}

/// One-way random-effects ICC(1,1) on natural-log measurement pairs, with
/// the F-based 95% interval.
pub fn icc_pairs(pairs: &[(f64, f64)]) -> Result<RepeatabilityResult> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} pairs, need 3")));
    }
    if pairs.iter().any(|(a, b)| !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite())) {
        return Err(Error::InvalidInput("measurements must be positive and finite".into()));
    }
    let k = 2.0;
    let logs: Vec<(f64, f64)> = pairs.iter().map(|(a, b)| (a.ln(), b.ln())).collect();
    let grand = logs.iter().map(|(a, b)| a + b).sum::<f64>() / (k * n as f64);
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for (a, b) in &logs {
        let m = 0.5 * (a + b);
        ssb += k * (m - grand).powi(2);
        ssw += (a - m).powi(2) + (b - m).powi(2);
    }
    let df_b = n as f64 - 1.0;
    let df_w = n as f64 * (k - 1.0);
    let msb = ssb / df_b;
    let msw = ssw / df_w;
    if msw == 0.0 {
        if msb == 0.0 {
            return Err(Error::Degenerate("all measurements identical".into()));
        }
        return Ok(RepeatabilityResult {
            icc: 1.0,
            ci95: (1.0, 1.0),
            band: Agreement::Excellent,
            n_pairs: n,
            msb,
            msw,
        });
    }
    let icc = (msb - msw) / (msb + (k - 1.0) * msw);
    let f0 = msb / msw;
    let quantile = |d1: f64, d2: f64| -> Result<f64> {
        let dist = FisherSnedecor::new(d1, d2).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(dist.inverse_cdf(0.975))
    };
    let fl = f0 / quantile(df_b, df_w)?;
    let fu = f0 * quantile(df_w, df_b)?;
    let lo = (fl - 1.0) / (fl + k - 1.0);
    let hi = (fu - 1.0) / (fu + k - 1.0);
    Ok(RepeatabilityResult {
        icc,
        ci95: (lo, hi),
        band: classify_agreement(icc),
        n_pairs: n,
        msb,
        msw,
    })
}
