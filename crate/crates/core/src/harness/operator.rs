use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentConfig};
use crate::error::Result;
use crate::geometry::RigidTransform;
use crate::metrics::{displacement_trace, histogram_features, repositioning_result, DisplacementTrace};
use crate::motionsim::{generate_session, MotionModel};
use crate::stream::FeedbackMode;

pub const METHODS: [FeedbackMode; 3] = [FeedbackMode::Bmode, FeedbackMode::Tracked, FeedbackMode::Blind];

/// Histogram features of one operator and method, averaged over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorFeatureRow {
    pub operator: usize,
    pub method: FeedbackMode,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub skewness: f64,
    pub reposition_error: f64,
    pub time_to_recovery: f64,
    pub settled_runs: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRunRow {
    pub operator: usize,
    pub method: FeedbackMode,
    pub run: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub skewness: f64,
    pub reposition_error: f64,
    pub time_to_recovery: f64,
    pub settled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub operator: usize,
    pub method: FeedbackMode,
    pub run: usize,
    pub trial: String,
    pub t: f64,
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatorStudyReport {
    pub features: Vec<OperatorFeatureRow>,
    pub runs: Vec<OperatorRunRow>,
    pub traces: Vec<TraceRow>,
}

impl OperatorStudyReport {
    /// Mean of a per-run column over every run of `method`.
    pub fn method_mean(&self, method: FeedbackMode, column: impl Fn(&OperatorRunRow) -> f64) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.method == method).map(column).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Motion magnitudes of the tuned model scaled by operator skill.
fn operator_model(base: MotionModel, skill: f64) -> MotionModel {
    MotionModel {
        jitter_sd: base.jitter_sd * skill,
        drift_rate: base.drift_rate * skill,
        hold_offset_mm: base.hold_offset_mm * skill,
        ..base
    }
}

fn measured_trace(model: &MotionModel, cfg: &ExperimentConfig, duration: f64, center: &Vector3<f64>) -> Result<DisplacementTrace> {
    let session = generate_session(model, &cfg.acquisition.tracker, duration, &[])?;
    let poses: Vec<(f64, RigidTransform)> = session
        .readings
        .iter()
        .filter_map(|r| r.pose().map(|p| (r.timestamp(), *p)))
        .collect();
    displacement_trace(&poses, &RigidTransform::identity(), center)
}

/// Simulated operators hold the probe under each feedback method, then
/// return it to the reference from a displaced start.
pub fn run_operator_study(cfg: &ExperimentConfig) -> Result<OperatorStudyReport> {
    cfg.validate()?;
    let center = cfg.acquisition.render.geometry.center();
    let mut report = OperatorStudyReport::default();
    for op in 0..cfg.operators {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[20, op as u64]));
        let skill = rng.random_range(0.8..=1.2);
        for (m, &method) in METHODS.iter().enumerate() {
            let mut rows = Vec::with_capacity(cfg.runs_per_operator);
            for run in 0..cfg.runs_per_operator {
                let seed = derive_seed(cfg.seed, &[21, op as u64, m as u64, run as u64]);
                let hold = measured_trace(
                    &operator_model(MotionModel::hold(method, seed), skill),
                    cfg,
                    cfg.hold_duration,
                    &center,
                )?;
                let features = histogram_features(&hold.displacement)?;
                let back = measured_trace(
                    &operator_model(MotionModel::reposition(method, seed ^ 1), skill),
                    cfg,
                    cfg.reposition_duration,
                    &center,
                )?;
                let repo = repositioning_result(&back, cfg.settle_threshold_mm, cfg.settle_hold_s)?;
                for (trial, trace) in [("hold", &hold), ("reposition", &back)] {
                    report.traces.extend(trace.times.iter().zip(&trace.displacement).step_by(cfg.trace_stride).map(
                        |(&t, &d)| TraceRow {
                            operator: op + 1,
                            method,
                            run: run + 1,
                            trial: trial.into(),
                            t,
                            displacement: d,
                        },
                    ));
                }
                rows.push(OperatorRunRow {
                    operator: op + 1,
                    method,
                    run: run + 1,
                    mean: features.mean,
                    median: features.median,
                    sd: features.sd,
                    skewness: features.skewness,
                    reposition_error: repo.error,
                    time_to_recovery: repo.time_to_recovery,
                    settled: repo.settled,
                });
            }
            let n = rows.len() as f64;
            let avg = |f: fn(&OperatorRunRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
            let settled: Vec<&OperatorRunRow> = rows.iter().filter(|r| r.settled).collect();
            report.features.push(OperatorFeatureRow {
                operator: op + 1,
                method,
                mean: avg(|r| r.mean),
                median: avg(|r| r.median),
                sd: avg(|r| r.sd),
                skewness: avg(|r| r.skewness),
                reposition_error: if settled.is_empty() {
                    f64::NAN
                } else {
                    settled.iter().map(|r| r.reposition_error).sum::<f64>() / settled.len() as f64
                },
                time_to_recovery: avg(|r| r.time_to_recovery),
                settled_runs: settled.len(),
                runs: rows.len(),
            });
            report.runs.extend(rows);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_and_determinism() {
        let cfg = ExperimentConfig {
            operators: 2,
            runs_per_operator: 1,
            hold_duration: 30.0,
            reposition_duration: 20.0,
            ..ExperimentConfig::default()
        };
        let a = run_operator_study(&cfg).unwrap();
        assert_eq!(a.features.len(), 6);
        assert_eq!(a.runs.len(), 6);
        let b = run_operator_study(&cfg).unwrap();
        assert_eq!(super::super::to_csv(&a.features).unwrap(), super::super::to_csv(&b.features).unwrap());
    }
}
