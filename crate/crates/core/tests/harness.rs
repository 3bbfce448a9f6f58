use std::path::PathBuf;

use ceusnav::harness::{
    quantify_batch, run_operator_study, to_csv, ExperimentConfig, FitRow, QuantifyOptions, SessionSimulator,
    SimulationConfig,
};
use ceusnav::motionsim::{MotionModel, TrackerNoise};
use ceusnav::stream::{record_session, MessageSource};

fn session(motion: MotionModel) -> SimulationConfig {
    SimulationConfig {
        duration: 330.0,
        flash_times: vec![20.5, 170.5],
        emit_tracker: false,
        motion,
        tracker: TrackerNoise::none(),
        ..SimulationConfig::default()
    }
}

fn record(cfg: SimulationConfig, dir: &std::path::Path, name: &str) -> PathBuf {
    let mut sim = SessionSimulator::new(cfg).unwrap();
    let header = sim.header();
    let messages = sim.collect().unwrap();
    record_session(messages, &header, dir.join(name)).unwrap()
}

fn fit_rows(paths: &[PathBuf], realign: bool) -> Vec<FitRow> {
    let options = QuantifyOptions {
        realign,
        ..QuantifyOptions::default()
    };
    quantify_batch(paths, None, &options, if realign { "aligned" } else { "unaligned" }).unwrap()
}

#[test]
fn batch_quantification() {
    let dir = tempfile::tempdir().unwrap();
    let still = record(session(MotionModel::still(4)), dir.path(), "still.snav");
    let moving = record(
        session(MotionModel::breathing(3.0, 4.3, 4)),
        dir.path(),
        "moving.snav",
    );

    let oracle = fit_rows(&[still.clone()], false);
    assert_eq!(oracle.len(), 2);
    assert!(oracle.iter().all(|r| r.status == "ok"), "{oracle:?}");
    assert_eq!(oracle[0].session, "still");

    let raw = fit_rows(&[moving.clone()], false);
    let aligned = fit_rows(&[moving.clone()], true);
    for run in 0..2 {
        let truth = oracle[run].rbf.unwrap();
        let e_raw = (raw[run].rbf.unwrap() - truth).abs();
        let e_aligned = (aligned[run].rbf.unwrap() - truth).abs();
        assert!(e_aligned < e_raw, "run {run}: aligned {e_aligned} vs raw {e_raw}");
        assert_ne!(raw[run].rbf, aligned[run].rbf);
    }

    let paths = [still, moving];
    let first = to_csv(&fit_rows(&paths, true)).unwrap();
    let second = to_csv(&fit_rows(&paths, true)).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 1 + 4);
}

#[test]
fn unreadable_file_becomes_error_row() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.snav");
    std::fs::write(&bad, b"not a session").unwrap();
    let rows = fit_rows(&[bad], false);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].status.starts_with("failed"));
    assert_eq!(rows[0].session, "bad");
}

#[test]
fn operator_study_rows_and_determinism() {
    let cfg = ExperimentConfig {
        operators: 5,
        runs_per_operator: 2,
        ..ExperimentConfig::default()
    };
    let a = run_operator_study(&cfg).unwrap();
    assert_eq!(a.features.len(), 15);
    assert_eq!(a.runs.len(), 30);
    assert!(!a.traces.is_empty());
    let b = run_operator_study(&cfg).unwrap();
    assert_eq!(to_csv(&a.features).unwrap(), to_csv(&b.features).unwrap());
    assert_eq!(to_csv(&a.traces).unwrap(), to_csv(&b.traces).unwrap());

    let other = run_operator_study(&ExperimentConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(to_csv(&a.features).unwrap(), to_csv(&other.features).unwrap());
}

#[test]
fn header_round_trips_simulation_config() {
    let cfg = session(MotionModel::still(1));
    let sim = SessionSimulator::new(cfg.clone()).unwrap();
    let back: SimulationConfig = serde_json::from_value(sim.header().config).unwrap();
    assert_eq!(back, cfg);
}
