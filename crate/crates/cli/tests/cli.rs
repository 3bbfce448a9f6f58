use std::path::Path;
use std::process::{Command, Output};

fn ceusnav(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ceusnav"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

const SMALL: &str = r#"
duration = 4.0
emit_tracker = false
flash_times = [1.5]

[render]
dynamic_range_db = 60.0
noise_sd = 0.0
geometry = { dims = [32, 32, 32], voxel_size = [2.0, 2.0, 2.0] }
"#;

#[test]
fn simulate_then_quantify() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sim.toml"), SMALL).unwrap();
    // the file's duration wins over the flag
    let out = ceusnav(&["simulate", "-c", "sim.toml", "--duration", "9", "-o", "s.snav"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = ceusnav::stream::read_session(dir.path().join("s.snav")).unwrap();
    assert_eq!(log.frames().count(), 4);

    let out = ceusnav(&["quantify", "s.snav"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("patient,session,run,rBV,rBF,beta,r2,status"));
    // one flash, too short to fit
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.contains("failed"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "duration = -1.0\n").unwrap();
    let out = ceusnav(&["simulate", "-c", "bad.toml", "-o", "x.snav"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = ceusnav(&["repeatability", "--patients", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = ceusnav(&["no-such-command"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = closed.local_addr().unwrap().to_string();
    drop(closed);
    let out = ceusnav(&["record", "--connect", &addr, "-o", "r.snav"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn operator_study_writes_csv_and_json_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = ceusnav(
        &["--json", "operator-study", "--operators", "2", "--runs-per-operator", "1", "--hold-duration", "20", "--reposition-duration", "10", "-o", "out"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let features = std::fs::read_to_string(dir.path().join("out/operator_features.csv")).unwrap();
    assert_eq!(features.lines().count(), 1 + 6);
    assert!(dir.path().join("out/operator_traces.csv").exists());

    let out = ceusnav(&["--json", "record", "--connect", "127.0.0.1:1", "-o", "r.snav"], dir.path());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().next().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["level"], "ERROR");
}
