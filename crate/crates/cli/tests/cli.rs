use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;
use textloop_core::records::{read_jsonl, write_jsonl, LogRecord};
use textloop_core::simulator::{build_world, default_rig, default_route, simulate, NoiseModel, Scenario, SensorParams};
use textloop_core::text_entity::{IdPattern, TextCategory};
use textloop_core::Pose;

fn textloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textloop"))
        .args(args)
        .env_remove("TEXTLOOP__EVAL__TAU")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_exit2(out: &Output, kind: &str, needle: &str) {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
    assert!(err.contains(needle), "{err}");
}

fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn read_poses(path: &Path) -> Vec<Pose> {
    let file = std::io::BufReader::new(std::fs::File::open(path).unwrap());
    read_jsonl(file)
        .filter_map(|r| match r.unwrap().1 {
            LogRecord::Odom { pose, .. } | LogRecord::Gt { pose, .. } => Some(pose),
            _ => None,
        })
        .collect()
}

fn write_records(path: &Path, records: &[LogRecord]) {
    write_jsonl(records, std::fs::File::create(path).unwrap()).unwrap();
}

fn simulate_into(dir: &Path, scenario: &str, seed: &str, frames: Option<&str>) -> Output {
    let mut args = vec!["simulate", "--scenario", scenario, "--seed", seed, "--out", path_str(dir)];
    if let Some(n) = frames {
        args.extend(["--frames", n]);
    }
    textloop(&args)
}

#[test]
fn version_flag() {
    let out = textloop(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("textloop "));
}

#[test]
fn simulate_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        let out = simulate_into(dir.path(), "multifloor", "3", Some("400"));
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("floors=2"));
    }
    for file in ["log.jsonl", "gt.jsonl", "world.json"] {
        assert_eq!(sha256(&a.path().join(file)), sha256(&b.path().join(file)), "{file}");
    }
    let gt = read_poses(&a.path().join("gt.jsonl"));
    assert_eq!(gt.len(), 400);
    let other = TempDir::new().unwrap();
    simulate_into(other.path(), "multifloor", "4", Some("400"));
    assert_ne!(sha256(&a.path().join("log.jsonl")), sha256(&other.path().join("log.jsonl")));
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = TempDir::new().unwrap();
    assert_exit2(&simulate_into(dir.path(), "attic", "0", None), "config", "attic");
}

#[test]
fn bad_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[association]\nepsilonn = 1.0\n").unwrap();
    let out = textloop(&["--config", path_str(&cfg), "simulate", "--out", path_str(dir.path())]);
    assert_exit2(&out, "config", "epsilonn");
    let missing = dir.path().join("missing.toml");
    let out = textloop(&["--config", path_str(&missing), "simulate", "--out", path_str(dir.path())]);
    assert_exit2(&out, "config", "");
}

#[test]
fn detect_without_texts_writes_empty_loops() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut records = vec![LogRecord::calib(&default_rig())];
    for k in 0..30 {
        records.push(LogRecord::Odom { t: k as f64 * 0.1, frame: k, pose: Pose::identity() });
    }
    write_records(&log, &records);
    let out = textloop(&["detect", "--log", path_str(&log), "--out", path_str(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("loops.jsonl")).unwrap(), "");
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing["frames"], 30);
}

#[test]
fn truncated_line_names_the_line() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut text = String::new();
    let mut buf = Vec::new();
    write_jsonl(
        &[LogRecord::calib(&default_rig()), LogRecord::Odom { t: 0.0, frame: 0, pose: Pose::identity() }],
        &mut buf,
    )
    .unwrap();
    text.push_str(std::str::from_utf8(&buf).unwrap());
    text.push_str("{\"type\":\"odom\",\"t\":0.1,\"fr\n");
    std::fs::write(&log, text).unwrap();
    let out = textloop(&["detect", "--log", path_str(&log), "--out", path_str(dir.path())]);
    assert_exit2(&out, "input", "line 3");
}

#[test]
fn missing_calibration_exits_2() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log.jsonl");
    write_records(&log, &[LogRecord::Odom { t: 0.0, frame: 0, pose: Pose::identity() }]);
    let out = textloop(&["detect", "--log", path_str(&log), "--out", path_str(dir.path())]);
    assert_exit2(&out, "input", "line 1");
}

#[test]
fn missing_input_exits_2() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("nope.jsonl");
    let out = textloop(&["detect", "--log", path_str(&log), "--out", path_str(dir.path())]);
    assert_exit2(&out, "io", "nope.jsonl");
}

/// A noiseless corridor run reduced to two camera frames that read the same
/// door plate: one on the first lap and one on the revisit.
fn single_revisit_fixture() -> Vec<LogRecord> {
    let world = build_world(Scenario::Corridor, 5);
    let route = default_route(&world, 20.0);
    let sim = simulate(&world, &route, &default_rig(), &NoiseModel::noiseless(), &SensorParams::default(), 5).unwrap();
    let pattern = IdPattern::default();
    let lap_frames = (world.perimeter() / 0.15) as usize;
    let frame_of = |t: f64| (t * 10.0).floor() as usize;
    let texts: Vec<(f64, &textloop_core::records::DetectionRecord)> = sim
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Texts { t, detections } => Some(detections.iter().map(move |d| (*t, d))),
            _ => None,
        })
        .flatten()
        .filter(|(_, d)| pattern.classify(&d.text) == TextCategory::Id && d.conf >= 0.85)
        .collect();
    let (first, again) = texts
        .iter()
        .filter(|(t, _)| frame_of(*t) < 200)
        .find_map(|a| texts.iter().find(|b| b.1.text == a.1.text && frame_of(b.0) > lap_frames + 5).map(|b| (*a, *b)))
        .expect("a door plate seen on both passes");
    let keep = [frame_of(first.0), frame_of(again.0)];
    let mut out = Vec::new();
    for r in &sim.records {
        match r {
            LogRecord::Cloud { frame, .. } if !keep.contains(frame) => {}
            LogRecord::Texts { t, .. } => {
                for (tt, d) in [first, again] {
                    if tt == *t {
                        out.push(LogRecord::Texts { t: tt, detections: vec![d.clone()] });
                    }
                }
            }
            other => out.push(other.clone()),
        }
    }
    out
}

#[test]
fn fixture_with_one_revisit_gives_one_constraint() {
    let dir = TempDir::new().unwrap();
    let log = dir.path().join("log.jsonl");
    let records = single_revisit_fixture();
    assert_eq!(records.iter().filter(|r| matches!(r, LogRecord::Texts { .. })).count(), 2);
    write_records(&log, &records);
    let out = textloop(&["detect", "--log", path_str(&log), "--out", path_str(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loops = std::fs::read_to_string(dir.path().join("loops.jsonl")).unwrap();
    assert_eq!(loops.lines().count(), 1, "{loops}");
    let c: serde_json::Value = serde_json::from_str(loops.lines().next().unwrap()).unwrap();
    assert_eq!(c["source"], "id");
}

fn run_pipeline(dir: &Path, frames: &str) -> [PathBuf; 3] {
    assert!(simulate_into(dir, "multifloor", "7", Some(frames)).status.success());
    let d = path_str(dir);
    let log = dir.join("log.jsonl");
    let loops = dir.join("loops.jsonl");
    let traj = dir.join("traj.jsonl");
    let gt = dir.join("gt.jsonl");
    assert!(textloop(&["detect", "--log", path_str(&log), "--out", d]).status.success());
    assert!(textloop(&["optimize", "--log", path_str(&log), "--loops", path_str(&loops), "--out", d]).status.success());
    let out = textloop(&[
        "evaluate",
        "--traj",
        path_str(&traj),
        "--gt",
        path_str(&gt),
        "--loops",
        path_str(&loops),
        "--out",
        d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    [loops, traj, dir.join("report.json")]
}

#[test]
fn end_to_end_is_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let fa = run_pipeline(a.path(), "800");
    let fb = run_pipeline(b.path(), "800");
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(sha256(x), sha256(y), "{}", x.display());
    }
    let loops = std::fs::read_to_string(&fa[0]).unwrap();
    assert!(loops.lines().count() >= 1);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&fa[2]).unwrap()).unwrap();
    assert_eq!(report["fp"], 0);
}

#[test]
fn optimize_without_loops_returns_odometry() {
    let dir = TempDir::new().unwrap();
    assert!(simulate_into(dir.path(), "corridor", "1", Some("150")).status.success());
    let loops = dir.path().join("loops.jsonl");
    std::fs::write(&loops, "").unwrap();
    let log = dir.path().join("log.jsonl");
    let out =
        textloop(&["optimize", "--log", path_str(&log), "--loops", path_str(&loops), "--out", path_str(dir.path())]);
    assert!(out.status.success());
    let odo = read_poses(&log);
    let traj = read_poses(&dir.path().join("traj.jsonl"));
    assert_eq!(odo.len(), traj.len());
    for (a, b) in odo.iter().zip(&traj) {
        let (dt, dr) = a.distance_to(b);
        assert!(dt < 1e-12 && dr < 1e-12);
    }
}

#[test]
fn optimize_rejects_loops_beyond_log() {
    let dir = TempDir::new().unwrap();
    assert!(simulate_into(dir.path(), "corridor", "1", Some("50")).status.success());
    let loops = dir.path().join("loops.jsonl");
    std::fs::write(
        &loops,
        "{\"i\":80,\"j\":2,\"pose\":{\"t\":[0,0,0],\"q\":[1,0,0,0]},\"info_diag\":[1,1,1,1,1,1],\"source\":\"id\"}\n",
    )
    .unwrap();
    let log = dir.path().join("log.jsonl");
    let out =
        textloop(&["optimize", "--log", path_str(&log), "--loops", path_str(&loops), "--out", path_str(dir.path())]);
    assert_exit2(&out, "input", "80");
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let dir = TempDir::new().unwrap();
    assert!(simulate_into(dir.path(), "corridor", "2", Some("100")).status.success());
    let gt = dir.path().join("gt.jsonl");
    let est = dir.path().join("est.jsonl");
    let poses = read_poses(&gt);
    let odom: Vec<LogRecord> = poses
        .iter()
        .enumerate()
        .map(|(frame, pose)| LogRecord::Odom { t: frame as f64 * 0.1, frame, pose: *pose })
        .collect();
    write_records(&est, &odom);
    let out = textloop(&["evaluate", "--traj", path_str(&est), "--gt", path_str(&gt), "--out", path_str(dir.path())]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["ate_mean"].as_f64().unwrap() < 1e-9);
    let keys: BTreeSet<&str> = report.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    for k in ["recall", "precision", "tp", "fp", "fn", "ate_mean", "ate_per_pose", "params"] {
        assert!(keys.contains(k), "{k}");
    }
}

#[test]
fn evaluate_rejects_length_mismatch() {
    let dir = TempDir::new().unwrap();
    assert!(simulate_into(dir.path(), "corridor", "2", Some("100")).status.success());
    let other = TempDir::new().unwrap();
    assert!(simulate_into(other.path(), "corridor", "2", Some("90")).status.success());
    let out = textloop(&[
        "evaluate",
        "--traj",
        path_str(&other.path().join("log.jsonl")),
        "--gt",
        path_str(&dir.path().join("gt.jsonl")),
        "--out",
        path_str(dir.path()),
    ]);
    assert_exit2(&out, "input", "90");
}

#[test]
fn environment_overrides_config() {
    let dir = TempDir::new().unwrap();
    assert!(simulate_into(dir.path(), "corridor", "2", Some("100")).status.success());
    let gt = dir.path().join("gt.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_textloop"))
        .args([
            "evaluate",
            "--traj",
            path_str(&dir.path().join("log.jsonl")),
            "--gt",
            path_str(&gt),
            "--out",
            path_str(dir.path()),
        ])
        .env("TEXTLOOP__EVAL__TAU", "2.5")
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["params"]["tau"], 2.5);
    let out = Command::new(env!("CARGO_BIN_EXE_textloop"))
        .args(["evaluate", "--traj", path_str(&gt), "--gt", path_str(&gt), "--out", path_str(dir.path())])
        .env("TEXTLOOP__EVAL__TAU", "-1")
        .output()
        .unwrap();
    assert_exit2(&out, "config", "tau");
}
