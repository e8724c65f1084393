//! End-to-end checks of the batch front door: exit codes, report
//! reproducibility, and config diagnostics.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmvlab"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mmvlab_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn solve_reports_the_closed_forms() {
    let out = tmp_dir("solve");
    let status = bin()
        .args([
            "solve",
            "--scenario",
            "portfolio_const",
            "--paths",
            "100",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let h0 = report["h0"].as_f64().unwrap();
    let y0 = report["y0"].as_f64().unwrap();
    assert!((h0 - 0.03f64.exp()).abs() < 1e-9);
    assert!((y0 - 0.25f64.exp()).abs() < 1e-9);
    assert_eq!(report["meta"]["seed"].as_u64().unwrap(), 42);
    assert!(out.join("run.json").exists());
}

#[test]
fn identical_manifests_give_byte_identical_reports() {
    let (out1, out2) = (tmp_dir("rep1"), tmp_dir("rep2"));
    for out in [&out1, &out2] {
        let status = bin()
            .args([
                "verify-saddle",
                "--scenario",
                "portfolio_const",
                "--paths",
                "30000",
                "--steps",
                "64",
                "--seed",
                "7",
                "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out1.join("report.json")).unwrap();
    let b = std::fs::read(out2.join("report.json")).unwrap();
    assert_eq!(a, b, "reports differ between identical runs");
}

#[test]
fn worker_count_does_not_change_the_report() {
    let (out1, out2) = (tmp_dir("thr1"), tmp_dir("thr2"));
    for (out, threads) in [(&out1, "1"), (&out2, "3")] {
        let status = bin()
            .env("MMVLAB_THREADS", threads)
            .args([
                "duality",
                "--scenario",
                "portfolio_const",
                "--paths",
                "2000",
                "--steps",
                "32",
                "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out1.join("report.json")).unwrap();
    let b = std::fs::read(out2.join("report.json")).unwrap();
    assert_eq!(a, b, "MMVLAB_THREADS changed the report");
}

#[test]
fn malformed_scenario_exits_2_and_names_the_field() {
    let out = tmp_dir("bad");
    let scenario = out.join("missing_theta.json");
    std::fs::write(
        &scenario,
        r#"{"x": 1.0, "grid": {"horizon": 1.0, "steps": 8},
            "model": {"tier": "deterministic", "a": {"kind": "constant", "value": 0.0},
                      "b": [0.1], "c": [0.0], "d": [[0.2]]},
            "n_paths": 16, "seed": 1}"#,
    )
    .unwrap();
    let output = bin()
        .args(["solve", "--scenario"])
        .arg(&scenario)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("/theta"), "stderr: {stderr}");
}

#[test]
fn scenario_files_load_from_disk_too() {
    let out = tmp_dir("disk");
    let scenario = out.join("scn.json");
    std::fs::write(
        &scenario,
        r#"{"x": 2.0, "theta": 0.5,
            "grid": {"horizon": 1.0, "steps": 16},
            "model": {"tier": "deterministic", "a": {"kind": "constant", "value": 0.01},
                      "b": [0.05], "c": [0.0], "d": [[0.25]]},
            "n_paths": 64, "seed": 9}"#,
    )
    .unwrap();
    let status = bin()
        .args(["portfolio", "--scenario"])
        .arg(&scenario)
        .args(["--paths", "2000", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"].as_str().unwrap(), "portfolio");
    assert!(report["pass"].as_bool().unwrap());
}

#[test]
fn dumps_are_written_when_requested() {
    let out = tmp_dir("dump");
    let status = bin()
        .args([
            "verify-saddle",
            "--scenario",
            "portfolio_const",
            "--paths",
            "30000",
            "--steps",
            "16",
            "--dump-paths",
            "8",
            "--dump-bsde",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let paths = std::fs::read_to_string(out.join("paths.csv")).unwrap();
    assert!(paths.starts_with("path,k,t,X,Lambda,u_1"));
    // 8 paths x 17 nodes + header
    assert_eq!(paths.lines().count(), 8 * 17 + 1);
    let bsde = std::fs::read_to_string(out.join("bsde.csv")).unwrap();
    assert!(bsde.starts_with("k,t,h,L_1,Y,Z_1"));
    assert_eq!(bsde.lines().count(), 17 + 1);
}
