use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carbonci::simulator::read_summary_csv;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_carbonci"));
    c.env_remove("CARBONCI_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

#[test]
fn synth_row_count_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        run(bin().args(["synth", "--regions", "12", "--days", "4", "--resolution-s", "300", "--seed", "7", "--out"]).arg(path));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + 12 * 1152 * 2);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

fn synth_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let intensity = dir.join("intensity.csv");
    let trace = dir.join("trace.csv");
    run(bin()
        .args(["synth", "--regions", "6", "--days", "3", "--seed", "5", "--noise", "0.2", "--jobs", "120", "--out"])
        .arg(&intensity)
        .arg("--trace-out")
        .arg(&trace));
    (intensity, trace)
}

#[test]
fn simulate_writes_five_rows_with_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let (intensity, trace) = synth_inputs(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(bin()
        .args(["simulate", "--strategies", "round_robin,location,location_time", "--buffers", "1,3,6", "--perfect-forecast"])
        .arg("--trace")
        .arg(&trace)
        .arg("--intensity")
        .arg(&intensity)
        .arg("--out-dir")
        .arg(&out_dir));
    assert!(String::from_utf8_lossy(&out.stdout).contains("location_time_6h"));

    let rows = read_summary_csv(std::fs::File::open(out_dir.join("summary.csv")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(labels, ["round_robin", "location", "location_time_1h", "location_time_3h", "location_time_6h"]);
    let total = |l: &str| rows.iter().find(|r| r.strategy == l).unwrap().total_reu;
    assert!(total("location_time_6h") <= total("location_time_3h"));
    assert!(total("location_time_3h") <= total("location_time_1h"));
    assert!(total("location_time_1h") <= total("location"));
    assert!(total("location") <= total("round_robin"));
    assert!(rows.iter().all(|r| r.deadline_violations == 0));
    for label in labels {
        assert!(out_dir.join(format!("series_{label}.csv")).exists());
    }

    run(bin().args(["report", "--check-dominance", "--out-dir"]).arg(&out_dir));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (intensity, trace) = synth_inputs(dir.path());
    let mut summaries = Vec::new();
    for name in ["x", "y"] {
        let out_dir = dir.path().join(name);
        run(bin()
            .args(["simulate", "--seed", "3"])
            .arg("--trace")
            .arg(&trace)
            .arg("--intensity")
            .arg(&intensity)
            .arg("--out-dir")
            .arg(&out_dir));
        summaries.push(std::fs::read(out_dir.join("summary.csv")).unwrap());
        summaries.push(std::fs::read(out_dir.join("plot_data.csv")).unwrap());
    }
    assert_eq!(summaries[0], summaries[2]);
    assert_eq!(summaries[1], summaries[3]);
}

#[test]
fn missing_trace_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-trace.csv");
    let out = bin()
        .arg("simulate")
        .arg("--trace")
        .arg(&missing)
        .arg("--intensity")
        .arg(dir.path().join("i.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&missing.display().to_string()), "{stderr}");
}

#[test]
fn bad_intensity_fails() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "region,timestamp,intensity_g_per_kwh\na,2024-01-01T00:00:00Z,-5\na,2024-01-01T00:05:00Z,3\n").unwrap();
    let out = bin()
        .arg("simulate")
        .arg("--trace")
        .arg(data("sample_trace.csv"))
        .arg("--intensity")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv"));
}

#[test]
fn parse_annotation_prints_json() {
    let out = run(bin().arg("parse-annotation").arg(data("example_workflow.yml")));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["carbon_aware"], true);
    assert_eq!(v["duration_estimate_s"], 3600);
    assert_eq!(v["deadline_offset_s"], 10800);
    assert_eq!(v["allowed_regions"], serde_json::json!(["eu-central-1"]));

    let out = run(bin().args(["parse-annotation", "--per-job"]).arg(data("example_workflow.yml")));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["job-a"]["carbon_aware"], true);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("carbonci.toml");
    std::fs::write(&cfg, "[synth]\nregions = 3\ndays = 1.0\nseed = 1\n").unwrap();
    let out = dir.path().join("i.csv");
    run(bin().env("CARBONCI_CONFIG", &cfg).args(["synth", "--regions", "2", "--out"]).arg(&out));
    let text = std::fs::read_to_string(&out).unwrap();
    // 2 regions from the flag, one day at five minutes from the file
    assert_eq!(text.lines().count(), 1 + 2 * 288 * 2);

    std::fs::write(&cfg, "[synth]\nbogus = 1\n").unwrap();
    let res = bin().env("CARBONCI_CONFIG", &cfg).args(["synth", "--out"]).arg(&out).output().unwrap();
    assert!(!res.status.success());
}

#[test]
fn bundled_trace_loads_in_order() {
    let jobs = carbonci::load_trace_csv(data("sample_trace.csv")).unwrap();
    assert_eq!(jobs.len(), 50);
    let min = jobs.iter().map(|j| j.request.arrival).min().unwrap();
    assert_eq!(jobs[0].request.arrival, min);
}
