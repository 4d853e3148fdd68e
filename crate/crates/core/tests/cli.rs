use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn asyndiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asyndiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn print_config_round_trips_overrides() {
    let out = asyndiff(&["sample", "--print-config", "--steps", "17", "--family=linear"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("steps = 17"));
    assert!(text.contains("linear"));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, text).unwrap();
    let again = asyndiff(&["sample", "--print-config", "--config", s(&file)]);
    assert_eq!(code(&again), 0);
    assert!(String::from_utf8(again.stdout).unwrap().contains("steps = 17"));
}

#[test]
fn bad_configs_exit_with_one() {
    let out = asyndiff(&["gen-data", "--no-such-key", "3"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let dir = tempfile::tempdir().unwrap();
    let out = asyndiff(&["gen-data", "--dims", "20", "--data-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    let out = asyndiff(&["sample", "--steps", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_without_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = asyndiff(&[
        "train",
        "--data-dir",
        s(&dir.path().join("nothing")),
        "--out-dir",
        s(&dir.path().join("run")),
        "--checkpoint-dir",
        s(&dir.path().join("ck")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str| {
        let data = dir.path().join(name);
        let out = asyndiff(&[
            "gen-data",
            "--dims",
            "16",
            "--dataset-size",
            "12",
            "--seed",
            "4",
            "--data-dir",
            s(&data),
            "--out-dir",
            s(&dir.path().join("run")),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        ["manifest.json", "images.f32", "masks.bits"].map(|f| fs::read(data.join(f)).unwrap())
    };
    assert_eq!(gen("a"), gen("b"));
}

#[test]
fn schedule_trace_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = asyndiff(&["schedule-trace", "--steps", "50", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "curves.csv",
        "shifted.csv",
        "schedules.svg",
        "gap.csv",
        "schedule_trace.json",
        "run.toml",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let gap = fs::read_to_string(dir.path().join("gap.csv")).unwrap();
    assert_eq!(gap.lines().count(), 10);
}

#[test]
fn failed_gate_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = asyndiff(&[
        "eval-gaussian",
        "--gaussian-side",
        "2",
        "--eval-samples",
        "20",
        "--steps",
        "10",
        "--trend-steps",
        "5",
        "--mean-tolerance",
        "1e-9",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("eval_gaussian.json")).unwrap();
    assert!(report.contains("\"passed\": false"));
}

#[test]
fn always_masked_oracle_run_traces_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let out = asyndiff(&[
        "sample",
        "--denoiser",
        "oracle",
        "--mask-policy",
        "fixed",
        "--fixed-mask",
        "all",
        "--family",
        "quadratic",
        "--steps",
        "10",
        "--samples",
        "1",
        "--gaussian-side",
        "3",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sample_000.pgm").is_file());
    assert!(dir.path().join("sample_000_nomask.pgm").is_file());
    let trace = fs::read_to_string(dir.path().join("trace_000.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,pixel_row,pixel_col,timestep,masked"));
    let mut steps = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let i: f64 = cols[0].parse().unwrap();
        let t: f64 = cols[3].parse().unwrap();
        assert!((t - (10.0 - i * i / 10.0)).abs() <= 1e-9, "{line}");
        steps = steps.max(i as usize);
    }
    assert_eq!(steps, 10);
}
