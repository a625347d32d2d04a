use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn short_config(dir: &Path) -> String {
    let path = dir.join("short.toml");
    fs::write(&path, "seed = 3\n[horizon]\nt_f = 6.0\n").unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_track_writes_reference_csv() {
    let out = nmpc(&["synth-track", "--kind", "circle", "--duration", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,t,x,y,psi,v,delta,u1,u2"));
    assert_eq!(lines.clone().count(), 11);
    assert!(lines
        .next()
        .unwrap()
        .starts_with("0,0,0,0,0,10,0.09966865249116204,"));
}

#[test]
fn run_writes_trace_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = nmpc(&[
        "run",
        "-c",
        &cfg,
        "--scheme",
        "multistep_sens",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("multistep_sens"));
    let trace = fs::read_to_string(out_dir.join("trace_multistep_sens.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 3);
    assert_eq!(json["rows"][0]["steps"], 20);
    assert_eq!(json["rows"][0]["full_solves"], 7);
    assert!(out_dir.join("summary.txt").exists());
}

#[test]
fn compare_tracks_an_external_gzip_reference() {
    let dir = tempfile::tempdir().unwrap();
    let track = dir.path().join("track.csv.gz");
    let synth = nmpc(&[
        "synth-track",
        "--kind",
        "chicane",
        "--duration",
        "20",
        "-o",
        track.to_str().unwrap(),
    ]);
    assert_eq!(code(&synth), 0);
    let cfg = short_config(dir.path());
    let out_dir = dir.path().join("cmp");
    let out = nmpc(&[
        "compare",
        "-c",
        &cfg,
        "--track",
        track.to_str().unwrap(),
        "--scheme",
        "classic",
        "--scheme",
        "multistep",
        "--noise",
        "0",
        "--sequential",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    // The car starts on the reference and nothing disturbs it.
    for r in rows {
        assert!(r["l2_error"].as_f64().unwrap() < 1e-6, "{r}");
    }
}

#[test]
fn check_regularity_reports_the_first_solve() {
    let out = nmpc(&["check-regularity"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("\"licq_ok\": true"));
    assert!(stdout.trim_end().ends_with("strongly regular: true"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "sed = 1\n").unwrap();
    let invalid = dir.path().join("invalid.toml");
    fs::write(&invalid, "[horizon]\nm = 20\n").unwrap();
    for args in [
        vec!["run", "--scheme", "bogus"],
        vec!["run", "-c", bad.to_str().unwrap()],
        vec!["run", "-c", invalid.to_str().unwrap()],
        vec!["compare", "-c", "/nonexistent/config.toml"],
        vec!["run", "--track", "/nonexistent/track.csv"],
        vec!["synth-track", "--kind", "circle", "--radius", "2"],
        vec!["frobnicate"],
    ] {
        let out = nmpc(&args);
        assert_eq!(
            code(&out),
            2,
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn unwritable_output_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = nmpc(&[
        "run",
        "-c",
        &cfg,
        "--out-dir",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}
