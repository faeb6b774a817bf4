use std::path::Path;
use std::process::{Command, Output};

fn dumpscan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dumpscan"))
        .args(["--log-format", "text", "--log", "warn"])
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(dir: &Path) {
    ok(&dumpscan(
        &["synth", "make", "--rows", "10", "--cols", "10", "--plant", "13", "--gsd", "0.1", "--out", "fx"],
        dir,
    ));
    assert!(dir.join("fx/fixture.tif").is_file());
    assert!(dir.join("fx/truth.csv").is_file());
}

#[test]
fn synthetic_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fixture(dir);
    ok(&dumpscan(
        &["run", "--input", "synthetic=fx/fixture.tif", "--out-dir", "out", "--name", "r1"],
        dir,
    ));
    let run = dir.join("out/r1");
    for f in ["manifest.json", "config.resolved.toml", "grid/synthetic.csv", "infer/predictions.csv", "map/summary.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let summary = std::fs::read_to_string(run.join("map/summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("region_id,n_tiles,n_waste,oddmswc,rank"));
    assert_eq!(lines.next(), Some("synthetic,100,13,13,1"));

    let report = ok(&dumpscan(
        &["eval", "metrics", "--preds", "out/r1/infer/predictions.csv", "--truth", "fx/truth.csv"],
        dir,
    ));
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["n"], 100);
    assert_eq!(v["confusion"]["tp"], 13);
    assert_eq!(v["confusion"]["tn"], 87);
    assert_eq!(v["confusion"]["fp"], 0);

    // Recomputing the map from the predictions gives the same table.
    ok(&dumpscan(
        &["map", "oddmswc", "--preds", "out/r1/infer/predictions.csv", "--out", "again.csv"],
        dir,
    ));
    assert_eq!(std::fs::read_to_string(dir.join("again.csv")).unwrap(), summary);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(dumpscan(&["frobnicate"], dir).status.code(), Some(2));
    assert_eq!(dumpscan(&["run", "--no-such-flag"], dir).status.code(), Some(2));
    let bad = dumpscan(&["run", "--set", "bogus.x=1", "--out-dir", "out"], dir);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
    assert_eq!(dumpscan(&["--help"], dir).status.code(), Some(0));
}

#[test]
fn missing_input_file_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dumpscan(&["eval", "metrics", "--preds", "absent.csv", "--truth", "also_absent.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.csv"), "{err}");
}
