use std::path::Path;
use std::process::{Command, Output};

fn nls(command: &str, config: &str, dir: &Path) -> Output {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_nls"))
        .args([command, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn results(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/results.json")).unwrap()).unwrap()
}

#[test]
fn spectrum_scen_a() {
    let dir = tempfile::tempdir().unwrap();
    let o = nls("spectrum", r#"{"scenario":"SCEN-A"}"#, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = results(dir.path())["summary"]["s"].as_f64().unwrap();
    assert!((0.999999..=1.000001).contains(&s), "s = {s}");
    let resolved = std::fs::read_to_string(dir.path().join("out/resolved-config.json")).unwrap();
    assert!(resolved.contains("\"n\": 200") && resolved.contains("\"steps\": 400"));
    let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn sweep_range_scen_e_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = nls("sweep-range", r#"{"scenario":"SCEN-E","n":100,"steps":50}"#, dir.path());
    assert!(
        matches!(o.status.code(), Some(0 | 2)),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,s,residual,iters,target");
    assert_eq!(lines.len(), 4);
    for row in &lines[1..] {
        let target: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!((target + std::f64::consts::PI.powi(2)).abs() < 0.05, "{target}");
    }
}

#[test]
fn certify_scen_d() {
    let dir = tempfile::tempdir().unwrap();
    let o = nls("certify", r#"{"scenario":"SCEN-D"}"#, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let gap = results(dir.path())["summary"]["max_gap"].as_f64().unwrap();
    assert!(gap <= 1e-6, "{gap}");
}

#[test]
fn misspelled_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = nls("spectrum", r#"{"sceneario":"SCEN-A"}"#, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sceneario"));
}

#[test]
fn inline_spec_without_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let o = nls(
        "spectrum",
        r#"{"spec":{"dispersal":{"raw":{"d":[["1"]]}},"a":[["0"]]}}"#,
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("kernels required"));
}

#[test]
fn command_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let o = nls("certify", r#"{"command":"spectrum","scenario":"SCEN-A"}"#, dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn failed_check_exits_two() {
    // A zero tolerance cannot be certified.
    let dir = tempfile::tempdir().unwrap();
    let o = nls(
        "certify",
        r#"{"scenario":"SCEN-C","n":40,"steps":40,"tolerance":0}"#,
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn repeated_runs_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = r#"{"scenario":"SCEN-B","n":60,"steps":20,"workers":1}"#;
    nls("spectrum", cfg, a.path());
    nls("spectrum", cfg, b.path());
    let read = |d: &Path| std::fs::read(d.join("out/results.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}
