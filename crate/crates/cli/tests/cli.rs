use std::process::Command;

use serde_json::Value;

fn teachkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_teachkit"))
}

fn read(path: &std::path::Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_gen_writes_manifest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth.json");
    let status = teachkit()
        .args(["synth-gen", "--n", "24", "--size", "16", "--dir"])
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let r = read(&out);
    assert_eq!(r["images"], 24);
    assert_eq!(r["participants"], 2);
    assert!(dir.path().join("data/manifest.json").exists());
}

#[test]
fn acceptance_subset_prints_one_line_per_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("acc.json");
    let o = teachkit()
        .args(["acceptance", "--criteria", "6,7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.contains("criterion")).collect();
    assert_eq!(lines.len(), 2, "{stdout}");
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(o.status.success());
    assert_eq!(read(&out)["criteria"].as_array().unwrap().len(), 2);
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = teachkit()
        .args(["acceptance", "--suite", "nope", "--out"])
        .arg(dir.path().join("x.json"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}
