//! Exit codes and files of the command-line front end.

use std::path::Path;

use serde_json::Value;
use trustsim::cli::{main_with, EXIT_CONFIG, EXIT_MISMATCH, EXIT_OK};

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("trustsim").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn run_to(dir: &Path, file: &str, args: &[&str]) -> (i32, String) {
    let path = dir.join(file);
    let mut all = vec!["run"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--out", path.to_str().unwrap()]);
    let (code, out, err) = cli(&all);
    assert!(code != EXIT_OK || path.exists(), "no transcript written: {out}{err}");
    (code, out)
}

fn verify(path: &Path) -> i32 {
    cli(&["verify", path.to_str().unwrap()]).0
}

#[test]
fn list_shows_the_catalog() {
    let (code, out, _) = cli(&["list", "--json"]);
    assert_eq!(code, EXIT_OK);
    let entries: Vec<Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(entries.len(), 12);
    assert!(entries.iter().all(|e| e["name"].is_string() && e["attacks"].is_array()));
    let (code, text, _) = cli(&["list"]);
    assert_eq!(code, EXIT_OK);
    assert!(text.contains("pos-sep-duties (pos-billing)"));
}

#[test]
fn run_writes_transcript_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_to(dir.path(), "t.jsonl", &["pos-sep-duties", "--seed", "4", "--attack", "reuse-token"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("PASS attack:reuse-token"));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(verify(&dir.path().join("t.jsonl")), EXIT_OK);
}

#[test]
fn run_rejects_bad_configuration() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_to(dir.path(), "a.jsonl", &["no-such-scenario"]).0, EXIT_CONFIG);
    assert_eq!(run_to(dir.path(), "b.jsonl", &["prepaid-happy", "--attack", "strip-ack"]).0, EXIT_CONFIG);
    assert_eq!(run_to(dir.path(), "c.jsonl", &["pos-fig4", "--variant", "encryption=maybe"]).0, EXIT_CONFIG);
    assert_eq!(run_to(dir.path(), "d.jsonl", &["pos-fig4", "--variant", "nonsense"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["run"]).0, EXIT_CONFIG);
}

#[test]
fn shorthand_flags_become_variants() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run_to(dir.path(), "u.jsonl", &["clone-attack-bound", "--registry", "unbound"]);
    // Switching the bound script to unbound admits a clone, which its
    // expectations forbid.
    assert_eq!(code, EXIT_MISMATCH, "{out}");
    let first = std::fs::read_to_string(dir.path().join("u.jsonl")).unwrap();
    let header: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(header["variants"]["mode"], "unbound");
}

fn edit_lines(path: &Path, f: impl Fn(&mut Value)) {
    let text = std::fs::read_to_string(path).unwrap();
    let edited: String = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            f(&mut v);
            v.to_string() + "\n"
        })
        .collect();
    std::fs::write(path, edited).unwrap();
}

#[test]
fn verify_flags_extra_billing_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.jsonl");
    assert_eq!(run_to(dir.path(), "b.jsonl", &["pos-sep-duties", "--seed", "2"]).0, EXIT_OK);
    edit_lines(&path, |v| {
        if v["type"] == "message" && v["msg"]["kind"] == "billing-package" {
            v["msg"]["payload"]["goods"] = serde_json::json!({ "label": "good", "value": ["cola"] });
        }
    });
    let (code, out, _) = cli(&["verify", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_MISMATCH);
    assert!(out.contains("FAIL billing-package-exact"), "{out}");
}

#[test]
fn verify_flags_foreign_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    assert_eq!(run_to(dir.path(), "s.jsonl", &["prepaid-happy", "--seed", "7"]).0, EXIT_OK);
    edit_lines(&path, |v| {
        if v.get("schema").is_some() {
            v["seed"] = 8.into();
        }
    });
    let (code, out, _) = cli(&["verify", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_MISMATCH);
    assert!(out.contains("FAIL replay-identical"), "{out}");
}

#[test]
fn verify_with_expectation_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.jsonl");
    assert_eq!(run_to(dir.path(), "e.jsonl", &["prepaid-happy", "--seed", "3"]).0, EXIT_OK);
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "grants = 3\nfinal_balance = 85\n").unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "grants = 4\n").unwrap();
    let p = path.to_str().unwrap();
    assert_eq!(cli(&["verify", p, "--expect", good.to_str().unwrap()]).0, EXIT_OK);
    assert_eq!(cli(&["verify", p, "--expect", bad.to_str().unwrap()]).0, EXIT_MISMATCH);
    std::fs::write(&bad, "grants = \"many\"\n").unwrap();
    assert_eq!(cli(&["verify", p, "--expect", bad.to_str().unwrap()]).0, EXIT_CONFIG);
}

#[test]
fn verify_parse_errors_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.jsonl");
    std::fs::write(&path, "not json\n").unwrap();
    assert_eq!(verify(&path), EXIT_CONFIG);
    assert_eq!(verify(&dir.path().join("missing.jsonl")), EXIT_CONFIG);
    std::fs::write(
        &path,
        "{\"schema\":\"trustsim-transcript/1\",\"scenario\":\"gone\",\"seed\":1,\"attacks\":[],\"variants\":{}}\n",
    )
    .unwrap();
    assert_eq!(verify(&path), EXIT_MISMATCH);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_trustsim");
    let dir = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(bin)
        .args(["run", "facility-entry", "--seed", "1"])
        .env("TRUSTSIM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    assert!(dir.path().join("facility-entry-1.jsonl").exists());
    let status = std::process::Command::new(bin).args(["run", "nope"]).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
}
