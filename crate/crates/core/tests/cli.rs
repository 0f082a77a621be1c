use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const PROFILE: &str = r#"
profile_id = "cohort-9"
data_description = "asthma registry"
provider_name = "lung clinic"

[permissions]
allowed_purposes = ["general-research"]

[meta_conditions]
contains_personal_data = true
"#;

fn luce(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_luce")).current_dir(dir).args(args).output().expect("binary runs")
}

/// Runs and requires success; returns stdout.
fn ok(dir: &Path, args: &[&str]) -> String {
    let out = luce(dir, args);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{args:?} failed\nstdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = luce(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned() + &String::from_utf8_lossy(&out.stdout)
}

#[test]
fn session_flow_through_revocation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("profile.toml"), PROFILE).unwrap();
    fs::write(d.join("data.csv"), "anon_id,age\nanon-1,33\nanon-2,71\n").unwrap();

    ok(d, &["--seed", "3", "publish", "--profile", "profile.toml", "--license", "63", "--period", "5", "--data", "data.csv"]);
    // the profile is copied in, so the original may go away
    fs::remove_file(d.join("profile.toml")).unwrap();
    assert!(ok(d, &["query", "asthma"]).contains("ds-1"));
    ok(d, &["request", "ds-1", "--purpose", "general-research"]);
    ok(d, &["tick", "2"]);
    ok(d, &["agree", "ds-1", "--license", "63"]);
    ok(d, &["open", "ds-1"]);
    ok(d, &["act", "alice/ds-1", "distribute", "--notice", "--attrib"]);
    assert!(ok(d, &["act", "ds-1", "commercial-use", "--as", "alice"]).contains("commercial use prohibited"));
    ok(d, &["tick", "5"]);
    let contract = ok(d, &["inspect", "contract", "ds-1"]);
    assert!(contract.contains("revoked"), "{contract}");
    fails(d, &["act", "alice/ds-1", "read"]);

    ok(d, &["export", "chain.jsonl"]);
    assert!(ok(d, &["inspect", "--chain", "chain.jsonl"]).contains("ok"));
    let text = fs::read_to_string(d.join("chain.jsonl")).unwrap();
    fs::write(d.join("tampered.jsonl"), text.replacen("commercial-use", "commercial-usf", 1).replacen("\"63\"", "\"31\"", 1)).unwrap();
    assert!(fails(d, &["inspect", "--chain", "tampered.jsonl"]).contains("FAILED"));

    // replay gives the same chain
    ok(d, &["export", "again.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("again.jsonl")).unwrap(), text);

    ok(d, &["reset"]);
    assert!(!d.join(".luce").exists());
}

#[test]
fn rejected_steps_are_not_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails(d, &["open", "ds-1"]);
    ok(d, &["join", "carol", "requester"]);
    fails(d, &["join", "carol", "requester"]);
    let steps = fs::read_to_string(d.join(".luce/steps.scn")).unwrap();
    assert_eq!(steps.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count(), 1, "{steps}");
}

#[test]
fn bundled_runs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let listing = ok(d, &["scenarios"]);
    for name in ["share", "reuse_monitor", "gdpr", "share_reuse_revoke", "erasure_roundtrip"] {
        assert!(listing.contains(name), "{listing}");
        ok(d, &["run", name]);
    }
    let trace = ok(d, &["run", "share", "--trace"]);
    assert!(trace.contains("block=1 tick=1 sender=provider fn=publishedDataset"), "{trace}");
    fails(d, &["run", "no-such-scenario"]);
    fs::write(d.join("bad.scn"), "0 provider publish\n").unwrap();
    fails(d, &["run", "bad.scn"]);
}

#[test]
fn license_explorer() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["license", "63"]);
    assert!(out.contains("CC-BY-NC"), "{out}");
    fails(dir.path(), &["license", "300"]);
    fails(dir.path(), &["license", "64"]);
}
