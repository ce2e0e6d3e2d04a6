use std::fs;
use std::process::Command;

use pbft_bench::harness::run_local;
use pbft_bench::keygen::keygen;
use pbft_bench::scenarios::{bundled, BUNDLED};
use pbft_bench::{BenchConfig, BenchError};
use pbft_core::crypto::{CryptoMode, Keyring, SignatureAlgorithm};
use pbft_core::sim::Scenario;

const BIN: &str = env!("CARGO_BIN_EXE_pbftstar");

#[test]
fn keygen_counts_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("keys");
    let s = keygen(4, 1, &out, SignatureAlgorithm::Ed25519, 1, false).unwrap();
    assert_eq!((s.keypairs, s.pairwise), (5, 10));
    assert!(matches!(
        keygen(4, 1, &out, SignatureAlgorithm::Ed25519, 1, false),
        Err(BenchError::Refused(_))
    ));
    keygen(4, 2, &out, SignatureAlgorithm::Ed25519, 1, true).unwrap();
    let ring = Keyring::read_dir(&out).unwrap();
    assert_eq!(ring.keypair_count(), 6);

    let s = keygen(
        15,
        0,
        &dir.path().join("k15"),
        SignatureAlgorithm::Ed25519,
        1,
        false,
    )
    .unwrap();
    assert_eq!((s.keypairs, s.pairwise), (15, 105));
}

#[test]
fn bundled_scenarios_pass() {
    for (name, text) in BUNDLED {
        let sc = Scenario::parse(text).unwrap();
        let (report, failures) = sc.run().unwrap();
        assert!(failures.is_empty(), "{name}: {failures:?}");
        assert!(report.is_safe());
    }
    assert!(bundled("leader_crash.scn").is_some());
    assert!(bundled("nope").is_none());
}

#[test]
fn cli_keygen_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    let ok = Command::new(BIN)
        .args([
            "keygen",
            "--n",
            "4",
            "--clients",
            "1",
            "--algorithm",
            "ed25519",
            "--out",
        ])
        .arg(&keys)
        .output()
        .unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("5 keypairs and 10 pairwise"));
    let again = Command::new(BIN)
        .args(["keygen", "--n", "4", "--out"])
        .arg(&keys)
        .output()
        .unwrap();
    assert!(!again.status.success());

    let sim = Command::new(BIN)
        .args(["simulate", "leader_crash"])
        .output()
        .unwrap();
    assert!(sim.status.success());
    assert!(String::from_utf8_lossy(&sim.stdout).starts_with("PASS leader_crash"));

    let bad = dir.path().join("bad.scn");
    fs::write(
        &bad,
        bundled("failfree_4")
            .unwrap()
            .replace("view_changes = 0", "view_changes = 3"),
    )
    .unwrap();
    let sim = Command::new(BIN)
        .arg("simulate")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!sim.status.success());
    assert!(String::from_utf8_lossy(&sim.stdout).contains("expected 3"));
}

#[test]
fn cli_rejects_bad_deployment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("deploy.toml");
    fs::write(&d, "[[node]]\nid = 5\naddr = \"127.0.0.1:1\"\n").unwrap();
    let out = Command::new(BIN)
        .args([
            "node",
            "--id",
            "0",
            "--keys",
            "/nonexistent",
            "--deployment",
        ])
        .arg(&d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn short_local_run_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchConfig {
        mode: CryptoMode::MacInterNode,
        signature: SignatureAlgorithm::Ed25519,
        duration_s: 2.0,
        warmup_s: 0.5,
        pool: 4_000,
        output: dir.path().to_path_buf(),
        ..Default::default()
    };
    let r = run_local(&cfg).unwrap();
    assert!(r.completed > 0);
    assert_eq!(r.failed, 0);
    assert_eq!(r.view_changes, 0);
    assert!(r.committed_requests >= r.completed);
    r.write(dir.path()).unwrap();
    for f in ["summary.csv", "latency_cdf.csv", "stages.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let stages = fs::read_to_string(dir.path().join("stages.csv")).unwrap();
    assert!(stages.contains("verify,PREPARE,"));
}
