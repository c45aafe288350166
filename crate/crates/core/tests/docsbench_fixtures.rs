use std::path::PathBuf;

use dpdyn::docsbench::{fixture_files, verify_fixture_file, GoldenFixture, Provenance};
use dpdyn::harness::ExperimentConfig;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn every_fixture_and_config_parses() {
    let files = fixture_files(fixture_dir()).unwrap();
    assert!(files.len() >= 5);
    for f in files {
        let fixture = GoldenFixture::load(&f).unwrap();
        let cfg = fixture_dir().join(&fixture.config);
        ExperimentConfig::load(&cfg).unwrap_or_else(|e| panic!("{}: {e}", cfg.display()));
    }
}

#[test]
fn accounting_fixtures_pass() {
    for name in [
        "accountants-mnist",
        "accountants-mnist-advc",
        "accountants-purchase",
        "accountants-lfw",
        "accountants-dyns-mnist",
    ] {
        let out = verify_fixture_file(fixture_dir().join(format!("{name}.fixture.json"))).unwrap();
        assert!(out.passed, "{out}");
    }
}

#[test]
fn negative_control_fails_with_delta() {
    let path = fixture_dir().join("negative-control.fixture.json");
    let fixture = GoldenFixture::load(&path).unwrap();
    assert!(matches!(fixture.provenance, Provenance::NegativeControl { .. }));
    let out = verify_fixture_file(&path).unwrap();
    assert!(!out.passed);
    let delta = out.checks[0].delta.unwrap();
    assert!((delta + 1.0).abs() < 0.01, "delta {delta}");
}
