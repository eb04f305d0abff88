//! End-to-end pipeline tests: config file in, record directory, offline
//! pipeline, report — including a run of the installed binary.

use sonotrack::cli;
use sonotrack::config::ExperimentConfig;
use sonotrack::record::load_record;
use std::path::Path;
use std::process::Command;

const QUICK_CONFIG: &str = "\
# quick pipeline exercise
seed = 31415

[scene]
profile = static
speckle_points = 400
bubbles_in_view = 4

[acquisition]
duration_s = 2.0
store_volumes = true

[ulm]
psf_instances = 3
";

fn base_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("sonotrack_pipeline_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn library_pipeline_round_trip() {
    let base = base_dir("lib");
    let cfg = ExperimentConfig::parse(QUICK_CONFIG).unwrap();
    let record = cli::cmd_simulate(&cfg, &base.join("record")).unwrap();
    assert_eq!(record.frames.len(), 171);
    assert!(base.join("record/volumes/frame_000000.raw").is_file());
    assert!(base.join("record/scatterers_frame0.csv").is_file());

    // reload and check identity of the essentials
    let loaded = load_record(&base.join("record")).unwrap();
    assert_eq!(loaded.config_hash, record.config_hash);
    assert_eq!(loaded.frames.len(), record.frames.len());

    let outputs = cli::cmd_ulm(&base.join("record"), &base.join("ulm")).unwrap();
    assert!(!outputs.tracks.is_empty(), "expected at least one track");
    for name in [
        "psf.raw",
        "density.raw",
        "density_smooth.raw",
        "speed.raw",
        "speed_smooth.raw",
        "power.raw",
        "tracks.csv",
        "localizations.csv",
        "density_mip_xy.pgm",
        "summary.txt",
        "residual_translations.csv",
    ] {
        assert!(base.join("ulm").join(name).is_file(), "missing {name}");
    }

    let report = cli::cmd_report(
        &base.join("record"),
        Some(&base.join("ulm")),
        None,
        &base.join("report"),
    )
    .unwrap();
    assert!(report.contains("fov_retention = 1.0000"));
    assert!(base.join("report/report.txt").is_file());
    assert!(base.join("report/residuals.csv").is_file());

    // a second report from the same inputs is byte-identical
    let report2 = cli::cmd_report(
        &base.join("record"),
        Some(&base.join("ulm")),
        None,
        &base.join("report2"),
    )
    .unwrap();
    assert_eq!(report, report2);

    // static scene: residual translations stay tiny
    for r in &outputs.residuals {
        assert!(r.t.norm() < 0.06, "static residual {} mm", r.t.norm());
    }
}

#[test]
fn report_rejects_mismatched_inputs() {
    let base = base_dir("mismatch");
    let cfg = ExperimentConfig::parse(QUICK_CONFIG).unwrap();
    cli::cmd_simulate(&cfg, &base.join("record")).unwrap();
    cli::cmd_ulm(&base.join("record"), &base.join("ulm")).unwrap();

    // a record from a different config
    let mut other = ExperimentConfig::parse(QUICK_CONFIG).unwrap();
    other.seed = 999;
    other.acquisition.duration_s = 0.5;
    cli::cmd_simulate(&other, &base.join("record_other")).unwrap();

    let err = cli::cmd_report(
        &base.join("record_other"),
        Some(&base.join("ulm")),
        None,
        &base.join("report"),
    );
    assert!(
        matches!(err, Err(sonotrack::Error::ConfigHashMismatch { .. })),
        "report must refuse tracks from another run"
    );
}

#[test]
fn binary_subcommands() {
    let exe = env!("CARGO_BIN_EXE_sonotrack");
    let base = base_dir("bin");
    std::fs::write(base.join("exp.cfg"), QUICK_CONFIG).unwrap();

    let run = |args: &[&str]| -> (bool, String) {
        let out = Command::new(exe).args(args).output().unwrap();
        (
            out.status.success(),
            String::from_utf8_lossy(&out.stdout).into_owned()
                + &String::from_utf8_lossy(&out.stderr),
        )
    };

    let (ok, out) = run(&["selftest"]);
    assert!(ok, "selftest failed:\n{out}");
    assert!(out.contains("PASS"));

    let cfg = base.join("exp.cfg");
    let record = base.join("record");
    let (ok, out) = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        record.to_str().unwrap(),
    ]);
    assert!(ok, "simulate failed:\n{out}");
    assert!(Path::new(&record).join("events.csv").is_file());

    let ulm = base.join("ulm");
    let (ok, out) = run(&[
        "ulm",
        "--record",
        record.to_str().unwrap(),
        "--out",
        ulm.to_str().unwrap(),
    ]);
    assert!(ok, "ulm failed:\n{out}");

    let report = base.join("report");
    let (ok, out) = run(&[
        "report",
        "--record",
        record.to_str().unwrap(),
        "--ulm",
        ulm.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(ok, "report failed:\n{out}");
    assert!(out.contains("fov_retention"));

    // bad arguments exit nonzero
    let (ok, _) = run(&["simulate", "--out", base.join("x").to_str().unwrap()]);
    assert!(!ok, "simulate without config/seed must fail");
    let (ok, _) = run(&["frobnicate"]);
    assert!(!ok);
}
