//! Experiment orchestration behind the command-line interface: the
//! `simulate`, `ulm`, `report` and `selftest` subcommands as library calls,
//! reusable from bindings.
//!
//! Every artifact carries the configuration hash of the run that produced
//! it; `report` refuses inputs whose hashes disagree.

use crate::beamform::{log_mip, Axis};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::metrics::{
    fsc, linear_fit, residual_statistics, split_tracks_odd_even, weighted_centroid,
    ResidualSample, ResidualSeries, SpeedStats,
};
use crate::record::{load_record, save_record};
use crate::registration::RegResult;
use crate::scene::scatterers_to_csv;
use crate::trackloop::{run_closed_loop, AcquisitionRecord};
use crate::ulm::{run_ulm, sr_grid_for, Localization, Track, UlmOutputs};
use crate::volume::{Grid3, Volume};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Run the closed loop for `cfg` and persist the record into `out_dir`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<AcquisitionRecord> {
    let record = run_closed_loop(cfg)?;
    save_record(&record, out_dir)?;
    // scatterer cloud of frame 0, for inspection
    if let Some(frame) = record.frames.first() {
        let world = crate::scene::World::build(&cfg.world_params())?;
        let bubbles = world.bubble_field(0.0, cfg.seed);
        let mut cloud = world.scatterers_at(frame.time, &frame.pose, &bubbles);
        for b in &frame.bubbles {
            cloud.push(crate::scene::Scatterer {
                position: b.position,
                amplitude: b.amplitude,
                kind: crate::scene::ScattererKind::Bubble,
                velocity: b.velocity,
            });
        }
        fs::write(out_dir.join("scatterers_frame0.csv"), scatterers_to_csv(&cloud))?;
    }
    // MIP of the first stored volume, for a quick look
    if let Some(vol) = record.frames.first().and_then(|f| f.volume.as_ref()) {
        log_mip(vol, 20.0, Axis::Y).save_pgm(&out_dir.join("frame0_mip_xz.pgm"))?;
    }
    Ok(record)
}

// ---------------------------------------------------------------------------
// ulm
// ---------------------------------------------------------------------------

fn tracks_csv(tracks: &[Track], hash: &str) -> String {
    let mut s = format!(
        "# config_hash={hash}\ntrack,frame,time_s,x_mm,y_mm,z_mm,ncc,link_vx,link_vy,link_vz\n"
    );
    for t in tracks {
        for (i, l) in t.localizations.iter().enumerate() {
            let v = if i < t.link_velocities.len() {
                t.link_velocities[i]
            } else {
                *t.link_velocities.last().unwrap_or(&Vec3::ZERO)
            };
            writeln!(
                s,
                "{},{},{:.9},{:.6},{:.6},{:.6},{:.4},{:.6},{:.6},{:.6}",
                t.id, l.frame_id, l.timestamp, l.position.x, l.position.y, l.position.z,
                l.ncc_peak, v.x, v.y, v.z
            )
            .unwrap();
        }
    }
    s
}

fn localizations_csv(per_frame: &[Vec<Localization>], hash: &str) -> String {
    let mut s = format!("# config_hash={hash}\nframe,time_s,x_mm,y_mm,z_mm,ncc\n");
    for frame in per_frame {
        for l in frame {
            writeln!(
                s,
                "{},{:.9},{:.6},{:.6},{:.6},{:.4}",
                l.frame_id, l.timestamp, l.position.x, l.position.y, l.position.z, l.ncc_peak
            )
            .unwrap();
        }
    }
    s
}

/// Parse a tracks.csv back into tracks, checking the hash.
pub fn load_tracks(path: &Path, expected_hash: &str, velocity_span: usize) -> Result<Vec<Track>> {
    let text = fs::read_to_string(path)?;
    if let Some(h) = text.lines().next().and_then(|l| l.strip_prefix("# config_hash=")) {
        if h.trim() != expected_hash {
            return Err(Error::ConfigHashMismatch {
                expected: expected_hash.into(),
                found: h.trim().into(),
            });
        }
    }
    let mut by_id: std::collections::BTreeMap<u64, Vec<Localization>> =
        std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 7 {
            continue;
        }
        let id: u64 = parts[0].parse().map_err(|_| Error::Format("bad track id".into()))?;
        let f = |i: usize| parts[i].parse::<f64>().unwrap_or(0.0);
        by_id.entry(id).or_default().push(Localization {
            position: Vec3::new(f(3), f(4), f(5)),
            ncc_peak: f(6),
            frame_id: parts[1].parse().unwrap_or(0),
            timestamp: f(2),
        });
    }
    Ok(by_id
        .into_iter()
        .map(|(id, locs)| {
            let vels = crate::ulm::link_velocities(&locs, velocity_span);
            Track { id, localizations: locs, link_velocities: vels }
        })
        .collect())
}

/// Run the offline pipeline on a record directory and persist maps, tracks,
/// localizations and MIP renderings into `out_dir`.
pub fn cmd_ulm(record_dir: &Path, out_dir: &Path) -> Result<UlmOutputs> {
    let record = load_record(record_dir)?;
    let outputs = run_ulm(&record)?;
    fs::create_dir_all(out_dir)?;
    let hash = &outputs.config_hash;

    outputs.psf.save(&out_dir.join("psf"), hash)?;
    outputs.maps.density.save(&out_dir.join("density"), hash)?;
    outputs.maps.speed.save(&out_dir.join("speed"), hash)?;
    outputs.smoothed.density.save(&out_dir.join("density_smooth"), hash)?;
    outputs.smoothed.speed.save(&out_dir.join("speed_smooth"), hash)?;
    outputs.power.save(&out_dir.join("power"), hash)?;
    fs::write(out_dir.join("tracks.csv"), tracks_csv(&outputs.tracks, hash))?;
    fs::write(
        out_dir.join("localizations.csv"),
        localizations_csv(&outputs.localizations_per_frame, hash),
    )?;
    log_mip(&outputs.smoothed.density, 30.0, Axis::Z)
        .save_pgm(&out_dir.join("density_mip_xy.pgm"))?;
    log_mip(&outputs.smoothed.density, 30.0, Axis::Y)
        .save_pgm(&out_dir.join("density_mip_xz.pgm"))?;
    log_mip(&outputs.power, 20.0, Axis::Z).save_pgm(&out_dir.join("power_mip_xy.pgm"))?;

    let mut residuals = format!("# config_hash={hash}\nframe,tx_mm,ty_mm,tz_mm,iterations,converged\n");
    for (k, r) in outputs.residuals.iter().enumerate() {
        writeln!(
            residuals,
            "{k},{:.6},{:.6},{:.6},{},{}",
            r.t.x, r.t.y, r.t.z, r.iterations, r.converged as u8
        )
        .unwrap();
    }
    fs::write(out_dir.join("residual_translations.csv"), residuals)?;

    let n_locs: usize = outputs.localizations_per_frame.iter().map(|f| f.len()).sum();
    let summary = format!(
        "# config_hash={hash}\nframes = {}\nlocalizations = {}\ntracks_before_persistence = {}\n\
         tracks = {}\ninvalid_voxels = {}\nmean_track_speed_mm_s = {:.4}\n",
        outputs.residuals.len(),
        n_locs,
        outputs.tracks_before_filter,
        outputs.tracks.len(),
        outputs.invalid_voxels,
        mean_track_speed(&outputs.tracks),
    );
    fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(outputs)
}

/// Mean of the per-track mean link speeds.
pub fn mean_track_speed(tracks: &[Track]) -> f64 {
    if tracks.is_empty() {
        return 0.0;
    }
    tracks.iter().map(|t| t.mean_speed()).sum::<f64>() / tracks.len() as f64
}

/// Mean of the speed map over voxels with nonzero density.
pub fn mean_map_speed(maps: &crate::ulm::SrMaps) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..maps.density.data.len() {
        if maps.density.data[i] > 0.0 {
            sum += maps.speed.data[i] as f64;
            n += 1;
        }
    }
    if n > 0 {
        sum / n as f64
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Landmark residual series of a record, measured the offline way: B-mode
/// volumes at fine spacing, weighted centroiding, displacement against
/// frame 0. The measurement window rides along with the recorded landmark
/// position (the offline analyst knows where the landmark is); the subvoxel
/// centroid itself comes entirely from the image.
pub fn landmark_residual_series(record: &AcquisitionRecord) -> Result<ResidualSeries> {
    let models = crate::ulm::FrameModels::new(record)?;
    let cfg = &record.config;
    let window_extent = Vec3::new(3.3, 3.3, 3.3);
    use rayon::prelude::*;
    let centroids: Vec<Result<Vec3>> = (0..record.frames.len())
        .into_par_iter()
        .map(|k| {
            let grid = Grid3::centered(
                record.frames[k].landmark_probe,
                window_extent,
                cfg.ulm.bmode_spacing_mm,
            );
            let vol = models.bmode(k, grid)?;
            Ok(weighted_centroid(&vol, cfg.metrics.centroid_window))
        })
        .collect();
    let mut samples = Vec::with_capacity(record.frames.len());
    let mut c0 = Vec3::ZERO;
    for (k, c) in centroids.into_iter().enumerate() {
        let c = c?;
        if k == 0 {
            c0 = c;
        }
        samples.push(ResidualSample {
            time: record.frames[k].time,
            dx: c.x - c0.x,
            dy: c.y - c0.y,
        });
    }
    Ok(ResidualSeries::new(samples, cfg.metrics.onset_mm))
}

/// Generate the evaluation report for a record (and optionally its ULM
/// outputs and a comparison record, e.g. the same scene without tracking).
pub fn cmd_report(
    record_dir: &Path,
    ulm_dir: Option<&Path>,
    compare_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<String> {
    let record = load_record(record_dir)?;
    let hash = record.config_hash.clone();
    fs::create_dir_all(out_dir)?;

    let mut report = String::new();
    writeln!(report, "sonotrack report").unwrap();
    writeln!(report, "config_hash = {hash}").unwrap();
    writeln!(report, "frames = {}", record.frames.len()).unwrap();
    writeln!(report, "tracking_enabled = {}", record.config.tracking.enabled).unwrap();
    writeln!(report, "fov_retention = {:.4}", record.fov_retention()).unwrap();

    if let Some(dir) = compare_dir {
        let other = load_record(dir)?;
        writeln!(
            report,
            "fov_retention_compare = {:.4} (tracking_enabled = {})",
            other.fov_retention(),
            other.config.tracking.enabled
        )
        .unwrap();
    }

    // residual motion statistics per speed level
    let series = landmark_residual_series(&record)?;
    let legs = record.config.motion_profile().legs();
    let stats = residual_statistics(&series, &legs);
    let mut res_csv = format!("# config_hash={hash}\nframe,time_s,dx_mm,dy_mm,magnitude_mm\n");
    for (k, s) in series.samples.iter().enumerate() {
        writeln!(res_csv, "{k},{:.9},{:.6},{:.6},{:.6}", s.time, s.dx, s.dy, s.magnitude())
            .unwrap();
    }
    fs::write(out_dir.join("residuals.csv"), res_csv)?;

    writeln!(report, "onset_frame = {:?}", series.onset_frame).unwrap();
    if !stats.is_empty() {
        writeln!(report, "\nresidual motion during stage movement:").unwrap();
        writeln!(report, "speed_mm_s  mean_mm  std_mm  frames").unwrap();
        for s in &stats {
            writeln!(report, "{:>9.1}  {:>7.3}  {:>6.3}  {:>6}", s.speed, s.mean, s.std, s.n)
                .unwrap();
        }
        if stats.len() >= 2 {
            let xs: Vec<f64> = stats.iter().map(|s| s.speed).collect();
            let ys: Vec<f64> = stats.iter().map(|s| s.mean).collect();
            let fit = linear_fit(&xs, &ys)?;
            writeln!(
                report,
                "regression: mean = {:.4} * speed + {:.4} (R^2 = {:.4})",
                fit.slope, fit.intercept, fit.r2
            )
            .unwrap();
        }
    }

    // FSC between odd/even trajectory maps
    if let Some(udir) = ulm_dir {
        let tracks = load_tracks(
            &udir.join("tracks.csv"),
            &hash,
            record.config.ulm.velocity_span,
        )?;
        if tracks.len() >= 2 {
            let grid = sr_grid_for(&tracks, record.config.ulm.sr_spacing_mm)?;
            let (odd, even) = split_tracks_odd_even(&tracks, grid);
            let use_smoothed = record.config.metrics.fsc_on_smoothed;
            let (da, db) = if use_smoothed {
                (
                    crate::ulm::smooth_maps(&odd, &record.config.ulm).density,
                    crate::ulm::smooth_maps(&even, &record.config.ulm).density,
                )
            } else {
                (odd.density, even.density)
            };
            match fsc(&da, &db) {
                Ok(res) => {
                    fs::write(out_dir.join("fsc.csv"), res.to_csv(&hash))?;
                    writeln!(
                        report,
                        "\nfsc: resolution = {:.1} um (crossed = {}, cube = {})",
                        res.resolution_um, res.crossed, res.cube
                    )
                    .unwrap();
                }
                Err(e) => {
                    writeln!(report, "\nfsc: unavailable ({e})").unwrap();
                }
            }
        } else {
            writeln!(report, "\nfsc: fewer than two tracks").unwrap();
        }
    }

    fs::write(out_dir.join("report.txt"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Quick built-in checks of load-bearing invariants; returns the failures.
pub fn cmd_selftest() -> Vec<(&'static str, bool)> {
    use crate::acoustics::{am_subtract, simulate_am_triplet, SimParams};
    use crate::scene::{ArraySpec, MotionProfile, Scatterer, ScattererKind};
    use crate::trackloop::{clamp_to_workspace, robot_move_duration, Workspace};

    let mut results = Vec::new();

    // stage kinematics closed form
    let profile = MotionProfile {
        mode: crate::scene::ProfileMode::MixedDemo,
        lead_in: 0.0,
        segments: vec![crate::scene::MotionSegment {
            direction: Vec3::new(1.0, 0.0, 0.0),
            distance: 20.0,
            speed: 2.0,
            accel: 3.0,
            dwell: 0.0,
        }],
    };
    let d = crate::scene::stage_position(&profile, 1.0);
    results.push(("stage trapezoid kinematics", (d.x - 4.0 / 3.0).abs() < 1e-9));

    // AM tissue cancellation
    let array = ArraySpec::default();
    let tissue = vec![Scatterer {
        position: Vec3::new(0.5, -0.5, 20.0),
        amplitude: 1.0,
        kind: ScattererKind::Tissue,
        velocity: Vec3::ZERO,
    }];
    let ok = match simulate_am_triplet(&tissue, &array, &SimParams::default())
        .and_then(|t| am_subtract(&t).map(|r| (t, r)))
    {
        Ok((t, r)) => r.total_energy() < 1e-10 * t.full.total_energy(),
        Err(_) => false,
    };
    results.push(("amplitude-modulation tissue cancellation", ok));

    // robot kinematics
    results.push((
        "robot reaches cruise at 10 mm",
        (robot_move_duration(10.0, 250.0, 50.0) - 0.4).abs() < 1e-9,
    ));

    // workspace gate
    let ws = Workspace::default();
    results.push((
        "workspace safety gate",
        clamp_to_workspace(Vec3::new(49.0, 0.0, 0.0), &ws).is_ok()
            && clamp_to_workspace(Vec3::new(51.0, 0.0, 0.0), &ws).is_err()
            && clamp_to_workspace(Vec3::new(0.0, 0.0, 6.0), &ws).is_err(),
    ));

    // persistence boundary
    let mk = |n: usize| -> Track {
        let locs: Vec<Localization> = (0..n)
            .map(|k| Localization {
                position: Vec3::new(k as f64 * 0.01, 0.0, 30.0),
                ncc_peak: 0.9,
                frame_id: k as u64,
                timestamp: k as f64 / 85.0,
            })
            .collect();
        Track { id: n as u64, localizations: locs, link_velocities: Vec::new() }
    };
    let kept = crate::ulm::persistence_filter(vec![mk(3), mk(4)], 4);
    results.push(("persistence filter boundary", kept.len() == 1 && kept[0].len() == 4));

    // FSC self-correlation
    let grid = Grid3::new(Vec3::ZERO, Vec3::new(0.02, 0.02, 0.02), [16, 16, 16]);
    let mut v = Volume::zeros(grid);
    for (i, x) in v.data.iter_mut().enumerate() {
        *x = ((i * 2654435761) % 97) as f32 / 97.0;
    }
    let ok = match fsc(&v, &v) {
        Ok(r) => r
            .correlations
            .iter()
            .enumerate()
            .all(|(k, &c)| r.shell_counts[k] == 0 || (c - 1.0).abs() < 1e-9),
        Err(_) => false,
    };
    results.push(("fsc self-correlation is unity", ok));

    results
}

// ---------------------------------------------------------------------------
// One-line helpers for the residual table
// ---------------------------------------------------------------------------

/// Simulate + measure residual stats for one direction/repeat, used by the
/// speed-sweep evaluation.
pub fn residual_sweep_stats(cfg: &ExperimentConfig) -> Result<Vec<SpeedStats>> {
    let record = run_closed_loop(cfg)?;
    let series = landmark_residual_series(&record)?;
    let legs = cfg.motion_profile().legs();
    Ok(residual_statistics(&series, &legs))
}

/// Convenience accessor for the per-frame residual translations of a ULM run.
pub fn residual_translations(outputs: &UlmOutputs) -> Vec<&RegResult> {
    outputs.residuals.iter().collect()
}
