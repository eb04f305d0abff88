//! On-disk form of an acquisition record.
//!
//! A record directory is self-contained: the resolved config (whose hash
//! stamps every other file), per-frame poses and ground truth, per-frame
//! bubble observations, the event timeline, and optionally the online crop
//! volumes. The offline pipeline rebuilds everything else it needs from
//! these files plus the seed.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scene::ProbePose;
use crate::trackloop::{AcquisitionRecord, BubbleObs, EventKind, FrameRecord, TimelineEvent};
use crate::volume::{Grid3, Volume};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Persist a record into `dir` (created if needed).
pub fn save_record(record: &AcquisitionRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hash = &record.config_hash;
    write_text(&dir.join("config.txt"), &record.config.serialize())?;

    let mut poses = format!("# config_hash={hash}\nframe,time_s,x_mm,y_mm,z_mm,yaw_deg\n");
    for f in &record.frames {
        writeln!(
            poses,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            f.id, f.time, f.pose.translation.x, f.pose.translation.y, f.pose.translation.z,
            f.pose.yaw_deg
        )
        .unwrap();
    }
    write_text(&dir.join("poses.csv"), &poses)?;

    let mut gt = format!(
        "# config_hash={hash}\nframe,time_s,stage_x_mm,stage_y_mm,stage_z_mm,\
         landmark_x_mm,landmark_y_mm,landmark_z_mm,in_crop,n_bubbles\n"
    );
    for f in &record.frames {
        writeln!(
            gt,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            f.id,
            f.time,
            f.stage_disp.x,
            f.stage_disp.y,
            f.stage_disp.z,
            f.landmark_probe.x,
            f.landmark_probe.y,
            f.landmark_probe.z,
            f.in_crop as u8,
            f.bubbles.len()
        )
        .unwrap();
    }
    write_text(&dir.join("ground_truth.csv"), &gt)?;

    let mut bub = format!(
        "# config_hash={hash}\nframe,bubble,x_mm,y_mm,z_mm,vx_mm_s,vy_mm_s,vz_mm_s,amplitude\n"
    );
    for f in &record.frames {
        for b in &f.bubbles {
            writeln!(
                bub,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                f.id,
                b.id,
                b.position.x,
                b.position.y,
                b.position.z,
                b.velocity.x,
                b.velocity.y,
                b.velocity.z,
                b.amplitude
            )
            .unwrap();
        }
    }
    write_text(&dir.join("bubbles.csv"), &bub)?;

    let mut ev = format!("# config_hash={hash}\ntime_s,kind,payload\n");
    for e in &record.events {
        writeln!(ev, "{:.9},{},{}", e.time, e.kind.tag(), e.payload).unwrap();
    }
    write_text(&dir.join("events.csv"), &ev)?;

    let mut an = format!("# config_hash={hash}\ntime_s,message\n");
    for (t, msg) in &record.anomalies {
        writeln!(an, "{t:.9},{msg}").unwrap();
    }
    write_text(&dir.join("anomalies.csv"), &an)?;

    let g = record.crop_grid;
    let meta = format!(
        "# config_hash={hash}\ncrop_origin = {:.9} {:.9} {:.9}\ncrop_spacing = {:.9} {:.9} {:.9}\n\
         crop_dims = {} {} {}\nstart_translation = {:.9} {:.9} {:.9}\nstart_yaw_deg = {:.9}\n",
        g.origin.x, g.origin.y, g.origin.z, g.spacing.x, g.spacing.y, g.spacing.z,
        g.dims[0], g.dims[1], g.dims[2],
        record.start_pose.translation.x, record.start_pose.translation.y,
        record.start_pose.translation.z, record.start_pose.yaw_deg,
    );
    write_text(&dir.join("meta.txt"), &meta)?;

    if record.frames.iter().any(|f| f.volume.is_some()) {
        let vols = dir.join("volumes");
        fs::create_dir_all(&vols)?;
        for f in &record.frames {
            if let Some(v) = &f.volume {
                v.save(&vols.join(format!("frame_{:06}", f.id)), hash)?;
            }
        }
    }
    Ok(())
}

fn csv_rows(text: &str) -> impl Iterator<Item = Vec<String>> + '_ {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| l.split(',').map(|t| t.trim().to_string()).collect())
}

fn header_hash(text: &str) -> Option<String> {
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(|h| h.trim().to_string())
}

/// Load a record directory back. Volumes are reattached when present on
/// disk; otherwise frames carry no volume and consumers re-synthesize.
pub fn load_record(dir: &Path) -> Result<AcquisitionRecord> {
    let config = ExperimentConfig::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
    let hash = config.hash();

    let poses_text = fs::read_to_string(dir.join("poses.csv"))?;
    let gt_text = fs::read_to_string(dir.join("ground_truth.csv"))?;
    let bub_text = fs::read_to_string(dir.join("bubbles.csv"))?;
    let ev_text = fs::read_to_string(dir.join("events.csv"))?;
    for (name, text) in [("poses.csv", &poses_text), ("ground_truth.csv", &gt_text)] {
        if let Some(h) = header_hash(text) {
            if h != hash {
                return Err(Error::ConfigHashMismatch { expected: hash.clone(), found: format!("{h} ({name})") });
            }
        }
    }

    let mut frames: Vec<FrameRecord> = Vec::new();
    for row in csv_rows(&poses_text) {
        if row.len() < 6 {
            return Err(Error::Format("poses.csv row too short".into()));
        }
        let id: u64 = row[0].parse().map_err(|_| Error::Format("bad frame id".into()))?;
        let f = |i: usize| row[i].parse::<f64>().unwrap_or(0.0);
        frames.push(FrameRecord {
            id,
            time: f(1),
            pose: ProbePose::new(Vec3::new(f(2), f(3), f(4)), f(5)),
            stage_disp: Vec3::ZERO,
            landmark_probe: Vec3::ZERO,
            in_crop: true,
            bubbles: Vec::new(),
            volume: None,
            channel: None,
        });
    }
    for row in csv_rows(&gt_text) {
        let id: usize = row[0].parse().map_err(|_| Error::Format("bad frame id".into()))?;
        let f = |i: usize| row[i].parse::<f64>().unwrap_or(0.0);
        let frame = frames
            .get_mut(id)
            .ok_or_else(|| Error::Format("ground truth references unknown frame".into()))?;
        frame.stage_disp = Vec3::new(f(2), f(3), f(4));
        frame.landmark_probe = Vec3::new(f(5), f(6), f(7));
        frame.in_crop = row[8] == "1";
    }
    for row in csv_rows(&bub_text) {
        let id: usize = row[0].parse().map_err(|_| Error::Format("bad frame id".into()))?;
        let f = |i: usize| row[i].parse::<f64>().unwrap_or(0.0);
        let frame = frames
            .get_mut(id)
            .ok_or_else(|| Error::Format("bubble row references unknown frame".into()))?;
        frame.bubbles.push(BubbleObs {
            id: row[1].parse().unwrap_or(0),
            position: Vec3::new(f(2), f(3), f(4)),
            velocity: Vec3::new(f(5), f(6), f(7)),
            amplitude: f(8),
        });
    }

    let mut events = Vec::new();
    for row in csv_rows(&ev_text) {
        let kind = match row[1].as_str() {
            "frame_acquired" => EventKind::FrameAcquired,
            "beamform_done" => EventKind::BeamformDone,
            "registration_done" => EventKind::RegistrationDone,
            "command_issued" => EventKind::CommandIssued,
            "robot_stopped" => EventKind::RobotStopped,
            other => return Err(Error::Format(format!("unknown event kind {other}"))),
        };
        events.push(TimelineEvent {
            time: row[0].parse().unwrap_or(0.0),
            kind,
            payload: row[2].parse().unwrap_or(0),
        });
    }

    let mut anomalies = Vec::new();
    if let Ok(an_text) = fs::read_to_string(dir.join("anomalies.csv")) {
        for row in csv_rows(&an_text) {
            if row.len() >= 2 {
                anomalies.push((row[0].parse().unwrap_or(0.0), row[1..].join(",")));
            }
        }
    }

    let meta = fs::read_to_string(dir.join("meta.txt"))?;
    let mut crop_origin = Vec3::ZERO;
    let mut crop_spacing = Vec3::new(1.0, 1.0, 1.0);
    let mut crop_dims = [1usize; 3];
    let mut start_translation = Vec3::ZERO;
    let mut start_yaw = 0.0;
    for line in meta.lines() {
        let Some((key, val)) = line.split_once('=') else { continue };
        let nums: Vec<f64> =
            val.split_whitespace().filter_map(|t| t.parse::<f64>().ok()).collect();
        match key.trim() {
            "crop_origin" if nums.len() == 3 => crop_origin = Vec3::new(nums[0], nums[1], nums[2]),
            "crop_spacing" if nums.len() == 3 => {
                crop_spacing = Vec3::new(nums[0], nums[1], nums[2])
            }
            "crop_dims" if nums.len() == 3 => {
                crop_dims = [nums[0] as usize, nums[1] as usize, nums[2] as usize]
            }
            "start_translation" if nums.len() == 3 => {
                start_translation = Vec3::new(nums[0], nums[1], nums[2])
            }
            "start_yaw_deg" if !nums.is_empty() => start_yaw = nums[0],
            _ => {}
        }
    }

    let vols_dir = dir.join("volumes");
    if vols_dir.is_dir() {
        for f in frames.iter_mut() {
            let stem = vols_dir.join(format!("frame_{:06}", f.id));
            if stem.with_extension("raw").is_file() {
                let (vol, vol_hash) = Volume::load(&stem)?;
                if vol_hash != hash {
                    return Err(Error::ConfigHashMismatch { expected: hash, found: vol_hash });
                }
                f.volume = Some(vol);
            }
        }
    }

    Ok(AcquisitionRecord {
        config_hash: hash,
        config,
        frames,
        events,
        anomalies,
        crop_grid: Grid3::new(crop_origin, crop_spacing, crop_dims),
        start_pose: ProbePose::new(start_translation, start_yaw),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trackloop::run_closed_loop;

    #[test]
    fn record_roundtrip() {
        let mut cfg = ExperimentConfig::with_seed(21);
        cfg.acquisition.duration_s = 0.3;
        cfg.scene.speckle_points = 200;
        let rec = run_closed_loop(&cfg).unwrap();
        let dir = std::env::temp_dir().join("sonotrack_record_test");
        let _ = fs::remove_dir_all(&dir);
        save_record(&rec, &dir).unwrap();
        let loaded = load_record(&dir).unwrap();
        assert_eq!(loaded.config_hash, rec.config_hash);
        assert_eq!(loaded.frames.len(), rec.frames.len());
        for (a, b) in rec.frames.iter().zip(loaded.frames.iter()) {
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-8);
            assert!((a.landmark_probe - b.landmark_probe).norm() < 1e-8);
            assert_eq!(a.in_crop, b.in_crop);
            assert_eq!(a.bubbles.len(), b.bubbles.len());
            assert_eq!(a.volume.is_some(), b.volume.is_some());
        }
        assert_eq!(loaded.crop_grid, rec.crop_grid);
    }

    #[test]
    fn tampered_config_is_detected() {
        let mut cfg = ExperimentConfig::with_seed(22);
        cfg.acquisition.duration_s = 0.1;
        cfg.acquisition.store_volumes = false;
        cfg.scene.speckle_points = 100;
        let rec = run_closed_loop(&cfg).unwrap();
        let dir = std::env::temp_dir().join("sonotrack_record_tamper");
        let _ = fs::remove_dir_all(&dir);
        save_record(&rec, &dir).unwrap();
        // edit the config after the fact: hash no longer matches the CSVs
        let cfg_path = dir.join("config.txt");
        let text = fs::read_to_string(&cfg_path).unwrap().replace("seed = 22", "seed = 23");
        fs::write(&cfg_path, text).unwrap();
        let err = load_record(&dir);
        assert!(matches!(err, Err(Error::ConfigHashMismatch { .. })));
    }
}
