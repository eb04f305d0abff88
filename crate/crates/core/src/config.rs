//! Experiment configuration: a plain-text `key = value` format with
//! sections, documented defaults, canonical serialization and a stable hash
//! stamped into every artifact a run produces.
//!
//! Only the seed is mandatory; every other key falls back to the defaults
//! below. Unknown keys are rejected so typos cannot silently revert a
//! parameter to its default.

use crate::acoustics::PsfSpec;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scene::{ArraySpec, ChannelGeometry, MotionProfile, WorldParams};
use crate::util::fnv1a64;
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelLayout {
    Crossed,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Static,
    Mixed,
    Stepped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    /// PSF-splat volume synthesis per frame.
    Fast,
    /// Full channel-data simulation and beamforming per frame.
    Channel,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub speckle_points: usize,
    pub block_extent: Vec3,
    pub phantom_center: Vec3,
    pub landmark_center: Vec3,
    pub channel_layout: ChannelLayout,
    pub channel_center: Vec3,
    pub channel_length: f64,
    pub channel_half_angle_deg: f64,
    /// Centre-to-centre separation for the parallel layout (mm).
    pub channel_separation: f64,
    pub channel_radius: f64,
    pub flow_ul_per_min: f64,
    /// Expected bubbles in view at steady state, summed over channels.
    pub bubbles_in_view: f64,
    pub profile: ProfileKind,
    /// Quiet time before stage motion starts (s).
    pub motion_lead_in: f64,
    /// Probe yaw about its depth axis; motion is always along world x, so
    /// yaw selects the apparent direction (0 lateral, 90 elevational).
    pub probe_yaw_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            speckle_points: 2000,
            block_extent: Vec3::new(30.0, 20.0, 20.0),
            phantom_center: Vec3::new(0.0, 0.0, 30.0),
            landmark_center: Vec3::new(0.0, 0.0, 30.0),
            channel_layout: ChannelLayout::Crossed,
            channel_center: Vec3::new(0.0, 0.0, 32.0),
            channel_length: 8.0,
            channel_half_angle_deg: 20.0,
            channel_separation: 0.33,
            channel_radius: 0.09,
            flow_ul_per_min: 1.5,
            bubbles_in_view: 5.0,
            profile: ProfileKind::Static,
            motion_lead_in: 2.0,
            probe_yaw_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcquisitionConfig {
    pub rate_hz: f64,
    pub duration_s: f64,
    pub fidelity: Fidelity,
    /// Volume SNR in dB for the fast path; None disables noise.
    pub snr_db: Option<f64>,
    /// Persist the online crop volumes into the record directory.
    pub store_volumes: bool,
    pub psf: PsfSpec,
    pub sample_rate_mhz: f64,
    pub pulse_bandwidth: f64,
    /// Bubble echo scale under half-aperture drive, relative to linear.
    pub bubble_gamma: f64,
    /// Model the four sequential 32 x 8 receive sub-apertures.
    pub rx_multiplex: bool,
    pub depth_mm: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            rate_hz: 85.0,
            duration_s: 30.0,
            fidelity: Fidelity::Fast,
            snr_db: Some(30.0),
            store_volumes: true,
            psf: PsfSpec::default(),
            sample_rate_mhz: 31.2,
            pulse_bandwidth: 0.6,
            bubble_gamma: 0.85,
            rx_multiplex: false,
            depth_mm: 45.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackingConfig {
    pub enabled: bool,
    /// Detected translations below this magnitude issue no command (mm).
    pub deadband_mm: f64,
    pub crop_extent_mm: f64,
    pub online_spacing_mm: f64,
    /// Follow depth translations too; off by default (lateral/elevational only).
    pub track_depth: bool,
    pub beamform_latency_s: f64,
    pub reg_latency_base_s: f64,
    pub reg_latency_per_iter_s: f64,
    pub reg_latency_max_s: f64,
    pub cmd_latency_base_s: f64,
    pub cmd_latency_span_s: f64,
    pub cmd_latency_dist_mm: f64,
    pub workspace_lateral_mm: f64,
    pub workspace_elev_mm: f64,
    pub workspace_depth_mm: f64,
    pub robot_accel: f64,
    pub robot_vmax: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            enabled: true,
            deadband_mm: 0.2,
            crop_extent_mm: 12.5,
            online_spacing_mm: 0.4,
            track_depth: false,
            beamform_latency_s: 0.04,
            reg_latency_base_s: 0.04,
            reg_latency_per_iter_s: 0.003,
            reg_latency_max_s: 0.3,
            cmd_latency_base_s: 0.03,
            cmd_latency_span_s: 0.22,
            cmd_latency_dist_mm: 10.0,
            workspace_lateral_mm: 50.0,
            workspace_elev_mm: 50.0,
            workspace_depth_mm: 5.0,
            robot_accel: 250.0,
            robot_vmax: 50.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UlmConfig {
    pub bmode_spacing_mm: f64,
    /// Extent of the landmark window used for residual registration (mm).
    pub reg_extent_mm: f64,
    /// Contrast reconstruction region around the channel centre (mm).
    pub ceus_extent: Vec3,
    /// Absolute denoising floor; None estimates it from the data.
    pub noise_floor: Option<f64>,
    /// Floor as a multiple of the estimated noise std when auto-estimated.
    pub floor_scale: f64,
    pub adaptive_window: usize,
    pub adaptive_fwhm_mm: f64,
    pub psf_window: usize,
    pub psf_instances: usize,
    pub psf_isolation_mm: f64,
    pub ncc_threshold: f64,
    pub gate_speed_mm_s: f64,
    pub max_misses: usize,
    pub min_track_frames: usize,
    /// Half-span in frames for link velocity estimation.
    pub velocity_span: usize,
    pub sr_spacing_mm: f64,
    pub density_fwhm_um: f64,
    pub speed_ball_um: f64,
}

impl Default for UlmConfig {
    fn default() -> Self {
        UlmConfig {
            bmode_spacing_mm: 0.1,
            reg_extent_mm: 6.4,
            ceus_extent: Vec3::new(7.0, 7.0, 3.0),
            noise_floor: None,
            floor_scale: 3.0,
            adaptive_window: 9,
            adaptive_fwhm_mm: 0.3,
            psf_window: 13,
            psf_instances: 5,
            psf_isolation_mm: 1.5,
            ncc_threshold: 0.5,
            gate_speed_mm_s: 10.0,
            max_misses: 2,
            min_track_frames: 4,
            velocity_span: 4,
            sr_spacing_mm: 0.02,
            density_fwhm_um: 40.0,
            speed_ball_um: 60.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsConfig {
    pub centroid_window: usize,
    /// Onset threshold on landmark displacement (mm).
    pub onset_mm: f64,
    /// Run the shell correlation on smoothed instead of raw density maps.
    pub fsc_on_smoothed: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { centroid_window: 11, onset_mm: 0.1, fsc_on_smoothed: false }
    }
}

// ---------------------------------------------------------------------------
// Top level
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub array: ArraySpec,
    pub acquisition: AcquisitionConfig,
    pub tracking: TrackingConfig,
    pub ulm: UlmConfig,
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            scene: SceneConfig::default(),
            array: ArraySpec::default(),
            acquisition: AcquisitionConfig::default(),
            tracking: TrackingConfig::default(),
            ulm: UlmConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn channels(&self) -> ChannelGeometry {
        let s = &self.scene;
        match s.channel_layout {
            ChannelLayout::Crossed => ChannelGeometry::crossed(
                s.channel_center,
                s.channel_length,
                s.channel_half_angle_deg,
                s.channel_radius,
            ),
            ChannelLayout::Parallel => ChannelGeometry::parallel(
                s.channel_center,
                s.channel_length,
                s.channel_separation,
                s.channel_radius,
            ),
        }
    }

    pub fn motion_profile(&self) -> MotionProfile {
        let dir = Vec3::new(1.0, 0.0, 0.0);
        match self.scene.profile {
            ProfileKind::Static => MotionProfile::static_profile(),
            ProfileKind::Mixed => MotionProfile::mixed_demo(dir, self.scene.motion_lead_in),
            ProfileKind::Stepped => MotionProfile::stepped_sweep(dir, self.scene.motion_lead_in),
        }
    }

    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            seed: self.seed,
            speckle_points: self.scene.speckle_points,
            block_extent: self.scene.block_extent,
            phantom_center: self.scene.phantom_center,
            landmark_center: self.scene.landmark_center,
            channels: self.channels(),
            profile: self.motion_profile(),
            flow_ul_per_min: self.scene.flow_ul_per_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        let positives = [
            ("acquisition.rate_hz", self.acquisition.rate_hz),
            ("acquisition.sample_rate_mhz", self.acquisition.sample_rate_mhz),
            ("acquisition.pulse_bandwidth", self.acquisition.pulse_bandwidth),
            ("acquisition.depth_mm", self.acquisition.depth_mm),
            ("tracking.crop_extent_mm", self.tracking.crop_extent_mm),
            ("tracking.online_spacing_mm", self.tracking.online_spacing_mm),
            ("tracking.beamform_latency_s", self.tracking.beamform_latency_s),
            ("tracking.reg_latency_base_s", self.tracking.reg_latency_base_s),
            ("tracking.cmd_latency_base_s", self.tracking.cmd_latency_base_s),
            ("tracking.robot_accel", self.tracking.robot_accel),
            ("tracking.robot_vmax", self.tracking.robot_vmax),
            ("scene.channel_radius", self.scene.channel_radius),
            ("scene.channel_length", self.scene.channel_length),
            ("scene.flow_ul_per_min", self.scene.flow_ul_per_min),
            ("ulm.bmode_spacing_mm", self.ulm.bmode_spacing_mm),
            ("ulm.sr_spacing_mm", self.ulm.sr_spacing_mm),
            ("ulm.density_fwhm_um", self.ulm.density_fwhm_um),
            ("ulm.speed_ball_um", self.ulm.speed_ball_um),
            ("metrics.onset_mm", self.metrics.onset_mm),
        ];
        for (name, v) in positives {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.acquisition.duration_s < 0.0 {
            return Err(Error::Config("acquisition.duration_s must be >= 0".into()));
        }
        if self.ulm.psf_window % 2 == 0 || self.ulm.adaptive_window % 2 == 0 {
            return Err(Error::Config("ulm windows must be odd".into()));
        }
        if self.metrics.centroid_window % 2 == 0 {
            return Err(Error::Config("metrics.centroid_window must be odd".into()));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Canonical text form
    // -----------------------------------------------------------------------

    pub fn serialize(&self) -> String {
        let v3 = |v: Vec3| format!("{} {} {}", v.x, v.y, v.z);
        let opt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n\n", self.seed));
        s.push_str("[scene]\n");
        s.push_str(&format!("speckle_points = {}\n", self.scene.speckle_points));
        s.push_str(&format!("block_extent = {}\n", v3(self.scene.block_extent)));
        s.push_str(&format!("phantom_center = {}\n", v3(self.scene.phantom_center)));
        s.push_str(&format!("landmark_center = {}\n", v3(self.scene.landmark_center)));
        s.push_str(&format!(
            "channel_layout = {}\n",
            match self.scene.channel_layout {
                ChannelLayout::Crossed => "crossed",
                ChannelLayout::Parallel => "parallel",
            }
        ));
        s.push_str(&format!("channel_center = {}\n", v3(self.scene.channel_center)));
        s.push_str(&format!("channel_length = {}\n", self.scene.channel_length));
        s.push_str(&format!("channel_half_angle_deg = {}\n", self.scene.channel_half_angle_deg));
        s.push_str(&format!("channel_separation = {}\n", self.scene.channel_separation));
        s.push_str(&format!("channel_radius = {}\n", self.scene.channel_radius));
        s.push_str(&format!("flow_ul_per_min = {}\n", self.scene.flow_ul_per_min));
        s.push_str(&format!("bubbles_in_view = {}\n", self.scene.bubbles_in_view));
        s.push_str(&format!(
            "profile = {}\n",
            match self.scene.profile {
                ProfileKind::Static => "static",
                ProfileKind::Mixed => "mixed",
                ProfileKind::Stepped => "stepped",
            }
        ));
        s.push_str(&format!("motion_lead_in = {}\n", self.scene.motion_lead_in));
        s.push_str(&format!("probe_yaw_deg = {}\n\n", self.scene.probe_yaw_deg));

        s.push_str("[array]\n");
        s.push_str(&format!("rows = {}\n", self.array.rows));
        s.push_str(&format!("cols = {}\n", self.array.cols));
        s.push_str(&format!("aperture_x = {}\n", self.array.aperture_x));
        s.push_str(&format!("aperture_y = {}\n", self.array.aperture_y));
        s.push_str(&format!("center_freq = {}\n", self.array.center_freq));
        s.push_str(&format!("sound_speed = {}\n\n", self.array.sound_speed));

        s.push_str("[acquisition]\n");
        s.push_str(&format!("rate_hz = {}\n", self.acquisition.rate_hz));
        s.push_str(&format!("duration_s = {}\n", self.acquisition.duration_s));
        s.push_str(&format!(
            "fidelity = {}\n",
            match self.acquisition.fidelity {
                Fidelity::Fast => "fast",
                Fidelity::Channel => "channel",
            }
        ));
        s.push_str(&format!("snr_db = {}\n", opt(self.acquisition.snr_db)));
        s.push_str(&format!("store_volumes = {}\n", self.acquisition.store_volumes));
        s.push_str(&format!(
            "psf_fwhm = {} {} {}\n",
            self.acquisition.psf.fwhm_x, self.acquisition.psf.fwhm_y, self.acquisition.psf.fwhm_z
        ));
        s.push_str(&format!("sample_rate_mhz = {}\n", self.acquisition.sample_rate_mhz));
        s.push_str(&format!("pulse_bandwidth = {}\n", self.acquisition.pulse_bandwidth));
        s.push_str(&format!("bubble_gamma = {}\n", self.acquisition.bubble_gamma));
        s.push_str(&format!("rx_multiplex = {}\n", self.acquisition.rx_multiplex));
        s.push_str(&format!("depth_mm = {}\n\n", self.acquisition.depth_mm));

        s.push_str("[tracking]\n");
        s.push_str(&format!("enabled = {}\n", self.tracking.enabled));
        s.push_str(&format!("deadband_mm = {}\n", self.tracking.deadband_mm));
        s.push_str(&format!("crop_extent_mm = {}\n", self.tracking.crop_extent_mm));
        s.push_str(&format!("online_spacing_mm = {}\n", self.tracking.online_spacing_mm));
        s.push_str(&format!("track_depth = {}\n", self.tracking.track_depth));
        s.push_str(&format!("beamform_latency_s = {}\n", self.tracking.beamform_latency_s));
        s.push_str(&format!("reg_latency_base_s = {}\n", self.tracking.reg_latency_base_s));
        s.push_str(&format!("reg_latency_per_iter_s = {}\n", self.tracking.reg_latency_per_iter_s));
        s.push_str(&format!("reg_latency_max_s = {}\n", self.tracking.reg_latency_max_s));
        s.push_str(&format!("cmd_latency_base_s = {}\n", self.tracking.cmd_latency_base_s));
        s.push_str(&format!("cmd_latency_span_s = {}\n", self.tracking.cmd_latency_span_s));
        s.push_str(&format!("cmd_latency_dist_mm = {}\n", self.tracking.cmd_latency_dist_mm));
        s.push_str(&format!("workspace_lateral_mm = {}\n", self.tracking.workspace_lateral_mm));
        s.push_str(&format!("workspace_elev_mm = {}\n", self.tracking.workspace_elev_mm));
        s.push_str(&format!("workspace_depth_mm = {}\n", self.tracking.workspace_depth_mm));
        s.push_str(&format!("robot_accel = {}\n", self.tracking.robot_accel));
        s.push_str(&format!("robot_vmax = {}\n\n", self.tracking.robot_vmax));

        s.push_str("[ulm]\n");
        s.push_str(&format!("bmode_spacing_mm = {}\n", self.ulm.bmode_spacing_mm));
        s.push_str(&format!("reg_extent_mm = {}\n", self.ulm.reg_extent_mm));
        s.push_str(&format!("ceus_extent = {}\n", v3(self.ulm.ceus_extent)));
        s.push_str(&format!("noise_floor = {}\n", opt(self.ulm.noise_floor)));
        s.push_str(&format!("floor_scale = {}\n", self.ulm.floor_scale));
        s.push_str(&format!("adaptive_window = {}\n", self.ulm.adaptive_window));
        s.push_str(&format!("adaptive_fwhm_mm = {}\n", self.ulm.adaptive_fwhm_mm));
        s.push_str(&format!("psf_window = {}\n", self.ulm.psf_window));
        s.push_str(&format!("psf_instances = {}\n", self.ulm.psf_instances));
        s.push_str(&format!("psf_isolation_mm = {}\n", self.ulm.psf_isolation_mm));
        s.push_str(&format!("ncc_threshold = {}\n", self.ulm.ncc_threshold));
        s.push_str(&format!("gate_speed_mm_s = {}\n", self.ulm.gate_speed_mm_s));
        s.push_str(&format!("max_misses = {}\n", self.ulm.max_misses));
        s.push_str(&format!("min_track_frames = {}\n", self.ulm.min_track_frames));
        s.push_str(&format!("velocity_span = {}\n", self.ulm.velocity_span));
        s.push_str(&format!("sr_spacing_mm = {}\n", self.ulm.sr_spacing_mm));
        s.push_str(&format!("density_fwhm_um = {}\n", self.ulm.density_fwhm_um));
        s.push_str(&format!("speed_ball_um = {}\n\n", self.ulm.speed_ball_um));

        s.push_str("[metrics]\n");
        s.push_str(&format!("centroid_window = {}\n", self.metrics.centroid_window));
        s.push_str(&format!("onset_mm = {}\n", self.metrics.onset_mm));
        s.push_str(&format!("fsc_on_smoothed = {}\n", self.metrics.fsc_on_smoothed));
        s
    }

    /// FNV-1a hash of the canonical serialization, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.serialize().as_bytes()))
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            entries.insert(full, val.trim().to_string());
        }

        let seed = entries
            .remove("seed")
            .ok_or_else(|| Error::Config("seed is mandatory for reproducibility".into()))?
            .parse::<u64>()
            .map_err(|_| Error::Config("seed must be an unsigned integer".into()))?;
        let mut cfg = ExperimentConfig::with_seed(seed);

        let parse_f64 = |k: &str, v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Config(format!("{k}: expected a number, got {v}")))
        };
        let parse_usize = |k: &str, v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{k}: expected an integer, got {v}")))
        };
        let parse_bool = |k: &str, v: &str| -> Result<bool> {
            match v {
                "true" | "on" | "yes" => Ok(true),
                "false" | "off" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{k}: expected true/false, got {v}"))),
            }
        };
        let parse_vec3 = |k: &str, v: &str| -> Result<Vec3> {
            let parts: Vec<f64> =
                v.split_whitespace().filter_map(|t| t.parse::<f64>().ok()).collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("{k}: expected three numbers, got {v}")));
            }
            Ok(Vec3::new(parts[0], parts[1], parts[2]))
        };
        let parse_opt = |k: &str, v: &str| -> Result<Option<f64>> {
            if v == "none" {
                Ok(None)
            } else {
                parse_f64(k, v).map(Some)
            }
        };

        for (k, v) in entries {
            let key = k.as_str();
            let val = v.as_str();
            match key {
                "scene.speckle_points" => cfg.scene.speckle_points = parse_usize(key, val)?,
                "scene.block_extent" => cfg.scene.block_extent = parse_vec3(key, val)?,
                "scene.phantom_center" => cfg.scene.phantom_center = parse_vec3(key, val)?,
                "scene.landmark_center" => cfg.scene.landmark_center = parse_vec3(key, val)?,
                "scene.channel_layout" => {
                    cfg.scene.channel_layout = match val {
                        "crossed" => ChannelLayout::Crossed,
                        "parallel" => ChannelLayout::Parallel,
                        _ => return Err(Error::Config(format!("{key}: unknown layout {val}"))),
                    }
                }
                "scene.channel_center" => cfg.scene.channel_center = parse_vec3(key, val)?,
                "scene.channel_length" => cfg.scene.channel_length = parse_f64(key, val)?,
                "scene.channel_half_angle_deg" => {
                    cfg.scene.channel_half_angle_deg = parse_f64(key, val)?
                }
                "scene.channel_separation" => cfg.scene.channel_separation = parse_f64(key, val)?,
                "scene.channel_radius" => cfg.scene.channel_radius = parse_f64(key, val)?,
                "scene.flow_ul_per_min" => cfg.scene.flow_ul_per_min = parse_f64(key, val)?,
                "scene.bubbles_in_view" => cfg.scene.bubbles_in_view = parse_f64(key, val)?,
                "scene.profile" => {
                    cfg.scene.profile = match val {
                        "static" => ProfileKind::Static,
                        "mixed" => ProfileKind::Mixed,
                        "stepped" => ProfileKind::Stepped,
                        _ => return Err(Error::Config(format!("{key}: unknown profile {val}"))),
                    }
                }
                "scene.motion_lead_in" => cfg.scene.motion_lead_in = parse_f64(key, val)?,
                "scene.probe_yaw_deg" => cfg.scene.probe_yaw_deg = parse_f64(key, val)?,

                "array.rows" => cfg.array.rows = parse_usize(key, val)?,
                "array.cols" => cfg.array.cols = parse_usize(key, val)?,
                "array.aperture_x" => {
                    cfg.array.aperture_x = parse_f64(key, val)?;
                    cfg.array.pitch_x = cfg.array.aperture_x / cfg.array.cols as f64;
                }
                "array.aperture_y" => {
                    cfg.array.aperture_y = parse_f64(key, val)?;
                    cfg.array.pitch_y = cfg.array.aperture_y / cfg.array.rows as f64;
                }
                "array.center_freq" => cfg.array.center_freq = parse_f64(key, val)?,
                "array.sound_speed" => cfg.array.sound_speed = parse_f64(key, val)?,

                "acquisition.rate_hz" => cfg.acquisition.rate_hz = parse_f64(key, val)?,
                "acquisition.duration_s" => cfg.acquisition.duration_s = parse_f64(key, val)?,
                "acquisition.fidelity" => {
                    cfg.acquisition.fidelity = match val {
                        "fast" => Fidelity::Fast,
                        "channel" => Fidelity::Channel,
                        _ => return Err(Error::Config(format!("{key}: unknown fidelity {val}"))),
                    }
                }
                "acquisition.snr_db" => cfg.acquisition.snr_db = parse_opt(key, val)?,
                "acquisition.store_volumes" => {
                    cfg.acquisition.store_volumes = parse_bool(key, val)?
                }
                "acquisition.psf_fwhm" => {
                    let v3 = parse_vec3(key, val)?;
                    cfg.acquisition.psf = PsfSpec { fwhm_x: v3.x, fwhm_y: v3.y, fwhm_z: v3.z };
                }
                "acquisition.sample_rate_mhz" => {
                    cfg.acquisition.sample_rate_mhz = parse_f64(key, val)?
                }
                "acquisition.pulse_bandwidth" => {
                    cfg.acquisition.pulse_bandwidth = parse_f64(key, val)?
                }
                "acquisition.bubble_gamma" => cfg.acquisition.bubble_gamma = parse_f64(key, val)?,
                "acquisition.rx_multiplex" => cfg.acquisition.rx_multiplex = parse_bool(key, val)?,
                "acquisition.depth_mm" => cfg.acquisition.depth_mm = parse_f64(key, val)?,

                "tracking.enabled" => cfg.tracking.enabled = parse_bool(key, val)?,
                "tracking.deadband_mm" => cfg.tracking.deadband_mm = parse_f64(key, val)?,
                "tracking.crop_extent_mm" => cfg.tracking.crop_extent_mm = parse_f64(key, val)?,
                "tracking.online_spacing_mm" => {
                    cfg.tracking.online_spacing_mm = parse_f64(key, val)?
                }
                "tracking.track_depth" => cfg.tracking.track_depth = parse_bool(key, val)?,
                "tracking.beamform_latency_s" => {
                    cfg.tracking.beamform_latency_s = parse_f64(key, val)?
                }
                "tracking.reg_latency_base_s" => {
                    cfg.tracking.reg_latency_base_s = parse_f64(key, val)?
                }
                "tracking.reg_latency_per_iter_s" => {
                    cfg.tracking.reg_latency_per_iter_s = parse_f64(key, val)?
                }
                "tracking.reg_latency_max_s" => {
                    cfg.tracking.reg_latency_max_s = parse_f64(key, val)?
                }
                "tracking.cmd_latency_base_s" => {
                    cfg.tracking.cmd_latency_base_s = parse_f64(key, val)?
                }
                "tracking.cmd_latency_span_s" => {
                    cfg.tracking.cmd_latency_span_s = parse_f64(key, val)?
                }
                "tracking.cmd_latency_dist_mm" => {
                    cfg.tracking.cmd_latency_dist_mm = parse_f64(key, val)?
                }
                "tracking.workspace_lateral_mm" => {
                    cfg.tracking.workspace_lateral_mm = parse_f64(key, val)?
                }
                "tracking.workspace_elev_mm" => {
                    cfg.tracking.workspace_elev_mm = parse_f64(key, val)?
                }
                "tracking.workspace_depth_mm" => {
                    cfg.tracking.workspace_depth_mm = parse_f64(key, val)?
                }
                "tracking.robot_accel" => cfg.tracking.robot_accel = parse_f64(key, val)?,
                "tracking.robot_vmax" => cfg.tracking.robot_vmax = parse_f64(key, val)?,

                "ulm.bmode_spacing_mm" => cfg.ulm.bmode_spacing_mm = parse_f64(key, val)?,
                "ulm.reg_extent_mm" => cfg.ulm.reg_extent_mm = parse_f64(key, val)?,
                "ulm.ceus_extent" => cfg.ulm.ceus_extent = parse_vec3(key, val)?,
                "ulm.noise_floor" => cfg.ulm.noise_floor = parse_opt(key, val)?,
                "ulm.floor_scale" => cfg.ulm.floor_scale = parse_f64(key, val)?,
                "ulm.adaptive_window" => cfg.ulm.adaptive_window = parse_usize(key, val)?,
                "ulm.adaptive_fwhm_mm" => cfg.ulm.adaptive_fwhm_mm = parse_f64(key, val)?,
                "ulm.psf_window" => cfg.ulm.psf_window = parse_usize(key, val)?,
                "ulm.psf_instances" => cfg.ulm.psf_instances = parse_usize(key, val)?,
                "ulm.psf_isolation_mm" => cfg.ulm.psf_isolation_mm = parse_f64(key, val)?,
                "ulm.ncc_threshold" => cfg.ulm.ncc_threshold = parse_f64(key, val)?,
                "ulm.gate_speed_mm_s" => cfg.ulm.gate_speed_mm_s = parse_f64(key, val)?,
                "ulm.max_misses" => cfg.ulm.max_misses = parse_usize(key, val)?,
                "ulm.min_track_frames" => cfg.ulm.min_track_frames = parse_usize(key, val)?,
                "ulm.velocity_span" => cfg.ulm.velocity_span = parse_usize(key, val)?,
                "ulm.sr_spacing_mm" => cfg.ulm.sr_spacing_mm = parse_f64(key, val)?,
                "ulm.density_fwhm_um" => cfg.ulm.density_fwhm_um = parse_f64(key, val)?,
                "ulm.speed_ball_um" => cfg.ulm.speed_ball_um = parse_f64(key, val)?,

                "metrics.centroid_window" => cfg.metrics.centroid_window = parse_usize(key, val)?,
                "metrics.onset_mm" => cfg.metrics.onset_mm = parse_f64(key, val)?,
                "metrics.fsc_on_smoothed" => cfg.metrics.fsc_on_smoothed = parse_bool(key, val)?,

                _ => return Err(Error::Config(format!("unknown key: {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = ExperimentConfig::parse("[scene]\nspeckle_points = 10\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn roundtrip_preserves_hash() {
        let mut cfg = ExperimentConfig::with_seed(42);
        cfg.scene.profile = ProfileKind::Stepped;
        cfg.acquisition.duration_s = 12.5;
        cfg.ulm.noise_floor = Some(0.25);
        let text = cfg.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed.hash(), cfg.hash());
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::parse("seed = 1\n[scene]\nspockle_points = 10\n");
        assert!(matches!(err, Err(Error::Config(msg)) if msg.contains("spockle_points")));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ExperimentConfig::parse(
            "# experiment\nseed = 7\n\n[acquisition]\nduration_s = 3 # short\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.acquisition.duration_s, 3.0);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::with_seed(1);
        let b = ExperimentConfig::with_seed(2);
        assert_ne!(a.hash(), b.hash());
    }
}
