//! World model: phantom geometry, bubble flow, landmark, stage motion
//! profiles, probe pose and the coordinate transforms between them.
//!
//! Conventions: the probe frame has x lateral, y elevational, z depth (into
//! the medium), with the array centred at the origin in the z = 0 plane. The
//! world frame coincides with the probe frame of a probe at rest with zero
//! yaw. The stage displaces the whole phantom along a fixed world direction;
//! the robot displaces the probe.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::Rng;

// ---------------------------------------------------------------------------
// Array
// ---------------------------------------------------------------------------

/// Matrix-array description. Defaults model a 32 x 32 probe with a
/// 9.6 mm x 10.6 mm aperture driven at 7.8 MHz.
#[derive(Debug, Clone, PartialEq)]
pub struct ArraySpec {
    pub rows: usize,
    pub cols: usize,
    /// Element pitch along x (mm).
    pub pitch_x: f64,
    /// Element pitch along y (mm).
    pub pitch_y: f64,
    pub aperture_x: f64,
    pub aperture_y: f64,
    /// Transmit centre frequency (MHz).
    pub center_freq: f64,
    /// Speed of sound (mm/us).
    pub sound_speed: f64,
}

impl Default for ArraySpec {
    fn default() -> Self {
        let rows = 32;
        let cols = 32;
        let aperture_x = 9.6;
        let aperture_y = 10.6;
        ArraySpec {
            rows,
            cols,
            pitch_x: aperture_x / cols as f64,
            pitch_y: aperture_y / rows as f64,
            aperture_x,
            aperture_y,
            center_freq: 7.8,
            sound_speed: 1.54,
        }
    }
}

impl ArraySpec {
    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Element centre position in the probe frame (z = 0). Elements are laid
    /// out row-major: index = row * cols + col.
    pub fn element_position(&self, index: usize) -> Vec3 {
        let row = index / self.cols;
        let col = index % self.cols;
        Vec3::new(
            (col as f64 - (self.cols as f64 - 1.0) / 2.0) * self.pitch_x,
            (row as f64 - (self.rows as f64 - 1.0) / 2.0) * self.pitch_y,
            0.0,
        )
    }

    /// Wavelength at the transmit centre frequency (mm).
    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_freq
    }

    pub fn validate(&self) -> Result<()> {
        if self.aperture_x <= 0.0 || self.aperture_y <= 0.0 {
            return Err(Error::Config("aperture dimensions must be positive".into()));
        }
        if self.rows as f64 * self.pitch_y > self.aperture_y + self.pitch_y {
            return Err(Error::Config("element rows exceed the aperture".into()));
        }
        if self.cols as f64 * self.pitch_x > self.aperture_x + self.pitch_x {
            return Err(Error::Config("element columns exceed the aperture".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scatterers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScattererKind {
    Tissue,
    Landmark,
    Bubble,
}

/// Point reflector driving both forward models.
#[derive(Debug, Clone, Copy)]
pub struct Scatterer {
    /// Position in the probe frame (mm).
    pub position: Vec3,
    /// Dimensionless reflectivity, >= 0.
    pub amplitude: f64,
    pub kind: ScattererKind,
    /// Instantaneous velocity (mm/s); nonzero for bubbles only.
    pub velocity: Vec3,
}

// ---------------------------------------------------------------------------
// Channels
// ---------------------------------------------------------------------------

/// One straight wall-less channel segment.
#[derive(Debug, Clone, Copy)]
pub struct ChannelSegment {
    pub start: Vec3,
    pub end: Vec3,
    /// Lumen radius (mm); default 0.09 mm (180 um diameter).
    pub radius: f64,
}

impl ChannelSegment {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn axis(&self) -> Vec3 {
        (self.end - self.start).normalized()
    }
}

/// Two straight channels embedded in the phantom. The crossed layout mimics
/// a wire-templated cross-channel phantom; the parallel layout is used for
/// resolution studies.
#[derive(Debug, Clone)]
pub struct ChannelGeometry {
    pub segments: Vec<ChannelSegment>,
}

impl ChannelGeometry {
    /// Two segments crossing at `center` in the x-y plane, at `half_angle_deg`
    /// on either side of the x axis. The crossing angle is a config default;
    /// it is not a measured value.
    pub fn crossed(center: Vec3, length: f64, half_angle_deg: f64, radius: f64) -> Self {
        let mut segments = Vec::new();
        for sign in [1.0, -1.0] {
            let a = sign * half_angle_deg.to_radians();
            let dir = Vec3::new(a.cos(), a.sin(), 0.0);
            segments.push(ChannelSegment {
                start: center - dir * (length / 2.0),
                end: center + dir * (length / 2.0),
                radius,
            });
        }
        ChannelGeometry { segments }
    }

    /// Two parallel segments along x separated centre-to-centre by
    /// `separation` in y, perfused in counter-flow (opposite directions).
    /// Co-flowing parallel channels would advect bubble pairs in lockstep,
    /// keeping them unresolvable for entire transits; with counter-flow a
    /// chance pairing dissolves at twice the flow speed.
    pub fn parallel(center: Vec3, length: f64, separation: f64, radius: f64) -> Self {
        let mut segments = Vec::new();
        for sign in [1.0, -1.0] {
            let offset = Vec3::new(0.0, sign * separation / 2.0, 0.0);
            let half = Vec3::new(sign * length / 2.0, 0.0, 0.0);
            segments.push(ChannelSegment {
                start: center + offset - half,
                end: center + offset + half,
                radius,
            });
        }
        ChannelGeometry { segments }
    }

    pub fn validate(&self, phantom_min: Vec3, phantom_max: Vec3) -> Result<()> {
        for seg in &self.segments {
            if seg.radius <= 0.0 {
                return Err(Error::Config("channel radius must be positive".into()));
            }
            for p in [seg.start, seg.end] {
                if p.x < phantom_min.x
                    || p.y < phantom_min.y
                    || p.z < phantom_min.z
                    || p.x > phantom_max.x
                    || p.y > phantom_max.y
                    || p.z > phantom_max.z
                {
                    return Err(Error::Config(format!(
                        "channel endpoint {p} outside the phantom block"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean flow speed (mm/s) for a volumetric rate in uL/min through a channel
/// of the given radius (mm): v = Q / A.
pub fn flow_speed_mm_per_s(flow_ul_per_min: f64, radius_mm: f64) -> f64 {
    let q_mm3_per_s = flow_ul_per_min / 60.0; // 1 uL = 1 mm^3
    let area = std::f64::consts::PI * radius_mm * radius_mm;
    q_mm3_per_s / area
}

// ---------------------------------------------------------------------------
// Stage motion profiles
// ---------------------------------------------------------------------------

/// One leg of stage travel followed by a dwell.
#[derive(Debug, Clone, Copy)]
pub struct MotionSegment {
    /// Unit direction of travel in the world frame.
    pub direction: Vec3,
    /// Travel distance (mm), > 0.
    pub distance: f64,
    /// Cruise speed (mm/s), > 0.
    pub speed: f64,
    /// Acceleration magnitude (mm/s^2), > 0.
    pub accel: f64,
    /// Dwell after the move completes (s).
    pub dwell: f64,
}

impl MotionSegment {
    /// Total move time for a trapezoidal (or triangular) velocity profile.
    pub fn move_duration(&self) -> f64 {
        let d_full = self.speed * self.speed / self.accel;
        if self.distance >= d_full {
            // accelerate, cruise, decelerate
            2.0 * self.speed / self.accel + (self.distance - d_full) / self.speed
        } else {
            2.0 * (self.distance / self.accel).sqrt()
        }
    }

    /// Scalar displacement along the direction at local time `t` in
    /// [0, move_duration + dwell].
    fn displacement_at(&self, t: f64) -> f64 {
        let a = self.accel;
        let v = self.speed;
        let d = self.distance;
        let d_full = v * v / a;
        if t <= 0.0 {
            return 0.0;
        }
        if d >= d_full {
            let t_acc = v / a;
            let t_cruise = (d - d_full) / v;
            if t < t_acc {
                0.5 * a * t * t
            } else if t < t_acc + t_cruise {
                0.5 * d_full + v * (t - t_acc)
            } else if t < 2.0 * t_acc + t_cruise {
                let td = t - t_acc - t_cruise;
                0.5 * d_full + v * t_cruise + v * td - 0.5 * a * td * td
            } else {
                d
            }
        } else {
            let t_acc = (d / a).sqrt();
            if t < t_acc {
                0.5 * a * t * t
            } else if t < 2.0 * t_acc {
                let td = t - t_acc;
                0.5 * d + a * t_acc * td - 0.5 * a * td * td
            } else {
                d
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileMode {
    /// No stage motion at all.
    Static,
    /// One round trip split into sub-legs at alternating 4 / 2 mm/s.
    MixedDemo,
    /// Five round trips stepping 1 to 5 mm/s.
    SteppedSweep,
}

/// Piecewise trapezoidal displacement trajectory of the stage.
#[derive(Debug, Clone)]
pub struct MotionProfile {
    pub mode: ProfileMode,
    /// Quiet time before the first segment starts (s).
    pub lead_in: f64,
    pub segments: Vec<MotionSegment>,
}

/// Label for one motion leg, used by the residual-motion statistics.
#[derive(Debug, Clone, Copy)]
pub struct LegInterval {
    pub speed: f64,
    pub t_start: f64,
    pub t_end: f64,
}

pub const STAGE_ACCEL: f64 = 3.0; // mm/s^2
pub const STAGE_RANGE: f64 = 20.0; // mm per leg

impl MotionProfile {
    pub fn static_profile() -> Self {
        MotionProfile { mode: ProfileMode::Static, lead_in: 0.0, segments: Vec::new() }
    }

    /// Round trip over the full 20 mm range with the speed switching between
    /// 4 and 2 mm/s halfway through each leg.
    pub fn mixed_demo(direction: Vec3, lead_in: f64) -> Self {
        let dir = direction.normalized();
        let half = STAGE_RANGE / 2.0;
        let seg = |d: Vec3, speed: f64, dwell: f64| MotionSegment {
            direction: d,
            distance: half,
            speed,
            accel: STAGE_ACCEL,
            dwell,
        };
        MotionProfile {
            mode: ProfileMode::MixedDemo,
            lead_in,
            segments: vec![
                seg(dir, 4.0, 0.0),
                seg(dir, 2.0, 1.0),
                seg(-dir, 2.0, 0.0),
                seg(-dir, 4.0, 1.0),
            ],
        }
    }

    /// Five out-and-back round trips at 1, 2, 3, 4, 5 mm/s.
    pub fn stepped_sweep(direction: Vec3, lead_in: f64) -> Self {
        let dir = direction.normalized();
        let mut segments = Vec::new();
        for speed in 1..=5 {
            let v = speed as f64;
            segments.push(MotionSegment {
                direction: dir,
                distance: STAGE_RANGE,
                speed: v,
                accel: STAGE_ACCEL,
                dwell: 1.0,
            });
            segments.push(MotionSegment {
                direction: -dir,
                distance: STAGE_RANGE,
                speed: v,
                accel: STAGE_ACCEL,
                dwell: 1.0,
            });
        }
        MotionProfile { mode: ProfileMode::SteppedSweep, lead_in, segments }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            if s.distance <= 0.0 || s.speed <= 0.0 || s.accel <= 0.0 || s.dwell < 0.0 {
                return Err(Error::Config("motion segment parameters must be positive".into()));
            }
            if s.distance > STAGE_RANGE + 1e-9 {
                return Err(Error::Config(format!(
                    "segment distance {} exceeds the {STAGE_RANGE} mm stage range",
                    s.distance
                )));
            }
        }
        Ok(())
    }

    /// Total duration including lead-in and dwells.
    pub fn duration(&self) -> f64 {
        self.lead_in
            + self
                .segments
                .iter()
                .map(|s| s.move_duration() + s.dwell)
                .sum::<f64>()
    }

    /// Intervals (absolute time) during which the stage is moving, one per
    /// segment, labelled with the cruise speed.
    pub fn legs(&self) -> Vec<LegInterval> {
        let mut t = self.lead_in;
        let mut out = Vec::new();
        for s in &self.segments {
            let dur = s.move_duration();
            out.push(LegInterval { speed: s.speed, t_start: t, t_end: t + dur });
            t += dur + s.dwell;
        }
        out
    }

    /// True when the stage is in motion at time `t`.
    pub fn is_moving(&self, t: f64) -> bool {
        self.legs().iter().any(|l| t >= l.t_start && t < l.t_end)
    }
}

/// World-frame displacement of the phantom at time `t`. Times beyond the
/// profile end return the final position.
pub fn stage_position(profile: &MotionProfile, t: f64) -> Vec3 {
    let mut disp = Vec3::ZERO;
    let mut t_local = t - profile.lead_in;
    if t_local <= 0.0 {
        return disp;
    }
    for s in &profile.segments {
        let dur = s.move_duration();
        if t_local <= 0.0 {
            break;
        }
        let travelled = s.displacement_at(t_local.min(dur));
        disp += s.direction * travelled;
        t_local -= dur + s.dwell;
    }
    disp
}

// ---------------------------------------------------------------------------
// Probe pose
// ---------------------------------------------------------------------------

/// Probe translation plus a yaw about its depth axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePose {
    pub translation: Vec3,
    pub yaw_deg: f64,
}

impl ProbePose {
    pub fn new(translation: Vec3, yaw_deg: f64) -> Self {
        ProbePose { translation, yaw_deg }
    }

    /// Map a world-frame point into the probe frame.
    pub fn world_to_probe(&self, p: Vec3) -> Vec3 {
        (p - self.translation).rotated_z(-self.yaw_deg.to_radians())
    }

    /// Map a probe-frame point into the world frame.
    pub fn probe_to_world(&self, p: Vec3) -> Vec3 {
        p.rotated_z(self.yaw_deg.to_radians()) + self.translation
    }

    /// Rotate a probe-frame direction into the world frame.
    pub fn direction_to_world(&self, d: Vec3) -> Vec3 {
        d.rotated_z(self.yaw_deg.to_radians())
    }

    /// Rotate a world-frame direction into the probe frame.
    pub fn direction_to_probe(&self, d: Vec3) -> Vec3 {
        d.rotated_z(-self.yaw_deg.to_radians())
    }
}

// ---------------------------------------------------------------------------
// Bubbles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Bubble {
    pub id: u64,
    pub channel: usize,
    /// Distance travelled along the channel axis from the inlet (mm).
    pub along: f64,
    /// Fixed offset within the lumen, perpendicular to the axis (mm).
    pub radial_offset: Vec3,
    pub amplitude: f64,
    /// Per-bubble speed relative to the mean flow speed. Real bubbles do
    /// not move in lockstep; a modest spread keeps chance pairings from
    /// staying merged for a whole transit.
    pub speed_factor: f64,
}

/// Evolving bubble population; advection is single-owner mutation.
#[derive(Debug, Clone)]
pub struct BubbleField {
    pub bubbles: Vec<Bubble>,
    rng: Rng,
    next_id: u64,
    /// Expected bubbles injected per second per channel.
    injection_rate: f64,
    flow_speed: f64,
}

impl BubbleField {
    /// `target_in_view` is the expected steady-state bubble count summed over
    /// all channels; the Poisson injection rate per channel follows from the
    /// transit time: count = rate * length / speed. The field starts in its
    /// steady state (Poisson counts, uniform along each channel) so early
    /// frames are as populated as late ones.
    pub fn new(
        channels: &ChannelGeometry,
        flow_speed: f64,
        target_in_view: f64,
        seed: u64,
    ) -> Self {
        let n = channels.segments.len().max(1);
        let mean_length: f64 =
            channels.segments.iter().map(|s| s.length()).sum::<f64>() / n as f64;
        let transit = mean_length / flow_speed;
        let injection_rate = target_in_view / n as f64 / transit;
        let mut field = BubbleField {
            bubbles: Vec::new(),
            rng: Rng::derive(seed, "bubbles", 0),
            next_id: 0,
            injection_rate,
            flow_speed,
        };
        for (ci, seg) in channels.segments.iter().enumerate() {
            let n_init = field.rng.poisson(target_in_view / n as f64);
            for _ in 0..n_init {
                let along = field.rng.uniform() * seg.length();
                let radial = field.sample_lumen_offset(seg);
                let amplitude = field.rng.uniform_in(0.7, 1.0);
                let speed_factor = field.rng.uniform_in(0.9, 1.1);
                field.bubbles.push(Bubble {
                    id: field.next_id,
                    channel: ci,
                    along,
                    radial_offset: radial,
                    amplitude,
                    speed_factor,
                });
                field.next_id += 1;
            }
        }
        field
    }

    /// Advance all bubbles by `dt` seconds: uniform advection along channel
    /// axes, removal at the outlet and Poisson injection at the inlet.
    pub fn advect(&mut self, channels: &ChannelGeometry, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let step = self.flow_speed * dt;
        for b in &mut self.bubbles {
            b.along += step * b.speed_factor;
        }
        self.bubbles
            .retain(|b| b.along <= channels.segments[b.channel].length());
        for (ci, seg) in channels.segments.iter().enumerate() {
            let n_new = self.rng.poisson(self.injection_rate * dt);
            for _ in 0..n_new {
                // entry moment uniform within dt; position within the lumen
                let along = self.rng.uniform() * step;
                let radial = self.sample_lumen_offset(seg);
                let amplitude = self.rng.uniform_in(0.7, 1.0);
                let speed_factor = self.rng.uniform_in(0.9, 1.1);
                self.bubbles.push(Bubble {
                    id: self.next_id,
                    channel: ci,
                    along,
                    radial_offset: radial,
                    amplitude,
                    speed_factor,
                });
                self.next_id += 1;
            }
        }
    }

    fn sample_lumen_offset(&mut self, seg: &ChannelSegment) -> Vec3 {
        let axis = seg.axis();
        // orthonormal basis perpendicular to the axis
        let helper = if axis.z.abs() < 0.9 {
            Vec3::new(0.0, 0.0, 1.0)
        } else {
            Vec3::new(1.0, 0.0, 0.0)
        };
        let u = Vec3::new(
            axis.y * helper.z - axis.z * helper.y,
            axis.z * helper.x - axis.x * helper.z,
            axis.x * helper.y - axis.y * helper.x,
        )
        .normalized();
        let v = Vec3::new(
            axis.y * u.z - axis.z * u.y,
            axis.z * u.x - axis.x * u.z,
            axis.x * u.y - axis.y * u.x,
        );
        let r = seg.radius * self.rng.uniform().sqrt();
        let theta = self.rng.uniform() * 2.0 * std::f64::consts::PI;
        u * (r * theta.cos()) + v * (r * theta.sin())
    }

    /// Phantom-frame position of a bubble.
    pub fn position(&self, b: &Bubble, channels: &ChannelGeometry) -> Vec3 {
        let seg = &channels.segments[b.channel];
        seg.start + seg.axis() * b.along + b.radial_offset
    }

    /// Phantom-frame velocity of a bubble.
    pub fn velocity(&self, b: &Bubble, channels: &ChannelGeometry) -> Vec3 {
        channels.segments[b.channel].axis() * (self.flow_speed * b.speed_factor)
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// Static description of the phantom and its motion.
#[derive(Debug, Clone)]
pub struct World {
    /// Fixed speckle cloud in the phantom frame: (position, amplitude).
    pub speckle: Vec<(Vec3, f64)>,
    /// Landmark shell and support-lobe samples: (position, amplitude).
    pub landmark_points: Vec<(Vec3, f64)>,
    pub landmark_center: Vec3,
    pub channels: ChannelGeometry,
    pub profile: MotionProfile,
    pub flow_speed: f64,
    pub phantom_min: Vec3,
    pub phantom_max: Vec3,
}

/// Parameters for building a [`World`].
#[derive(Debug, Clone)]
pub struct WorldParams {
    pub seed: u64,
    pub speckle_points: usize,
    /// Phantom block extent (mm), centred on `phantom_center`.
    pub block_extent: Vec3,
    pub phantom_center: Vec3,
    pub landmark_center: Vec3,
    pub channels: ChannelGeometry,
    pub profile: MotionProfile,
    pub flow_ul_per_min: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        let channel_center = Vec3::new(0.0, 0.0, 32.0);
        WorldParams {
            seed: 1,
            speckle_points: 2000,
            block_extent: Vec3::new(30.0, 20.0, 20.0),
            phantom_center: Vec3::new(0.0, 0.0, 30.0),
            landmark_center: Vec3::new(0.0, 0.0, 30.0),
            channels: ChannelGeometry::crossed(channel_center, 8.0, 20.0, 0.09),
            profile: MotionProfile::static_profile(),
            flow_ul_per_min: 1.5,
        }
    }
}

/// Evenly distributed directions on the unit sphere (golden-spiral order).
fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            Vec3::new(r * th.cos(), y, r * th.sin())
        })
        .collect()
}

impl World {
    pub fn build(params: &WorldParams) -> Result<World> {
        params.profile.validate()?;
        let half = params.block_extent / 2.0;
        let pmin = params.phantom_center - half;
        let pmax = params.phantom_center + half;
        params.channels.validate(pmin, pmax)?;

        let mut rng = Rng::derive(params.seed, "speckle", 0);
        let mut speckle = Vec::with_capacity(params.speckle_points);
        for _ in 0..params.speckle_points {
            let p = Vec3::new(
                rng.uniform_in(pmin.x, pmax.x),
                rng.uniform_in(pmin.y, pmax.y),
                rng.uniform_in(pmin.z, pmax.z),
            );
            speckle.push((p, rng.uniform_in(0.5, 1.0)));
        }

        // Hyperechoic landmark: dense shell of a 1 mm ball plus two smaller
        // support lobes beneath it, an order of magnitude brighter than the
        // speckle. The shell is specular (amplitude falls with the angle
        // between the outward normal and the array direction), so the image
        // shows a compact bright dome rather than a ring of equal maxima.
        let mut landmark_points = Vec::new();
        let specular = |d: Vec3| (-d.z).max(0.0).powi(2);
        for d in fibonacci_sphere(192) {
            let w = specular(d);
            if w > 1e-3 {
                landmark_points.push((params.landmark_center + d * 0.5, 10.0 * w));
            }
        }
        for side in [-1.0, 1.0] {
            let lobe_center = params.landmark_center + Vec3::new(1.3 * side, 0.0, 1.1);
            for d in fibonacci_sphere(48) {
                let w = specular(d);
                if w > 1e-3 {
                    landmark_points.push((lobe_center + d * 0.3, 6.0 * w));
                }
            }
        }

        Ok(World {
            speckle,
            landmark_points,
            landmark_center: params.landmark_center,
            channels: params.channels.clone(),
            profile: params.profile.clone(),
            flow_speed: flow_speed_mm_per_s(params.flow_ul_per_min, params.channels.segments[0].radius),
            phantom_min: pmin,
            phantom_max: pmax,
        })
    }

    pub fn bubble_field(&self, target_in_view: f64, seed: u64) -> BubbleField {
        BubbleField::new(&self.channels, self.flow_speed, target_in_view, seed)
    }

    /// Landmark centre in the probe frame at time `t`.
    pub fn landmark_probe_position(&self, t: f64, pose: &ProbePose) -> Vec3 {
        pose.world_to_probe(self.landmark_center + stage_position(&self.profile, t))
    }

    /// All scatterers (speckle, landmark, bubbles) in the probe frame at
    /// time `t`, displaced by the stage and mapped through the inverse of
    /// the probe pose.
    pub fn scatterers_at(
        &self,
        t: f64,
        pose: &ProbePose,
        bubbles: &BubbleField,
    ) -> Vec<Scatterer> {
        let disp = stage_position(&self.profile, t);
        let mut out = Vec::with_capacity(
            self.speckle.len() + self.landmark_points.len() + bubbles.bubbles.len(),
        );
        for &(p, a) in &self.speckle {
            out.push(Scatterer {
                position: pose.world_to_probe(p + disp),
                amplitude: a,
                kind: ScattererKind::Tissue,
                velocity: Vec3::ZERO,
            });
        }
        for &(p, a) in &self.landmark_points {
            out.push(Scatterer {
                position: pose.world_to_probe(p + disp),
                amplitude: a,
                kind: ScattererKind::Landmark,
                velocity: Vec3::ZERO,
            });
        }
        for b in &bubbles.bubbles {
            let p = bubbles.position(b, &self.channels);
            let v = bubbles.velocity(b, &self.channels);
            out.push(Scatterer {
                position: pose.world_to_probe(p + disp),
                amplitude: b.amplitude,
                kind: ScattererKind::Bubble,
                velocity: pose.direction_to_probe(v),
            });
        }
        out
    }
}

/// Dump a scatterer cloud as CSV (x,y,z,amplitude,kind).
pub fn scatterers_to_csv(scatterers: &[Scatterer]) -> String {
    let mut s = String::from("x_mm,y_mm,z_mm,amplitude,kind\n");
    for sc in scatterers {
        let kind = match sc.kind {
            ScattererKind::Tissue => "tissue",
            ScattererKind::Landmark => "landmark",
            ScattererKind::Bubble => "bubble",
        };
        s.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6},{}\n",
            sc.position.x, sc.position.y, sc.position.z, sc.amplitude, kind
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_leg(speed: f64, distance: f64) -> MotionProfile {
        MotionProfile {
            mode: ProfileMode::MixedDemo,
            lead_in: 0.0,
            segments: vec![MotionSegment {
                direction: Vec3::new(1.0, 0.0, 0.0),
                distance,
                speed,
                accel: 3.0,
                dwell: 0.0,
            }],
        }
    }

    #[test]
    fn stage_position_at_start_is_zero() {
        let p = single_leg(2.0, 20.0);
        assert_eq!(stage_position(&p, 0.0), Vec3::ZERO);
    }

    #[test]
    fn stage_position_closed_form() {
        // a = 3, v = 2: d_acc = v^2/2a = 0.6667 mm reached at t = 0.6667 s,
        // then cruise; at t = 1.0 s the displacement is 1.3333 mm.
        let p = single_leg(2.0, 20.0);
        let d = stage_position(&p, 1.0);
        assert!((d.x - 4.0 / 3.0).abs() < 1e-9, "{}", d.x);
        assert_eq!(d.y, 0.0);
    }

    #[test]
    fn stage_leg_completes_at_total_time() {
        // T = v/a + (D - v^2/a)/v + v/a = 10.6667 s for v = 2, a = 3, D = 20.
        let p = single_leg(2.0, 20.0);
        let t_total: f64 = 2.0 / 3.0 + (20.0 - 4.0 / 3.0) / 2.0 + 2.0 / 3.0;
        assert!((t_total - 32.0 / 3.0).abs() < 1e-12);
        let d = stage_position(&p, t_total);
        assert!((d.x - 20.0).abs() < 1e-9);
        // beyond the end it stays at the final position
        assert!((stage_position(&p, t_total + 5.0).x - 20.0).abs() < 1e-12);
    }

    #[test]
    fn triangular_profile_when_distance_short() {
        // distance < v^2/a never reaches cruise speed
        let p = single_leg(5.0, 2.0);
        let seg = &p.segments[0];
        assert!((seg.move_duration() - 2.0 * (2.0_f64 / 3.0).sqrt()).abs() < 1e-12);
        let d = stage_position(&p, seg.move_duration());
        assert!((d.x - 2.0).abs() < 1e-9);
    }

    #[test]
    fn stage_position_is_continuous() {
        let p = MotionProfile::stepped_sweep(Vec3::new(1.0, 0.0, 0.0), 1.0);
        let dur = p.duration();
        let eps = 1e-4;
        let mut t = 0.0;
        while t < dur + 1.0 {
            let d0 = stage_position(&p, t);
            let d1 = stage_position(&p, t + eps);
            let v_max = 5.0;
            let bound = (v_max + STAGE_ACCEL * eps) * eps;
            assert!((d1 - d0).norm() <= bound + 1e-12, "jump at t={t}");
            t += 0.137;
        }
    }

    #[test]
    fn round_trip_returns_to_start() {
        for profile in [
            MotionProfile::mixed_demo(Vec3::new(1.0, 0.0, 0.0), 2.0),
            MotionProfile::stepped_sweep(Vec3::new(0.0, 1.0, 0.0), 2.0),
        ] {
            let d = stage_position(&profile, profile.duration() + 1.0);
            assert!(d.norm() < 1e-9, "residual {}", d.norm());
        }
    }

    #[test]
    fn flow_speed_from_rate() {
        // 1.5 uL/min through a 90 um radius channel: Q = vA gives 0.982 mm/s.
        let v = flow_speed_mm_per_s(1.5, 0.09);
        assert!((v - 0.982).abs() < 0.001, "{v}");
    }

    #[test]
    fn bubble_advection_uniform() {
        let channels = ChannelGeometry::parallel(Vec3::new(0.0, 0.0, 30.0), 10.0, 1.0, 0.09);
        let mut field = BubbleField::new(&channels, 1.0, 0.0, 9);
        field.bubbles.push(Bubble {
            id: 0,
            channel: 0,
            along: 0.0,
            radial_offset: Vec3::ZERO,
            amplitude: 1.0,
            speed_factor: 1.0,
        });
        field.advect(&channels, 1.0);
        assert!((field.bubbles[0].along - 1.0).abs() < 1e-12);
        // dt = 0 leaves the state untouched
        let before = field.bubbles.clone();
        field.advect(&channels, 0.0);
        assert_eq!(before.len(), field.bubbles.len());
        assert!((before[0].along - field.bubbles[0].along).abs() == 0.0);
    }

    #[test]
    fn bubble_steady_state_count() {
        let channels = ChannelGeometry::crossed(Vec3::new(0.0, 0.0, 32.0), 8.0, 20.0, 0.09);
        let mut field = BubbleField::new(&channels, 1.0, 5.0, 11);
        let dt = 1.0 / 85.0;
        // warm up past one transit, then average
        for _ in 0..(85 * 20) {
            field.advect(&channels, dt);
        }
        let mut total = 0usize;
        let n_steps = 85 * 60;
        for _ in 0..n_steps {
            field.advect(&channels, dt);
            total += field.bubbles.len();
        }
        let mean = total as f64 / n_steps as f64;
        assert!((mean - 5.0).abs() < 1.0, "steady-state count {mean}");
    }

    #[test]
    fn co_moving_probe_cancels_stage_motion() {
        let params = WorldParams {
            profile: MotionProfile::mixed_demo(Vec3::new(1.0, 0.0, 0.0), 0.5),
            ..WorldParams::default()
        };
        let world = World::build(&params).unwrap();
        let bubbles = world.bubble_field(0.0, 1);
        let rest = world.scatterers_at(0.0, &ProbePose::new(Vec3::ZERO, 0.0), &bubbles);
        for t in [1.0, 3.0, 7.0] {
            let disp = stage_position(&world.profile, t);
            let pose = ProbePose::new(disp, 0.0);
            let moved = world.scatterers_at(t, &pose, &bubbles);
            for (a, b) in rest.iter().zip(moved.iter()) {
                assert!((a.position - b.position).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn yaw_maps_lateral_motion_to_elevation() {
        // With the probe yawed 90 degrees, world +x motion appears along the
        // probe's -y (elevational) axis.
        let pose = ProbePose::new(Vec3::ZERO, 90.0);
        let p = pose.world_to_probe(Vec3::new(5.0, 0.0, 30.0));
        assert!(p.x.abs() < 1e-12, "{p}");
        assert!((p.y + 5.0).abs() < 1e-12, "{p}");
        assert!((p.z - 30.0).abs() < 1e-12);
    }

    #[test]
    fn default_array_spec_is_valid() {
        let a = ArraySpec::default();
        a.validate().unwrap();
        assert_eq!(a.n_elements(), 1024);
        // corner elements sit within the aperture
        let p = a.element_position(0);
        assert!(p.x.abs() <= a.aperture_x / 2.0);
        assert!(p.y.abs() <= a.aperture_y / 2.0);
        assert!((a.wavelength() - 0.19744).abs() < 1e-4);
    }
}
