//! Forward models producing per-frame data.
//!
//! Two fidelity levels share one scene description: a point-scatterer
//! channel-data simulator for the amplitude-modulation (AM) transmit
//! sequence, and a fast PSF-splat volume synthesizer used for long
//! closed-loop runs where beamforming every frame would be wasteful.
//!
//! Tissue responds linearly to the transmit drive, so a half-aperture
//! transmission produces exactly half the echo; bubbles respond nonlinearly
//! (half drive gives `gamma * half` echo). Subtracting the two half-aperture
//! frames from the full-aperture frame therefore cancels tissue exactly and
//! leaves a bubble residual of `1 - gamma` relative amplitude.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::Rng;
use crate::scene::{ArraySpec, Scatterer, ScattererKind};
use crate::volume::{Grid3, Volume};
use rayon::prelude::*;
use std::fs;
use std::path::Path;

// ---------------------------------------------------------------------------
// Pulse
// ---------------------------------------------------------------------------

/// Gaussian-windowed sinusoid transmit pulse.
///
/// `fractional_bandwidth` is the -20 dB fractional bandwidth of the envelope
/// spectrum; the default 0.6 gives a two-way axial envelope of roughly
/// 0.26 mm FWHM at 7.8 MHz, consistent with the fast-path PSF model.
#[derive(Debug, Clone, Copy)]
pub struct PulseSpec {
    /// Centre frequency (MHz).
    pub center_freq: f64,
    /// Fractional -20 dB bandwidth of the envelope spectrum.
    pub fractional_bandwidth: f64,
}

impl Default for PulseSpec {
    fn default() -> Self {
        PulseSpec { center_freq: 7.8, fractional_bandwidth: 0.6 }
    }
}

const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949; // sqrt(8 ln 2)
const WIDTH20DB_TO_SIGMA: f64 = 4.291_932_053_271_44; // 2 sqrt(2 ln 10)

impl PulseSpec {
    /// Gaussian envelope sigma in microseconds.
    pub fn sigma_us(&self) -> f64 {
        let sigma_f = self.fractional_bandwidth * self.center_freq / WIDTH20DB_TO_SIGMA;
        1.0 / (2.0 * std::f64::consts::PI * sigma_f)
    }

    /// Two-way axial envelope FWHM in millimetres for sound speed `c` (mm/us).
    pub fn axial_fwhm_mm(&self, c: f64) -> f64 {
        FWHM_TO_SIGMA * self.sigma_us() * c / 2.0
    }

    /// Pulse half-support in microseconds (four sigma).
    pub fn half_support_us(&self) -> f64 {
        4.0 * self.sigma_us()
    }

    #[inline]
    pub fn eval(&self, t_us: f64) -> f64 {
        let s = self.sigma_us();
        if t_us.abs() > 4.0 * s {
            return 0.0;
        }
        (-0.5 * (t_us / s) * (t_us / s)).exp()
            * (2.0 * std::f64::consts::PI * self.center_freq * t_us).cos()
    }
}

// ---------------------------------------------------------------------------
// Channel data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxAperture {
    Full,
    HalfA,
    HalfB,
}

impl TxAperture {
    pub fn tag(&self) -> &'static str {
        match self {
            TxAperture::Full => "full",
            TxAperture::HalfA => "half_a",
            TxAperture::HalfB => "half_b",
        }
    }

    /// Transmit drive relative to the full aperture. The half apertures use
    /// interleaved element sets, each delivering half the plane-wave drive.
    fn drive(&self) -> f64 {
        match self {
            TxAperture::Full => 1.0,
            TxAperture::HalfA | TxAperture::HalfB => 0.5,
        }
    }
}

/// Real (RF) echo traces, one row per receive element.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrame {
    /// Element-major samples: `samples[e * n_samples + i]`.
    pub samples: Vec<f32>,
    pub n_elements: usize,
    pub n_samples: usize,
    /// Sample rate (MHz).
    pub sample_rate: f64,
    /// Time of the first sample (us) after transmit.
    pub t0: f64,
    pub tx_aperture: TxAperture,
}

impl ChannelFrame {
    pub fn zeros(n_elements: usize, n_samples: usize, sample_rate: f64, t0: f64, tx: TxAperture) -> Self {
        ChannelFrame {
            samples: vec![0.0; n_elements * n_samples],
            n_elements,
            n_samples,
            sample_rate,
            t0,
            tx_aperture: tx,
        }
    }

    #[inline]
    pub fn trace(&self, element: usize) -> &[f32] {
        &self.samples[element * self.n_samples..(element + 1) * self.n_samples]
    }

    /// Linear interpolation of one trace at time `t_us`; zero outside the
    /// recorded window.
    #[inline]
    pub fn sample_at(&self, element: usize, t_us: f64) -> f64 {
        let fi = (t_us - self.t0) * self.sample_rate;
        if fi < 0.0 || fi > (self.n_samples - 1) as f64 {
            return 0.0;
        }
        let i0 = fi.floor() as usize;
        let i1 = (i0 + 1).min(self.n_samples - 1);
        let fr = fi - i0 as f64;
        let tr = self.trace(element);
        tr[i0] as f64 * (1.0 - fr) + tr[i1] as f64 * fr
    }

    pub fn total_energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    /// Persist as raw little-endian f32 plus a sidecar text header.
    pub fn save(&self, path_stem: &Path, config_hash: &str) -> Result<()> {
        let mut raw = Vec::with_capacity(self.samples.len() * 4);
        for v in &self.samples {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path_stem.with_extension("raw"), raw)?;
        let hdr = format!(
            "sonotrack channel v1\n\
             elements = {}\n\
             samples = {}\n\
             rate_mhz = {:.9}\n\
             t0_us = {:.9}\n\
             aperture = {}\n\
             config_hash = {}\n",
            self.n_elements, self.n_samples, self.sample_rate, self.t0,
            self.tx_aperture.tag(), config_hash,
        );
        fs::write(path_stem.with_extension("hdr"), hdr)?;
        Ok(())
    }

    pub fn load(path_stem: &Path) -> Result<ChannelFrame> {
        let hdr = fs::read_to_string(path_stem.with_extension("hdr"))?;
        let mut n_elements = 0usize;
        let mut n_samples = 0usize;
        let mut sample_rate = 0.0f64;
        let mut t0 = 0.0f64;
        let mut tx = TxAperture::Full;
        for line in hdr.lines().skip(1) {
            let Some((key, val)) = line.split_once('=') else { continue };
            match key.trim() {
                "elements" => n_elements = val.trim().parse().unwrap_or(0),
                "samples" => n_samples = val.trim().parse().unwrap_or(0),
                "rate_mhz" => sample_rate = val.trim().parse().unwrap_or(0.0),
                "t0_us" => t0 = val.trim().parse().unwrap_or(0.0),
                "aperture" => {
                    tx = match val.trim() {
                        "half_a" => TxAperture::HalfA,
                        "half_b" => TxAperture::HalfB,
                        _ => TxAperture::Full,
                    }
                }
                _ => {}
            }
        }
        let raw = fs::read(path_stem.with_extension("raw"))?;
        if raw.len() != n_elements * n_samples * 4 {
            return Err(Error::Format("channel raw size does not match header".into()));
        }
        let samples = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ChannelFrame { samples, n_elements, n_samples, sample_rate, t0, tx_aperture: tx })
    }
}

/// The three frames of one Half-Full-Half AM event, on a shared time base.
#[derive(Debug, Clone)]
pub struct AmTriplet {
    pub full: ChannelFrame,
    pub half_a: ChannelFrame,
    pub half_b: ChannelFrame,
}

// ---------------------------------------------------------------------------
// Channel-data simulation
// ---------------------------------------------------------------------------

/// Parameters of the channel-data simulator.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub pulse: PulseSpec,
    /// Receive sample rate (MHz).
    pub sample_rate: f64,
    /// Imaging depth (mm) covered by the recording window.
    pub depth: f64,
    /// Bubble nonlinearity: echo scale under half drive relative to linear.
    pub nonlinearity: f64,
    /// Apply a cosine receive-directivity weight per element.
    pub directivity_cosine: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            pulse: PulseSpec::default(),
            sample_rate: 31.2,
            depth: 45.0,
            nonlinearity: 0.85,
            directivity_cosine: true,
        }
    }
}

impl SimParams {
    /// Number of receive samples covering the two-way time of flight plus
    /// the pulse tail.
    pub fn n_samples(&self, sound_speed: f64) -> usize {
        let t_max = 2.0 * self.depth / sound_speed + 2.0 * self.pulse.half_support_us();
        (t_max * self.sample_rate).ceil() as usize
    }
}

/// Echo arrival time (us) for a plane-wave transmit: down to the scatterer
/// depth, back to the element.
#[inline]
pub fn echo_arrival_us(element: Vec3, scatterer: Vec3, sound_speed: f64) -> f64 {
    (scatterer.z + (element - scatterer).norm()) / sound_speed
}

/// Time offset (us) between successive receive sub-aperture transmissions:
/// four times the two-way time of flight at the imaging depth.
pub fn subaperture_interval_us(depth: f64, sound_speed: f64) -> f64 {
    4.0 * 2.0 * depth / sound_speed
}

fn scatterer_echo_scale(s: &Scatterer, tx: TxAperture, nonlinearity: f64) -> f64 {
    let drive = tx.drive();
    match s.kind {
        // linear: echo proportional to drive
        ScattererKind::Tissue | ScattererKind::Landmark => s.amplitude * drive,
        // nonlinear: half drive produces gamma * half echo
        ScattererKind::Bubble => {
            if tx == TxAperture::Full {
                s.amplitude
            } else {
                s.amplitude * nonlinearity * drive
            }
        }
    }
}

fn accumulate_echoes(
    frame: &mut ChannelFrame,
    elements: &[(usize, Vec3)],
    scatterers: &[Scatterer],
    params: &SimParams,
    sound_speed: f64,
    tx: TxAperture,
) {
    let n_samples = frame.n_samples;
    let sample_rate = frame.sample_rate;
    let t0 = frame.t0;
    let pulse = params.pulse;
    let half_support = pulse.half_support_us();
    let rows: Vec<(usize, Vec<f32>)> = elements
        .par_iter()
        .map(|&(e, pe)| {
            let mut row = vec![0.0f32; n_samples];
            for s in scatterers {
                let scale = scatterer_echo_scale(s, tx, params.nonlinearity);
                if scale == 0.0 {
                    continue;
                }
                let r = (pe - s.position).norm();
                let tau = (s.position.z + r) / sound_speed;
                let weight = if params.directivity_cosine && r > 0.0 {
                    scale * (s.position.z - pe.z).max(0.0) / r
                } else {
                    scale
                };
                if weight == 0.0 {
                    continue;
                }
                let i_lo = (((tau - half_support) - t0) * sample_rate).floor().max(0.0) as usize;
                let i_hi =
                    ((((tau + half_support) - t0) * sample_rate).ceil() as usize).min(n_samples - 1);
                for i in i_lo..=i_hi {
                    let t = t0 + i as f64 / sample_rate;
                    row[i] += (weight * pulse.eval(t - tau)) as f32;
                }
            }
            (e, row)
        })
        .collect();
    for (e, row) in rows {
        frame.samples[e * n_samples..(e + 1) * n_samples].copy_from_slice(&row);
    }
}

/// Simulate one receive frame for the given transmit aperture. All elements
/// receive; an empty scatterer list yields a valid all-zero frame; scatterers
/// behind the array are rejected.
pub fn simulate_channel_data(
    scatterers: &[Scatterer],
    array: &ArraySpec,
    tx: TxAperture,
    params: &SimParams,
) -> Result<ChannelFrame> {
    for s in scatterers {
        if s.position.z <= 0.0 {
            return Err(Error::InvalidScatterer(format!(
                "scatterer at depth {:.3} mm is not in front of the array",
                s.position.z
            )));
        }
        if s.amplitude < 0.0 {
            return Err(Error::InvalidScatterer("negative amplitude".into()));
        }
    }
    let n_samples = params.n_samples(array.sound_speed);
    let mut frame =
        ChannelFrame::zeros(array.n_elements(), n_samples, params.sample_rate, 0.0, tx);
    let elements: Vec<(usize, Vec3)> =
        (0..array.n_elements()).map(|e| (e, array.element_position(e))).collect();
    accumulate_echoes(&mut frame, &elements, scatterers, params, array.sound_speed, tx);
    Ok(frame)
}

/// Simulate one frame with sequential receive sub-apertures (four bands of
/// 32 x 8 elements). Each band receives after its own transmission, spaced by
/// [`subaperture_interval_us`]; `snapshots` holds the scatterer state at each
/// of the four transmissions.
pub fn simulate_channel_data_multiplexed(
    snapshots: &[Vec<Scatterer>],
    array: &ArraySpec,
    tx: TxAperture,
    params: &SimParams,
) -> Result<ChannelFrame> {
    if snapshots.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected 4 sub-aperture snapshots, got {}",
            snapshots.len()
        )));
    }
    let n_samples = params.n_samples(array.sound_speed);
    let mut frame =
        ChannelFrame::zeros(array.n_elements(), n_samples, params.sample_rate, 0.0, tx);
    let band_rows = array.rows / 4;
    for (band, scatterers) in snapshots.iter().enumerate() {
        for s in scatterers {
            if s.position.z <= 0.0 {
                return Err(Error::InvalidScatterer("scatterer behind the array".into()));
            }
        }
        let elements: Vec<(usize, Vec3)> = (band * band_rows * array.cols
            ..(band + 1) * band_rows * array.cols)
            .map(|e| (e, array.element_position(e)))
            .collect();
        accumulate_echoes(&mut frame, &elements, scatterers, params, array.sound_speed, tx);
    }
    Ok(frame)
}

/// Simulate a complete Half-Full-Half AM event for one scatterer snapshot.
pub fn simulate_am_triplet(
    scatterers: &[Scatterer],
    array: &ArraySpec,
    params: &SimParams,
) -> Result<AmTriplet> {
    Ok(AmTriplet {
        full: simulate_channel_data(scatterers, array, TxAperture::Full, params)?,
        half_a: simulate_channel_data(scatterers, array, TxAperture::HalfA, params)?,
        half_b: simulate_channel_data(scatterers, array, TxAperture::HalfB, params)?,
    })
}

/// AM subtraction: full minus the sum of the two half-aperture frames,
/// elementwise. Cancels linear (tissue) echoes, keeps bubble residuals.
pub fn am_subtract(triplet: &AmTriplet) -> Result<ChannelFrame> {
    let f = &triplet.full;
    for h in [&triplet.half_a, &triplet.half_b] {
        if h.n_elements != f.n_elements
            || h.n_samples != f.n_samples
            || h.sample_rate != f.sample_rate
            || h.t0 != f.t0
        {
            return Err(Error::ShapeMismatch(
                "AM triplet frames disagree on shape or time base".into(),
            ));
        }
    }
    let mut out = f.clone();
    out.tx_aperture = TxAperture::Full;
    for i in 0..out.samples.len() {
        out.samples[i] = f.samples[i] - triplet.half_a.samples[i] - triplet.half_b.samples[i];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fast PSF-splat synthesis
// ---------------------------------------------------------------------------

/// Anisotropic Gaussian point-spread function, full widths at half maximum
/// in millimetres. Defaults approximate the diffraction-limited PSF at
/// 7.8 MHz on a ~10 mm aperture.
#[derive(Debug, Clone, Copy)]
pub struct PsfSpec {
    pub fwhm_x: f64,
    pub fwhm_y: f64,
    pub fwhm_z: f64,
}

impl Default for PsfSpec {
    fn default() -> Self {
        PsfSpec { fwhm_x: 0.4, fwhm_y: 0.4, fwhm_z: 0.25 }
    }
}

impl PsfSpec {
    pub fn sigma(&self) -> Vec3 {
        Vec3::new(
            self.fwhm_x / FWHM_TO_SIGMA,
            self.fwhm_y / FWHM_TO_SIGMA,
            self.fwhm_z / FWHM_TO_SIGMA,
        )
    }
}

/// Blur a scalar field in place with a separable Gaussian given in voxel
/// units, then rescale so the per-voxel variance matches the input's.
fn correlate_noise(field: &mut [f64], grid: &Grid3, sigma_vox: Vec3) {
    let mut power = 1.0f64;
    let mut scratch = vec![0.0f64; field.len()];
    for axis in 0..3 {
        let sigma = [sigma_vox.x, sigma_vox.y, sigma_vox.z][axis];
        if sigma <= 0.0 {
            continue;
        }
        let kernel = crate::util::gaussian_kernel(sigma, 3.0);
        power *= kernel.iter().map(|k| k * k).sum::<f64>();
        crate::util::convolve_axis(field, &mut scratch, grid.dims, axis, &kernel, false);
        field.copy_from_slice(&scratch);
    }
    let restore = 1.0 / power.sqrt();
    for v in field.iter_mut() {
        *v *= restore;
    }
}

/// Splat each scatterer as an anisotropic Gaussian at its true position,
/// scaled by its amplitude and restricted to the grid. Additive noise at
/// `snr_db` below the mean clean signal level (the mean magnitude over the
/// signal support) is applied when requested; like real beamformed envelope
/// noise it is spatially correlated at the PSF scale, and the result is
/// clamped at zero like an envelope-detected image.
pub fn synthesize_volume_fast(
    scatterers: &[Scatterer],
    grid: Grid3,
    psf: &PsfSpec,
    snr_db: Option<f64>,
    noise_rng: Option<&mut Rng>,
) -> Volume {
    let mut vol = Volume::zeros(grid);
    let sigma = psf.sigma();
    let reach = 4.0;
    for s in scatterers {
        if s.amplitude == 0.0 {
            continue;
        }
        let f = grid.to_fractional(s.position);
        let rx = reach * sigma.x / grid.spacing.x;
        let ry = reach * sigma.y / grid.spacing.y;
        let rz = reach * sigma.z / grid.spacing.z;
        let x_lo = (f.x - rx).ceil().max(0.0) as usize;
        let x_hi = (f.x + rx).floor().min((grid.dims[0] - 1) as f64);
        let y_lo = (f.y - ry).ceil().max(0.0) as usize;
        let y_hi = (f.y + ry).floor().min((grid.dims[1] - 1) as f64);
        let z_lo = (f.z - rz).ceil().max(0.0) as usize;
        let z_hi = (f.z + rz).floor().min((grid.dims[2] - 1) as f64);
        if x_hi < 0.0 || y_hi < 0.0 || z_hi < 0.0 {
            continue;
        }
        let (x_hi, y_hi, z_hi) = (x_hi as usize, y_hi as usize, z_hi as usize);
        // separable kernel: one exp per axis sample instead of per voxel
        let gx: Vec<f64> = (x_lo..=x_hi)
            .map(|ix| {
                let d = (grid.origin.x + grid.spacing.x * ix as f64 - s.position.x) / sigma.x;
                (-0.5 * d * d).exp()
            })
            .collect();
        let gy: Vec<f64> = (y_lo..=y_hi)
            .map(|iy| {
                let d = (grid.origin.y + grid.spacing.y * iy as f64 - s.position.y) / sigma.y;
                (-0.5 * d * d).exp()
            })
            .collect();
        let gz: Vec<f64> = (z_lo..=z_hi)
            .map(|iz| {
                let d = (grid.origin.z + grid.spacing.z * iz as f64 - s.position.z) / sigma.z;
                (-0.5 * d * d).exp()
            })
            .collect();
        for iz in z_lo..=z_hi {
            let az = s.amplitude * gz[iz - z_lo];
            for iy in y_lo..=y_hi {
                let ayz = az * gy[iy - y_lo];
                let row = grid.index(0, iy, iz);
                for ix in x_lo..=x_hi {
                    vol.data[row + ix] += (ayz * gx[ix - x_lo]) as f32;
                }
            }
        }
    }
    if let (Some(snr), Some(rng)) = (snr_db, noise_rng) {
        let peak = vol.max_value() as f64;
        if peak > 0.0 {
            let support = 0.01 * peak;
            let (mut sum, mut count) = (0.0f64, 0usize);
            for &v in &vol.data {
                if v as f64 > support {
                    sum += v as f64;
                    count += 1;
                }
            }
            let signal_level = sum / count.max(1) as f64;
            let noise_std = signal_level / 10f64.powf(snr / 20.0);
            let mut field: Vec<f64> = (0..vol.data.len()).map(|_| rng.normal()).collect();
            correlate_noise(
                &mut field,
                &grid,
                Vec3::new(
                    sigma.x / grid.spacing.x,
                    sigma.y / grid.spacing.y,
                    sigma.z / grid.spacing.z,
                ),
            );
            for (v, n) in vol.data.iter_mut().zip(field.iter()) {
                *v = (*v as f64 + noise_std * n).max(0.0) as f32;
            }
        }
    }
    vol
}
