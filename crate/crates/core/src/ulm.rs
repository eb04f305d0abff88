//! Offline super-resolution pipeline: residual motion correction,
//! Lagrangian contrast reconstruction, denoising, PSF estimation, bubble
//! localisation, tracking, persistence filtering and map accumulation.
//!
//! The pipeline consumes an acquisition record. Motion correction registers
//! each B-mode frame against frame 0 with a warm-started Levenberg-Marquardt
//! solver; contrast frames are then reconstructed in Lagrangian coordinates
//! by evaluating the contrast model at the motion-shifted physical positions
//! and assigning the values to reference-frame voxels — there is no
//! post-hoc image interpolation pass.

use crate::acoustics::{am_subtract, synthesize_volume_fast, PsfSpec};
use crate::beamform::das_beamform;
use crate::config::{ExperimentConfig, Fidelity, UlmConfig};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::registration::{LmOptions, RegResult, Translation3};
use crate::rng::Rng;
use crate::scene::{Scatterer, ScattererKind, World};
use crate::trackloop::{AcquisitionRecord, FrameRecord};
use crate::volume::{Grid3, Volume};
use rayon::prelude::*;
use std::collections::BTreeMap;

const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// One subvoxel bubble detection in reference-frame coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Localization {
    pub position: Vec3,
    /// Peak normalized cross-correlation coefficient, in [0, 1].
    pub ncc_peak: f64,
    pub frame_id: u64,
    pub timestamp: f64,
}

/// Ordered sequence of localizations of one bubble.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub localizations: Vec<Localization>,
    /// Velocity per link (between consecutive localizations), estimated over
    /// a multi-frame baseline to suppress localisation jitter.
    pub link_velocities: Vec<Vec3>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.localizations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.localizations.is_empty()
    }

    pub fn mean_speed(&self) -> f64 {
        if self.link_velocities.is_empty() {
            return 0.0;
        }
        self.link_velocities.iter().map(|v| v.norm()).sum::<f64>()
            / self.link_velocities.len() as f64
    }
}

/// Super-resolution density and speed maps on a common grid.
#[derive(Debug, Clone)]
pub struct SrMaps {
    pub density: Volume,
    pub speed: Volume,
}

// ---------------------------------------------------------------------------
// Residual motion correction
// ---------------------------------------------------------------------------

/// Register every frame against frame 0, warm-starting each solve from the
/// previous frame's result. `frame_at(k)` produces the B-mode volume of
/// frame `k`; the result holds one entry per frame (frame 0 is identity).
pub fn correct_residual_motion<F>(frame_at: F, n_frames: usize) -> Result<Vec<RegResult>>
where
    F: Fn(usize) -> Result<Volume> + Sync,
{
    use crate::registration::{pre_smooth, register_lm_smoothed};
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    // the reference is shared by every solve; low-pass it once
    let reference = pre_smooth(&frame_at(0)?);
    let mut out = Vec::with_capacity(n_frames);
    out.push(RegResult {
        t: Vec3::ZERO,
        final_cost: 0.0,
        iterations: 0,
        converged: true,
        trace: Vec::new(),
    });
    // the warm-start chain is sequential, but frame synthesis is not: the
    // next frame is prepared while the current one is being solved
    let prepare = |k: usize| -> Result<Volume> { Ok(pre_smooth(&frame_at(k)?)) };
    let mut warm = Vec3::ZERO;
    let mut current = prepare(1)?;
    for k in 1..n_frames {
        let (res, next) = std::thread::scope(|scope| {
            let worker = (k + 1 < n_frames).then(|| scope.spawn(|| prepare(k + 1)));
            let res = register_lm_smoothed(
                &reference,
                &current,
                &LmOptions { init: warm, ..LmOptions::default() },
            );
            let next = worker.map(|w| w.join().expect("frame synthesis panicked"));
            (res, next)
        });
        let res = res?;
        warm = res.t;
        out.push(res);
        if let Some(next) = next {
            current = next?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lagrangian reconstruction
// ---------------------------------------------------------------------------

/// One motion-corrected contrast frame: values evaluated at `v + t` and
/// assigned to reference voxels `v`; voxels whose shifted physical position
/// fell outside the field of view are zeroed and counted.
#[derive(Debug, Clone)]
pub struct LagrangianFrame {
    pub volume: Volume,
    pub invalid_voxels: usize,
}

/// Reconstruct one frame in Lagrangian coordinates. `synth_at` evaluates the
/// frame's contrast image on an arbitrary grid (shifted voxel positions for
/// the channel path mean beamforming at those positions; for the fast path,
/// evaluating the splat model there).
pub fn lagrangian_frame<F>(
    synth_at: F,
    translation: Translation3,
    ref_grid: Grid3,
    fov_min: Vec3,
    fov_max: Vec3,
) -> LagrangianFrame
where
    F: FnOnce(Grid3) -> Volume,
{
    let shifted = Grid3::new(ref_grid.origin + translation, ref_grid.spacing, ref_grid.dims);
    let mut vol = synth_at(shifted);
    vol.grid = ref_grid;
    let mut invalid = 0usize;
    for idx in 0..ref_grid.n_voxels() {
        let (ix, iy, iz) = ref_grid.unravel(idx);
        let p = shifted.voxel_center(ix, iy, iz);
        let inside = p.x >= fov_min.x
            && p.y >= fov_min.y
            && p.z >= fov_min.z
            && p.x <= fov_max.x
            && p.y <= fov_max.y
            && p.z <= fov_max.z;
        if !inside {
            vol.data[idx] = 0.0;
            invalid += 1;
        }
    }
    LagrangianFrame { volume: vol, invalid_voxels: invalid }
}

// ---------------------------------------------------------------------------
// Denoising
// ---------------------------------------------------------------------------

/// Separable Gaussian-weighted local mean with edge renormalization.
fn local_mean(vol: &Volume, window: usize, fwhm_mm: f64) -> Vec<f64> {
    let half = window / 2;
    let mut out: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let mut scratch = vec![0.0f64; out.len()];
    for axis in 0..3 {
        let spacing = match axis {
            0 => vol.grid.spacing.x,
            1 => vol.grid.spacing.y,
            _ => vol.grid.spacing.z,
        };
        let sigma_vox = fwhm_mm / FWHM_TO_SIGMA / spacing;
        let weights: Vec<f64> = (0..window)
            .map(|i| {
                let d = i as f64 - half as f64;
                (-0.5 * (d / sigma_vox) * (d / sigma_vox)).exp()
            })
            .collect();
        crate::util::convolve_axis(&out, &mut scratch, vol.grid.dims, axis, &weights, true);
        std::mem::swap(&mut out, &mut scratch);
    }
    out
}

/// Robust noise scale estimate from the upper quartile: for zero-mean
/// Gaussian noise the 75th percentile sits at 0.6745 sigma, and the
/// estimate survives both sparse bright signal and the zero clamping of
/// envelope data (which would bias a median-based estimate).
pub fn estimate_noise_std(data: &[f32]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut buf: Vec<f32> = data.to_vec();
    let q75 = (buf.len() * 3) / 4;
    let idx = q75.min(buf.len() - 1);
    buf.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    (buf[idx] as f64).abs() / 0.6745
}

/// Zero every voxel that falls below the adaptive threshold (a Gaussian-
/// weighted local mean) or below an absolute noise floor.
pub fn denoise(vol: &Volume, cfg: &UlmConfig) -> Volume {
    let adaptive = local_mean(vol, cfg.adaptive_window, cfg.adaptive_fwhm_mm);
    let floor = cfg
        .noise_floor
        .unwrap_or_else(|| cfg.floor_scale * estimate_noise_std(&vol.data));
    let scale = vol.data.iter().map(|v| v.abs()).fold(0.0f32, f32::max) as f64;
    let eps = 1e-9 * scale.max(1e-30);
    let mut out = vol.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let val = *v as f64;
        if val <= adaptive[i] + eps || val < floor {
            *v = 0.0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Peaks and PSF estimation
// ---------------------------------------------------------------------------

/// Local maxima over the 26-neighbourhood with positive value, at least
/// `margin` voxels from every face, ordered by descending value. A plateau
/// voxel counts when nothing around it is larger and something is smaller;
/// exact ties therefore yield neighbouring candidates that the caller
/// deduplicates after refinement.
fn local_maxima(vol: &Volume, margin: usize) -> Vec<(usize, usize, usize)> {
    let [nx, ny, nz] = vol.grid.dims;
    if nx <= 2 * margin || ny <= 2 * margin || nz <= 2 * margin {
        return Vec::new();
    }
    let mut peaks: Vec<(f32, (usize, usize, usize))> = Vec::new();
    for iz in margin..nz - margin {
        for iy in margin..ny - margin {
            'voxel: for ix in margin..nx - margin {
                let v = vol.at(ix, iy, iz);
                if v <= 0.0 {
                    continue;
                }
                let mut any_smaller = false;
                for dz in -1i32..=1 {
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let q = vol.at(
                                (ix as i32 + dx) as usize,
                                (iy as i32 + dy) as usize,
                                (iz as i32 + dz) as usize,
                            );
                            if q > v {
                                continue 'voxel;
                            }
                            if q < v {
                                any_smaller = true;
                            }
                        }
                    }
                }
                if any_smaller {
                    peaks.push((v, (ix, iy, iz)));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    peaks.into_iter().map(|(_, p)| p).collect()
}

/// Incremental PSF estimator: feed denoised/raw frame pairs until enough
/// isolated single-bubble instances are collected, then average them.
pub struct PsfEstimator {
    window: usize,
    isolation_mm: f64,
    needed: usize,
    crops: Vec<Vec<f64>>,
    spacing: Vec3,
}

impl PsfEstimator {
    pub fn new(cfg: &UlmConfig, spacing: Vec3) -> Self {
        PsfEstimator {
            window: cfg.psf_window,
            isolation_mm: cfg.psf_isolation_mm,
            needed: cfg.psf_instances,
            crops: Vec::new(),
            spacing,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.crops.len() >= self.needed
    }

    /// Offer one frame. Detections come from the denoised volume, keeping
    /// only peaks of real prominence (residual noise spikes above the floor
    /// must neither become instances nor spoil the isolation test); crops
    /// are cut from the raw volume so the PSF tails are not clipped by the
    /// threshold. Isolation: no second detection within `isolation_mm`.
    pub fn offer(&mut self, denoised: &Volume, raw: &Volume) {
        if self.is_complete() {
            return;
        }
        let half = self.window / 2;
        let frame_max = denoised.max_value();
        if frame_max <= 0.0 {
            return;
        }
        let prominence = 0.3 * frame_max;
        let peaks: Vec<(usize, usize, usize)> = local_maxima(denoised, 1)
            .into_iter()
            .filter(|&(x, y, z)| denoised.at(x, y, z) >= prominence)
            .collect();
        let [nx, ny, nz] = denoised.grid.dims;
        for (i, &(px, py, pz)) in peaks.iter().enumerate() {
            if self.is_complete() {
                return;
            }
            // the crop window must fit entirely inside the volume
            if px < half
                || py < half
                || pz < half
                || px + half >= nx
                || py + half >= ny
                || pz + half >= nz
            {
                continue;
            }
            let p = denoised.grid.voxel_center(px, py, pz);
            let isolated = peaks.iter().enumerate().all(|(j, &(qx, qy, qz))| {
                i == j || (denoised.grid.voxel_center(qx, qy, qz) - p).norm() >= self.isolation_mm
            });
            if !isolated {
                continue;
            }
            let peak_val = raw.at(px, py, pz) as f64;
            if peak_val <= 0.0 {
                continue;
            }
            let mut crop = Vec::with_capacity(self.window.pow(3));
            for dz in 0..self.window {
                for dy in 0..self.window {
                    for dx in 0..self.window {
                        crop.push(
                            raw.at(px + dx - half, py + dy - half, pz + dz - half) as f64
                                / peak_val,
                        );
                    }
                }
            }
            self.crops.push(crop);
        }
    }

    /// Average the self-normalised instances into the PSF template.
    pub fn finish(self) -> Result<Volume> {
        if self.crops.len() < self.needed {
            return Err(Error::InsufficientPsfInstances {
                found: self.crops.len(),
                needed: self.needed,
            });
        }
        let w = self.window;
        let half = (w / 2) as f64;
        let grid = Grid3::new(
            Vec3::new(-half * self.spacing.x, -half * self.spacing.y, -half * self.spacing.z),
            self.spacing,
            [w, w, w],
        );
        let mut psf = Volume::zeros(grid);
        let n = self.crops.len() as f64;
        for crop in &self.crops {
            for (i, v) in crop.iter().enumerate() {
                psf.data[i] += (*v / n) as f32;
            }
        }
        Ok(psf)
    }
}

/// Estimate the PSF from a sequence of contrast frames (already denoised
/// pairs are built internally). Stops reading frames once enough isolated
/// instances were found.
pub fn estimate_psf<I>(frames: I, cfg: &UlmConfig) -> Result<Volume>
where
    I: IntoIterator<Item = Volume>,
{
    let mut est: Option<PsfEstimator> = None;
    for raw in frames {
        let e = est.get_or_insert_with(|| PsfEstimator::new(cfg, raw.grid.spacing));
        if e.is_complete() {
            break;
        }
        let den = denoise(&raw, cfg);
        e.offer(&den, &raw);
    }
    est.ok_or(Error::InsufficientPsfInstances { found: 0, needed: cfg.psf_instances })?
        .finish()
}

/// Measure the FWHM of a PSF volume along each axis through its maximum,
/// by linear interpolation of the half-maximum crossings.
pub fn psf_fwhm(psf: &Volume) -> Vec3 {
    let (cx, cy, cz) = psf.argmax();
    let peak = psf.at(cx, cy, cz) as f64;
    let half = peak / 2.0;
    let measure = |get: &dyn Fn(usize) -> f64, n: usize, c: usize, spacing: f64| -> f64 {
        let mut lo = c as f64;
        let mut hi = c as f64;
        for i in (0..c).rev() {
            if get(i) < half {
                let v1 = get(i + 1);
                let v0 = get(i);
                lo = i as f64 + (half - v0) / (v1 - v0);
                break;
            }
            lo = i as f64;
        }
        for i in c + 1..n {
            if get(i) < half {
                let v0 = get(i - 1);
                let v1 = get(i);
                hi = (i - 1) as f64 + (v0 - half) / (v0 - v1);
                break;
            }
            hi = i as f64;
        }
        (hi - lo) * spacing
    };
    let [nx, ny, nz] = psf.grid.dims;
    Vec3::new(
        measure(&|i| psf.at(i, cy, cz) as f64, nx, cx, psf.grid.spacing.x),
        measure(&|i| psf.at(cx, i, cz) as f64, ny, cy, psf.grid.spacing.y),
        measure(&|i| psf.at(cx, cy, i) as f64, nz, cz, psf.grid.spacing.z),
    )
}

// ---------------------------------------------------------------------------
// Localisation
// ---------------------------------------------------------------------------

/// PSF matched template prepared for repeated correlation: zero-mean
/// samples and their power, computed once.
struct NccTemplate {
    zero_mean: Vec<f64>,
    power: f64,
    window: usize,
}

impl NccTemplate {
    fn new(psf: &Volume) -> Self {
        let n = psf.data.len() as f64;
        let mean = psf.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let zero_mean: Vec<f64> = psf.data.iter().map(|&v| v as f64 - mean).collect();
        let power = zero_mean.iter().map(|v| v * v).sum();
        NccTemplate { zero_mean, power, window: psf.grid.dims[0] }
    }
}

/// Zero-normalised cross-correlation between the template and the volume
/// window centred on `(cx, cy, cz)`, in one pass: since the template is
/// zero-mean, the numerator is plainly sum(v * t). Windows that would leave
/// the volume return 0.
fn ncc_at(vol: &Volume, tpl: &NccTemplate, cx: isize, cy: isize, cz: isize) -> f64 {
    let w = tpl.window;
    let half = (w / 2) as isize;
    let [nx, ny, nz] = vol.grid.dims;
    if cx - half < 0
        || cy - half < 0
        || cz - half < 0
        || cx + half >= nx as isize
        || cy + half >= ny as isize
        || cz + half >= nz as isize
    {
        return 0.0;
    }
    let n = (w * w * w) as f64;
    let mut sum_v = 0.0;
    let mut sum_vv = 0.0;
    let mut sum_vt = 0.0;
    let mut ti = 0usize;
    for dz in 0..w {
        let iz = (cz - half) as usize + dz;
        for dy in 0..w {
            let row = vol.grid.index((cx - half) as usize, (cy - half) as usize + dy, iz);
            for dx in 0..w {
                let v = vol.data[row + dx] as f64;
                sum_v += v;
                sum_vv += v * v;
                sum_vt += v * tpl.zero_mean[ti];
                ti += 1;
            }
        }
    }
    let den_v = sum_vv - sum_v * sum_v / n;
    if den_v <= 0.0 || tpl.power <= 0.0 {
        return 0.0;
    }
    sum_vt / (den_v * tpl.power).sqrt()
}

/// Catmull-Rom cubic interpolation of a cubic patch at fractional
/// coordinates (patch is `n`^3, x fastest; coordinates in patch units).
fn cubic_patch_sample(patch: &[f64], n: usize, x: f64, y: f64, z: f64) -> f64 {
    let weights = |t: f64| -> [f64; 4] {
        let t2 = t * t;
        let t3 = t2 * t;
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ]
    };
    let (x0, y0, z0) = (x.floor() as isize, y.floor() as isize, z.floor() as isize);
    let (wx, wy, wz) = (weights(x - x0 as f64), weights(y - y0 as f64), weights(z - z0 as f64));
    let mut acc = 0.0;
    for k in 0..4 {
        let iz = (z0 - 1 + k as isize).clamp(0, n as isize - 1) as usize;
        for j in 0..4 {
            let iy = (y0 - 1 + j as isize).clamp(0, n as isize - 1) as usize;
            for i in 0..4 {
                let ix = (x0 - 1 + i as isize).clamp(0, n as isize - 1) as usize;
                acc += wx[i] * wy[j] * wz[k] * patch[ix + n * (iy + n * iz)];
            }
        }
    }
    acc
}

/// Localise bubbles in one (denoised) contrast frame: NCC against the PSF,
/// peaks above the threshold, and subvoxel refinement by 5x cubic
/// upsampling of the 5^3 NCC neighbourhood around each peak.
pub fn localize(volume: &Volume, psf: &Volume, cfg: &UlmConfig) -> Vec<Localization> {
    let psf_half = psf.grid.dims[0] / 2;
    let margin = psf_half + 4;
    // low-prominence maxima are residual noise; the NCC gate would reject
    // them anyway, this just caps the per-frame work
    let prominence = 0.25 * volume.max_value();
    let candidates: Vec<(usize, usize, usize)> =
        local_maxima(volume, margin.min(volume.grid.dims[0] / 2))
            .into_iter()
            .filter(|&(x, y, z)| volume.at(x, y, z) >= prominence)
            .collect();
    let tpl = NccTemplate::new(psf);
    let mut out: Vec<Localization> = Vec::new();
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    for &(cx, cy, cz) in candidates.iter().take(64) {
        // NCC argmax within one voxel of the intensity peak
        let mut best = (0.0f64, 0isize, 0isize, 0isize);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let c = ncc_at(
                        volume,
                        &tpl,
                        cx as isize + dx,
                        cy as isize + dy,
                        cz as isize + dz,
                    );
                    if c > best.0 {
                        best = (c, dx, dy, dz);
                    }
                }
            }
        }
        if best.0 <= cfg.ncc_threshold {
            continue;
        }
        let (px, py, pz) = (
            (cx as isize + best.1) as usize,
            (cy as isize + best.2) as usize,
            (cz as isize + best.3) as usize,
        );
        if taken.contains(&(px, py, pz)) {
            continue;
        }
        taken.push((px, py, pz));
        // 7^3 NCC patch around the peak supports cubic interpolation over
        // the central 5^3 neighbourhood
        const PR: isize = 3;
        let pn = (2 * PR + 1) as usize;
        let mut patch = vec![0.0f64; pn * pn * pn];
        for dz in -PR..=PR {
            for dy in -PR..=PR {
                for dx in -PR..=PR {
                    patch[(dx + PR) as usize
                        + pn * ((dy + PR) as usize + pn * (dz + PR) as usize)] = ncc_at(
                        volume,
                        &tpl,
                        px as isize + dx,
                        py as isize + dy,
                        pz as isize + dz,
                    );
                }
            }
        }
        // upsample 5x over [-2, +2] voxels
        let mut best_up = (f64::MIN, 0.0f64, 0.0f64, 0.0f64);
        for uz in -10i32..=10 {
            for uy in -10i32..=10 {
                for ux in -10i32..=10 {
                    let fx = PR as f64 + ux as f64 / 5.0;
                    let fy = PR as f64 + uy as f64 / 5.0;
                    let fz = PR as f64 + uz as f64 / 5.0;
                    let v = cubic_patch_sample(&patch, pn, fx, fy, fz);
                    if v > best_up.0 {
                        best_up = (v, ux as f64 / 5.0, uy as f64 / 5.0, uz as f64 / 5.0);
                    }
                }
            }
        }
        let base = volume.grid.voxel_center(px, py, pz);
        let position = Vec3::new(
            base.x + best_up.1 * volume.grid.spacing.x,
            base.y + best_up.2 * volume.grid.spacing.y,
            base.z + best_up.3 * volume.grid.spacing.z,
        );
        out.push(Localization {
            position,
            ncc_peak: best_up.0.clamp(-1.0, 1.0).max(best.0),
            frame_id: volume.frame_id,
            timestamp: volume.timestamp,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Tracking
// ---------------------------------------------------------------------------

/// Classic O(n^3) assignment on a square cost matrix; returns the column
/// assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: f64 = 1e30;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

struct ActiveTrack {
    localizations: Vec<Localization>,
    velocity: Vec3,
    misses: usize,
}

/// Pair detections across frames: constant-velocity prediction per active
/// track, optimal one-to-one assignment with speed gating, new tracks from
/// unmatched detections, closure after `max_misses` missed frames.
pub fn track(frames: &[Vec<Localization>], cfg: &UlmConfig) -> Vec<Track> {
    const BIG: f64 = 1e9;
    let mut active: Vec<ActiveTrack> = Vec::new();
    let mut finished: Vec<(u64, Vec<Localization>)> = Vec::new();
    let mut next_id = 0u64;
    let mut order: Vec<u64> = Vec::new(); // creation ids of active tracks

    for dets in frames {
        // assignment over a square matrix padded with BIG
        let n = active.len().max(dets.len());
        let mut matched_det = vec![false; dets.len()];
        let mut matched_track = vec![false; active.len()];
        if n > 0 && !active.is_empty() && !dets.is_empty() {
            let mut cost = vec![vec![BIG; n]; n];
            for (ti, tr) in active.iter().enumerate() {
                let last = tr.localizations.last().unwrap();
                for (di, d) in dets.iter().enumerate() {
                    let dt = d.timestamp - last.timestamp;
                    if dt <= 0.0 {
                        continue;
                    }
                    let predicted = last.position + tr.velocity * dt;
                    let dist = (predicted - d.position).norm();
                    if dist <= cfg.gate_speed_mm_s * dt {
                        cost[ti][di] = dist;
                    }
                }
            }
            let assign = hungarian(&cost);
            for (ti, &di) in assign.iter().enumerate() {
                if ti < active.len() && di < dets.len() && cost[ti][di] < BIG / 2.0 {
                    let tr = &mut active[ti];
                    let last = *tr.localizations.last().unwrap();
                    let d = dets[di];
                    let dt = d.timestamp - last.timestamp;
                    tr.velocity = (d.position - last.position) / dt;
                    tr.localizations.push(d);
                    tr.misses = 0;
                    matched_det[di] = true;
                    matched_track[ti] = true;
                }
            }
        }
        // age out unmatched tracks; an empty frame is a miss for everyone
        for ti in (0..active.len()).rev() {
            if !matched_track[ti] {
                active[ti].misses += 1;
                if active[ti].misses > cfg.max_misses {
                    let tr = active.remove(ti);
                    finished.push((order.remove(ti), tr.localizations));
                }
            }
        }
        // unmatched detections seed new tracks
        for (di, d) in dets.iter().enumerate() {
            if !matched_det[di] {
                active.push(ActiveTrack {
                    localizations: vec![*d],
                    velocity: Vec3::ZERO,
                    misses: 0,
                });
                order.push(next_id);
                next_id += 1;
            }
        }
    }
    for (ti, tr) in active.into_iter().enumerate() {
        finished.push((order[ti], tr.localizations));
    }
    finished.sort_by_key(|(id, _)| *id);

    finished
        .into_iter()
        .map(|(id, locs)| {
            let velocities = link_velocities(&locs, cfg.velocity_span);
            Track { id, localizations: locs, link_velocities: velocities }
        })
        .collect()
}

/// Velocity of each link, estimated from positions up to `span` frames on
/// either side; a wider baseline averages out localisation jitter.
pub fn link_velocities(locs: &[Localization], span: usize) -> Vec<Vec3> {
    if locs.len() < 2 {
        return Vec::new();
    }
    let m = locs.len();
    (0..m - 1)
        .map(|i| {
            let lo = i.saturating_sub(span.saturating_sub(1));
            let hi = (i + span).min(m - 1);
            let dt = locs[hi].timestamp - locs[lo].timestamp;
            (locs[hi].position - locs[lo].position) / dt
        })
        .collect()
}

/// Drop tracks observed in fewer than `min_frames` frames.
pub fn persistence_filter(tracks: Vec<Track>, min_frames: usize) -> Vec<Track> {
    tracks.into_iter().filter(|t| t.len() >= min_frames).collect()
}

// ---------------------------------------------------------------------------
// Map accumulation and smoothing
// ---------------------------------------------------------------------------

/// Rasterize tracks onto the SR grid: the density counts each traversing
/// trajectory once per voxel; the speed map is the mean of the link speeds
/// of the traversing tracks.
pub fn accumulate_maps(tracks: &[Track], grid: Grid3) -> SrMaps {
    let step = grid.spacing.x.min(grid.spacing.y).min(grid.spacing.z) * 0.5;
    let mut density = vec![0.0f64; grid.n_voxels()];
    let mut speed_sum = vec![0.0f64; grid.n_voxels()];
    let mut speed_cnt = vec![0.0f64; grid.n_voxels()];
    for tr in tracks {
        // first-touch speed per voxel, one count per track
        let mut visited: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, pair) in tr.localizations.windows(2).enumerate() {
            let (a, b) = (pair[0].position, pair[1].position);
            let speed = tr.link_velocities[i].norm();
            let len = (b - a).norm();
            let n_steps = (len / step).ceil().max(1.0) as usize;
            for s in 0..=n_steps {
                let p = a + (b - a) * (s as f64 / n_steps as f64);
                if let Some((ix, iy, iz)) = grid.voxel_of(p) {
                    visited.entry(grid.index(ix, iy, iz)).or_insert(speed);
                }
            }
        }
        for (idx, sp) in visited {
            density[idx] += 1.0;
            speed_sum[idx] += sp;
            speed_cnt[idx] += 1.0;
        }
    }
    let mut dvol = Volume::zeros(grid);
    let mut svol = Volume::zeros(grid);
    for i in 0..grid.n_voxels() {
        dvol.data[i] = density[i] as f32;
        if speed_cnt[i] > 0.0 {
            svol.data[i] = (speed_sum[i] / speed_cnt[i]) as f32;
        }
    }
    SrMaps { density: dvol, speed: svol }
}

/// Separable normalized Gaussian blur (zero beyond the boundary, so interior
/// mass is preserved exactly).
fn gaussian_blur(vol: &Volume, sigma_mm: f64) -> Volume {
    let mut field: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let mut scratch = vec![0.0f64; field.len()];
    for axis in 0..3 {
        let spacing = match axis {
            0 => vol.grid.spacing.x,
            1 => vol.grid.spacing.y,
            _ => vol.grid.spacing.z,
        };
        let kernel = crate::util::gaussian_kernel(sigma_mm / spacing, 3.5);
        crate::util::convolve_axis(&field, &mut scratch, vol.grid.dims, axis, &kernel, false);
        std::mem::swap(&mut field, &mut scratch);
    }
    let mut out = vol.clone();
    for (o, v) in out.data.iter_mut().zip(field.iter()) {
        *o = *v as f32;
    }
    out
}

/// Smooth the maps for rendering: Gaussian on the density (unit-sum kernel,
/// mass preserving), spherical-mean on the speed restricted to voxels with
/// nonzero raw density.
pub fn smooth_maps(maps: &SrMaps, cfg: &UlmConfig) -> SrMaps {
    let sigma_mm = cfg.density_fwhm_um / 1000.0 / FWHM_TO_SIGMA;
    let density = gaussian_blur(&maps.density, sigma_mm);

    let grid = maps.speed.grid;
    let ball_radius_mm = cfg.speed_ball_um / 2000.0;
    let r_vox = [
        (ball_radius_mm / grid.spacing.x).floor() as isize,
        (ball_radius_mm / grid.spacing.y).floor() as isize,
        (ball_radius_mm / grid.spacing.z).floor() as isize,
    ];
    let mut offsets: Vec<(isize, isize, isize)> = Vec::new();
    for dz in -r_vox[2]..=r_vox[2] {
        for dy in -r_vox[1]..=r_vox[1] {
            for dx in -r_vox[0]..=r_vox[0] {
                let d2 = (dx as f64 * grid.spacing.x).powi(2)
                    + (dy as f64 * grid.spacing.y).powi(2)
                    + (dz as f64 * grid.spacing.z).powi(2);
                if d2.sqrt() <= ball_radius_mm {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let [nx, ny, nz] = grid.dims;
    let mut speed = Volume::zeros(grid);
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for &(dx, dy, dz) in &offsets {
                    let qx = ix as isize + dx;
                    let qy = iy as isize + dy;
                    let qz = iz as isize + dz;
                    if qx < 0
                        || qy < 0
                        || qz < 0
                        || qx >= nx as isize
                        || qy >= ny as isize
                        || qz >= nz as isize
                    {
                        continue;
                    }
                    let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                    if maps.density.at(qx, qy, qz) > 0.0 {
                        acc += maps.speed.at(qx, qy, qz) as f64;
                        cnt += 1.0;
                    }
                }
                if cnt > 0.0 {
                    *speed.at_mut(ix, iy, iz) = (acc / cnt) as f32;
                }
            }
        }
    }
    SrMaps { density, speed }
}

// ---------------------------------------------------------------------------
// Pipeline over an acquisition record
// ---------------------------------------------------------------------------

/// Outputs of the offline pipeline.
#[derive(Debug, Clone)]
pub struct UlmOutputs {
    /// Residual translation per frame, from the warm-started LM solver.
    pub residuals: Vec<RegResult>,
    pub psf: Volume,
    pub localizations_per_frame: Vec<Vec<Localization>>,
    /// Tracks surviving the persistence filter.
    pub tracks: Vec<Track>,
    pub tracks_before_filter: usize,
    pub maps: SrMaps,
    pub smoothed: SrMaps,
    /// Temporal mean of squared contrast on the reference grid: the
    /// diffraction-limited flow image.
    pub power: Volume,
    pub invalid_voxels: usize,
    pub config_hash: String,
}

/// Imaging field of view for validity marking, from the acquisition config.
fn fov_bounds(cfg: &ExperimentConfig) -> (Vec3, Vec3) {
    (
        Vec3::new(-10.0, -10.0, 0.0),
        Vec3::new(10.0, 10.0, cfg.acquisition.depth_mm),
    )
}

/// Re-synthesizes per-frame volumes from a record: the frame models behind
/// the offline pipeline, also used by the report generator.
pub struct FrameModels<'a> {
    record: &'a AcquisitionRecord,
    world: World,
    psf_spec: PsfSpec,
}

impl<'a> FrameModels<'a> {
    pub fn new(record: &'a AcquisitionRecord) -> Result<Self> {
        let world = World::build(&record.config.world_params())?;
        Ok(FrameModels { record, world, psf_spec: record.config.acquisition.psf })
    }

    fn frame(&self, k: usize) -> &FrameRecord {
        &self.record.frames[k]
    }

    /// Tissue + landmark + bubble scatterers of frame `k` in the probe frame.
    fn bmode_scatterers(&self, k: usize) -> Vec<Scatterer> {
        let f = self.frame(k);
        let pose = &f.pose;
        let mut out = Vec::with_capacity(
            self.world.speckle.len() + self.world.landmark_points.len() + f.bubbles.len(),
        );
        for &(p, a) in &self.world.speckle {
            out.push(Scatterer {
                position: pose.world_to_probe(p + f.stage_disp),
                amplitude: a,
                kind: ScattererKind::Tissue,
                velocity: Vec3::ZERO,
            });
        }
        for &(p, a) in &self.world.landmark_points {
            out.push(Scatterer {
                position: pose.world_to_probe(p + f.stage_disp),
                amplitude: a,
                kind: ScattererKind::Landmark,
                velocity: Vec3::ZERO,
            });
        }
        for b in &f.bubbles {
            out.push(Scatterer {
                position: b.position,
                amplitude: b.amplitude,
                kind: ScattererKind::Bubble,
                velocity: b.velocity,
            });
        }
        out
    }

    /// B-mode volume of frame `k` on `grid` (full-aperture transmit).
    pub fn bmode(&self, k: usize, grid: Grid3) -> Result<Volume> {
        let cfg = &self.record.config;
        let f = self.frame(k);
        let mut vol = match cfg.acquisition.fidelity {
            Fidelity::Fast => {
                let scatterers = self.bmode_scatterers(k);
                let mut rng = Rng::derive(cfg.seed, "bmode-noise", k as u64);
                synthesize_volume_fast(
                    &scatterers,
                    grid,
                    &self.psf_spec,
                    cfg.acquisition.snr_db,
                    Some(&mut rng),
                )
            }
            Fidelity::Channel => {
                let triplet = f.channel.as_ref().ok_or_else(|| {
                    Error::Format("channel-fidelity record lacks stored channel data".into())
                })?;
                das_beamform(&triplet.full, grid, &cfg.array)
            }
        };
        vol.frame_id = f.id;
        vol.timestamp = f.time;
        Ok(vol)
    }

    /// Contrast (bubble-only) volume of frame `k` on `grid`.
    pub fn ceus(&self, k: usize, grid: Grid3) -> Result<Volume> {
        let cfg = &self.record.config;
        let f = self.frame(k);
        let mut vol = match cfg.acquisition.fidelity {
            Fidelity::Fast => {
                let bubbles: Vec<Scatterer> = f
                    .bubbles
                    .iter()
                    .map(|b| Scatterer {
                        position: b.position,
                        amplitude: b.amplitude,
                        kind: ScattererKind::Bubble,
                        velocity: b.velocity,
                    })
                    .collect();
                let mut rng = Rng::derive(cfg.seed, "ceus-noise", k as u64);
                synthesize_volume_fast(
                    &bubbles,
                    grid,
                    &self.psf_spec,
                    cfg.acquisition.snr_db,
                    Some(&mut rng),
                )
            }
            Fidelity::Channel => {
                let triplet = f.channel.as_ref().ok_or_else(|| {
                    Error::Format("channel-fidelity record lacks stored channel data".into())
                })?;
                let residual = am_subtract(triplet)?;
                das_beamform(&residual, grid, &cfg.array)
            }
        };
        vol.frame_id = f.id;
        vol.timestamp = f.time;
        Ok(vol)
    }
}

/// Run the full offline pipeline on a record.
pub fn run_ulm(record: &AcquisitionRecord) -> Result<UlmOutputs> {
    let cfg = &record.config;
    let ucfg = &cfg.ulm;
    let models = FrameModels::new(record)?;
    let n = record.frames.len();
    if n == 0 {
        return Err(Error::DegenerateInput("record holds no frames".into()));
    }

    // 1. residual motion from B-mode volumes around the landmark
    let crop_center = Vec3::new(
        record.crop_grid.origin.x
            + record.crop_grid.spacing.x * (record.crop_grid.dims[0] - 1) as f64 / 2.0,
        record.crop_grid.origin.y
            + record.crop_grid.spacing.y * (record.crop_grid.dims[1] - 1) as f64 / 2.0,
        record.crop_grid.origin.z
            + record.crop_grid.spacing.z * (record.crop_grid.dims[2] - 1) as f64 / 2.0,
    );
    let reg_grid = Grid3::centered(
        crop_center,
        Vec3::new(ucfg.reg_extent_mm, ucfg.reg_extent_mm, ucfg.reg_extent_mm),
        ucfg.bmode_spacing_mm,
    );
    let residuals = correct_residual_motion(|k| models.bmode(k, reg_grid), n)?;

    // 2. Lagrangian contrast frames on the reference CEUS grid
    let ceus_center = record.start_pose.world_to_probe(cfg.scene.channel_center);
    let ceus_grid = Grid3::centered(ceus_center, ucfg.ceus_extent, ucfg.bmode_spacing_mm);
    let (fov_min, fov_max) = fov_bounds(cfg);
    let make_lagrangian = |k: usize| -> Result<LagrangianFrame> {
        Ok(lagrangian_frame(
            |g| models.ceus(k, g).expect("contrast synthesis"),
            residuals[k].t,
            ceus_grid,
            fov_min,
            fov_max,
        ))
    };

    // 3. PSF from the first frames providing isolated instances
    let mut psf_est = PsfEstimator::new(ucfg, ceus_grid.spacing);
    for k in 0..n {
        if psf_est.is_complete() {
            break;
        }
        let lf = make_lagrangian(k)?;
        let den = denoise(&lf.volume, ucfg);
        psf_est.offer(&den, &lf.volume);
    }
    let psf = psf_est.finish()?;

    // 4. per-frame localisation (frames are independent; fixed chunks keep
    // the merge order deterministic)
    struct Partial {
        locs: Vec<Vec<Localization>>,
        power: Vec<f64>,
        invalid: usize,
    }
    let chunk = 64usize;
    let ranges: Vec<(usize, usize)> =
        (0..n.div_ceil(chunk)).map(|c| (c * chunk, ((c + 1) * chunk).min(n))).collect();
    let partials: Vec<Result<Partial>> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            let mut locs = Vec::with_capacity(hi - lo);
            let mut power = vec![0.0f64; ceus_grid.n_voxels()];
            let mut invalid = 0usize;
            for k in lo..hi {
                let lf = make_lagrangian(k)?;
                invalid += lf.invalid_voxels;
                for (i, v) in lf.volume.data.iter().enumerate() {
                    power[i] += (*v as f64) * (*v as f64);
                }
                let den = denoise(&lf.volume, ucfg);
                locs.push(localize(&den, &psf, ucfg));
            }
            Ok(Partial { locs, power, invalid })
        })
        .collect();
    let mut locs_per_frame: Vec<Vec<Localization>> = Vec::with_capacity(n);
    let mut power_acc = vec![0.0f64; ceus_grid.n_voxels()];
    let mut invalid_voxels = 0usize;
    for p in partials {
        let p = p?;
        locs_per_frame.extend(p.locs);
        for (i, v) in p.power.iter().enumerate() {
            power_acc[i] += v;
        }
        invalid_voxels += p.invalid;
    }
    let mut power = Volume::zeros(ceus_grid);
    for (i, v) in power_acc.iter().enumerate() {
        power.data[i] = (v / n as f64) as f32;
    }

    // 5. tracking and persistence
    let all_tracks = track(&locs_per_frame, ucfg);
    let tracks_before_filter = all_tracks.len();
    let tracks = persistence_filter(all_tracks, ucfg.min_track_frames);

    // 6. SR maps on a grid derived from the localisation bounding box
    let sr_grid = sr_grid_for(&tracks, ucfg.sr_spacing_mm)?;
    let maps = accumulate_maps(&tracks, sr_grid);
    let smoothed = smooth_maps(&maps, ucfg);

    Ok(UlmOutputs {
        residuals,
        psf,
        localizations_per_frame: locs_per_frame,
        tracks,
        tracks_before_filter,
        maps,
        smoothed,
        power,
        invalid_voxels,
        config_hash: record.config_hash.clone(),
    })
}

/// SR grid covering all track localizations plus a margin that keeps the
/// smoothing kernels away from the volume boundary (mass conservation).
pub fn sr_grid_for(tracks: &[Track], spacing: f64) -> Result<Grid3> {
    let mut min = Vec3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut max = Vec3::new(f64::MIN, f64::MIN, f64::MIN);
    let mut any = false;
    for t in tracks {
        for l in &t.localizations {
            any = true;
            min.x = min.x.min(l.position.x);
            min.y = min.y.min(l.position.y);
            min.z = min.z.min(l.position.z);
            max.x = max.x.max(l.position.x);
            max.y = max.y.max(l.position.y);
            max.z = max.z.max(l.position.z);
        }
    }
    if !any {
        return Err(Error::DegenerateInput("no localizations to map".into()));
    }
    let pad = 0.2;
    let dims = [
        ((max.x - min.x + 2.0 * pad) / spacing).ceil() as usize + 1,
        ((max.y - min.y + 2.0 * pad) / spacing).ceil() as usize + 1,
        ((max.z - min.z + 2.0 * pad) / spacing).ceil() as usize + 1,
    ];
    Ok(Grid3::new(
        min - Vec3::new(pad, pad, pad),
        Vec3::new(spacing, spacing, spacing),
        dims,
    ))
}
