//! 3-DoF translation estimation between volumes.
//!
//! Two solvers share one overlap-normalized SSD cost: a coarse-to-fine
//! regular-step gradient descent for the online loop, and Levenberg-
//! Marquardt for offline residual-motion correction. The moving volume is
//! sampled by trilinear interpolation; the cost gradient uses the exact
//! derivative of the interpolant, so it matches finite differences away
//! from cell boundaries.
//!
//! Sign convention: `register(reference, moving)` returns the translation
//! `t` minimizing `sum_v (reference(v) - moving(v + t))^2`. When the scene
//! content of `moving` is displaced by `d` relative to `reference`, the
//! recovered `t` equals `d`.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::util::par_chunk_reduce;
use crate::volume::{Grid3, Volume};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Translation in millimetres.
pub type Translation3 = Vec3;

/// Result of one registration run.
#[derive(Debug, Clone)]
pub struct RegResult {
    pub t: Translation3,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// (pyramid level, iteration, cost, translation) per evaluated step.
    pub trace: Vec<(usize, usize, f64, Translation3)>,
}

impl RegResult {
    /// Render the convergence trace as CSV.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("level,iteration,cost,tx_mm,ty_mm,tz_mm\n");
        for (level, iter, cost, t) in &self.trace {
            s.push_str(&format!(
                "{level},{iter},{cost:.9},{:.6},{:.6},{:.6}\n",
                t.x, t.y, t.z
            ));
        }
        s
    }
}

/// Evaluation of the SSD cost at one translation.
#[derive(Debug, Clone, Copy)]
pub struct CostEval {
    /// Mean squared intensity difference over valid voxels.
    pub cost: f64,
    /// Gradient of the cost with respect to the translation (per mm).
    pub gradient: Vec3,
    /// Fraction of reference voxels with valid (in-support) samples.
    pub valid_fraction: f64,
}

// ---------------------------------------------------------------------------
// SSD cost
// ---------------------------------------------------------------------------

/// Overlap-normalized sum-of-squared-differences cost and its analytic
/// gradient with respect to `t`. Errors when the shifted volumes share no
/// support at all; overlaps below half the reference are reported through
/// `valid_fraction` for the caller to judge.
pub fn ssd_cost(reference: &Volume, moving: &Volume, t: Translation3) -> Result<CostEval> {
    let n = reference.grid.n_voxels();
    let acc = par_chunk_reduce(
        n,
        [0.0f64; 5],
        |range| {
            let mut a = [0.0f64; 5];
            for idx in range {
                let (ix, iy, iz) = reference.grid.unravel(idx);
                let p = reference.grid.voxel_center(ix, iy, iz) + t;
                if let Some((m, g)) = moving.sample_with_grad(p) {
                    let d = reference.data[idx] as f64 - m;
                    a[0] += d * d;
                    a[1] -= 2.0 * d * g.x;
                    a[2] -= 2.0 * d * g.y;
                    a[3] -= 2.0 * d * g.z;
                    a[4] += 1.0;
                }
            }
            a
        },
        |mut x, y| {
            for i in 0..5 {
                x[i] += y[i];
            }
            x
        },
    );
    let count = acc[4];
    if count == 0.0 {
        return Err(Error::NoOverlap);
    }
    Ok(CostEval {
        cost: acc[0] / count,
        gradient: Vec3::new(acc[1] / count, acc[2] / count, acc[3] / count),
        valid_fraction: count / n as f64,
    })
}

// ---------------------------------------------------------------------------
// Pyramid
// ---------------------------------------------------------------------------

/// Light separable Gaussian low-pass applied to both volumes before
/// registration. Interpolating raw voxel noise suppresses its variance,
/// which biases the SSD minimum toward half-voxel shifts; smoothing both
/// inputs identically removes that asymmetry without moving the optimum.
pub(crate) fn pre_smooth(vol: &Volume) -> Volume {
    let kernel = crate::util::gaussian_kernel(0.7, 3.0);
    let mut field: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
    let mut scratch = vec![0.0f64; field.len()];
    for axis in 0..3 {
        crate::util::convolve_axis(&field, &mut scratch, vol.grid.dims, axis, &kernel, true);
        std::mem::swap(&mut field, &mut scratch);
    }
    let mut out = vol.clone();
    for (o, v) in out.data.iter_mut().zip(field.iter()) {
        *o = *v as f32;
    }
    out
}

/// One level of 2x downsampling by mean pooling. Spacing doubles; the origin
/// moves to the centre of each pooled block.
pub fn downsample_mean(vol: &Volume) -> Volume {
    let [nx, ny, nz] = vol.grid.dims;
    let dims = [(nx / 2).max(1), (ny / 2).max(1), (nz / 2).max(1)];
    let spacing = vol.grid.spacing * 2.0;
    let origin = vol.grid.origin + vol.grid.spacing * 0.5;
    let grid = Grid3::new(origin, spacing, dims);
    let mut out = Volume::zeros(grid);
    out.frame_id = vol.frame_id;
    out.timestamp = vol.timestamp;
    for iz in 0..dims[2] {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                let mut sum = 0.0f64;
                let mut cnt = 0.0f64;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (sx, sy, sz) = (2 * ix + dx, 2 * iy + dy, 2 * iz + dz);
                            if sx < nx && sy < ny && sz < nz {
                                sum += vol.at(sx, sy, sz) as f64;
                                cnt += 1.0;
                            }
                        }
                    }
                }
                *out.at_mut(ix, iy, iz) = (sum / cnt) as f32;
            }
        }
    }
    out
}

fn build_pyramid(vol: &Volume, levels: usize) -> Vec<Volume> {
    let mut pyr = vec![vol.clone()];
    for _ in 1..levels {
        let prev = pyr.last().unwrap();
        if prev.grid.dims.iter().any(|&d| d < 8) {
            break;
        }
        pyr.push(downsample_mean(prev));
    }
    pyr
}

// ---------------------------------------------------------------------------
// Regular-step gradient descent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GdOptions {
    pub levels: usize,
    /// Initial step length at the finest level (mm); coarser levels double it.
    pub initial_step: f64,
    /// Step length at which a level is considered converged (mm).
    pub min_step: f64,
    /// Step shrink factor on gradient direction reversal.
    pub relaxation: f64,
    pub max_iters_per_level: usize,
    /// Search bound on the translation magnitude (mm).
    pub bound: f64,
}

impl Default for GdOptions {
    fn default() -> Self {
        GdOptions {
            levels: 3,
            initial_step: 0.5,
            // a gentle shrink and a fine floor let the normalized-gradient
            // walk traverse anisotropic valleys instead of stalling early
            min_step: 0.002,
            relaxation: 0.65,
            max_iters_per_level: 150,
            bound: 10.0,
        }
    }
}

/// Coarse-to-fine regular-step gradient descent over a mean-pooling pyramid.
/// Steps follow the negative normalized gradient; the step length halves on
/// a gradient direction reversal and on any trial that raises the cost or
/// drops the overlap below half the reference, so descent is monotone. A
/// level stops at the minimum step or the iteration cap. Non-convergence
/// returns the best translation seen with `converged = false`.
pub fn register_gd(reference: &Volume, moving: &Volume, opts: &GdOptions) -> Result<RegResult> {
    if (reference.grid.spacing.x - moving.grid.spacing.x).abs() > 1e-12
        || (reference.grid.spacing.y - moving.grid.spacing.y).abs() > 1e-12
        || (reference.grid.spacing.z - moving.grid.spacing.z).abs() > 1e-12
    {
        return Err(Error::ShapeMismatch("volumes must share a spacing".into()));
    }
    let ref_pyr = build_pyramid(&pre_smooth(reference), opts.levels);
    let mov_pyr = build_pyramid(&pre_smooth(moving), opts.levels);
    let levels = ref_pyr.len().min(mov_pyr.len());

    let mut t = Vec3::ZERO;
    let mut trace = Vec::new();
    let mut total_iters = 0usize;
    let mut converged_finest = false;
    let mut final_cost = f64::MAX;

    for level in (0..levels).rev() {
        let r = &ref_pyr[level];
        let m = &mov_pyr[level];
        let mut step = opts.initial_step * (1 << level) as f64;
        let mut eval = ssd_cost(r, m, t)?;
        let mut prev_grad = eval.gradient;
        let mut iters = 0usize;
        trace.push((level, iters, eval.cost, t));
        while step >= opts.min_step && iters < opts.max_iters_per_level {
            let gnorm = eval.gradient.norm();
            if gnorm < 1e-30 {
                break;
            }
            let mut candidate = t - eval.gradient * (step / gnorm);
            if candidate.norm() > opts.bound {
                candidate = candidate.normalized() * opts.bound;
            }
            iters += 1;
            total_iters += 1;
            let next = match ssd_cost(r, m, candidate) {
                Ok(e) if e.valid_fraction >= 0.5 => e,
                Ok(_) | Err(Error::NoOverlap) => {
                    // stepping out of the usable overlap: shrink and retry
                    step *= opts.relaxation;
                    continue;
                }
                Err(e) => return Err(e),
            };
            // plateau tie-break: keep the smallest-magnitude translation
            let improves = next.cost < eval.cost
                || (next.cost == eval.cost && candidate.norm() < t.norm());
            if !improves {
                step *= opts.relaxation;
                continue;
            }
            t = candidate;
            trace.push((level, iters, next.cost, t));
            if next.gradient.dot(prev_grad) < 0.0 {
                step *= opts.relaxation;
            }
            prev_grad = next.gradient;
            eval = next;
        }
        final_cost = eval.cost;
        if level == 0 {
            converged_finest = step < opts.min_step;
        }
    }

    Ok(RegResult {
        t,
        final_cost,
        iterations: total_iters,
        converged: converged_finest,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub init: Translation3,
    pub initial_damping: f64,
    /// Step-size stopping tolerance (mm).
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { init: Vec3::ZERO, initial_damping: 1e-3, tol: 1e-3, max_iters: 50 }
    }
}

/// Normal-equation accumulators for the residual vector r_v = ref(v) - mov(v+t).
fn lm_accumulate(
    reference: &Volume,
    moving: &Volume,
    t: Vec3,
) -> Result<([f64; 6], [f64; 3], f64, f64)> {
    let rg = &reference.grid;
    let mg = &moving.grid;
    let same_spacing = (rg.spacing.x - mg.spacing.x).abs() < 1e-12
        && (rg.spacing.y - mg.spacing.y).abs() < 1e-12
        && (rg.spacing.z - mg.spacing.z).abs() < 1e-12;
    let acc = if same_spacing {
        lm_accumulate_stencil(reference, moving, t)
    } else {
        lm_accumulate_generic(reference, moving, t)
    };
    if acc[10] == 0.0 {
        return Err(Error::NoOverlap);
    }
    let count = acc[10];
    Ok((
        [acc[0], acc[1], acc[2], acc[3], acc[4], acc[5]].map(|v| v / count),
        [acc[6] / count, acc[7] / count, acc[8] / count],
        acc[9] / count,
        count,
    ))
}

fn lm_accumulate_generic(reference: &Volume, moving: &Volume, t: Vec3) -> [f64; 11] {
    let n = reference.grid.n_voxels();
    par_chunk_reduce(
        n,
        [0.0f64; 11],
        |range| {
            let mut a = [0.0f64; 11];
            for idx in range {
                let (ix, iy, iz) = reference.grid.unravel(idx);
                let p = reference.grid.voxel_center(ix, iy, iz) + t;
                if let Some((m, g)) = moving.sample_with_grad(p) {
                    let d = reference.data[idx] as f64 - m;
                    lm_push(&mut a, g, d);
                }
            }
            a
        },
        merge11,
    )
}

#[inline]
fn lm_push(a: &mut [f64; 11], g: Vec3, d: f64) {
    // J row for this voxel is -g; JtJ accumulates g g^T and -J^T r = g d
    a[0] += g.x * g.x;
    a[1] += g.x * g.y;
    a[2] += g.x * g.z;
    a[3] += g.y * g.y;
    a[4] += g.y * g.z;
    a[5] += g.z * g.z;
    a[6] += g.x * d;
    a[7] += g.y * d;
    a[8] += g.z * d;
    a[9] += d * d;
    a[10] += 1.0;
}

fn merge11(mut x: [f64; 11], y: [f64; 11]) -> [f64; 11] {
    for i in 0..11 {
        x[i] += y[i];
    }
    x
}

/// Same-spacing fast path: the fractional sampling offset is constant over
/// the volume, so trilinear interpolation collapses to a sliding 8-point
/// stencil with fixed weights, and the in-support region is a box of ref
/// indices. Voxels whose sample would need the one-past-the-end neighbour
/// plane are excluded (a single boundary plane at integer offsets).
fn lm_accumulate_stencil(reference: &Volume, moving: &Volume, t: Vec3) -> [f64; 11] {
    let rg = reference.grid;
    let mg = moving.grid;
    let off = Vec3::new(
        (rg.origin.x + t.x - mg.origin.x) / mg.spacing.x,
        (rg.origin.y + t.y - mg.origin.y) / mg.spacing.y,
        (rg.origin.z + t.z - mg.origin.z) / mg.spacing.z,
    );
    let base = [off.x.floor() as i64, off.y.floor() as i64, off.z.floor() as i64];
    let frac = [off.x - off.x.floor(), off.y - off.y.floor(), off.z - off.z.floor()];
    // ref index ranges keeping mov index (i + base) within [0, n-2]
    let range = |axis: usize| -> (usize, usize) {
        let n_ref = rg.dims[axis] as i64;
        let n_mov = mg.dims[axis] as i64;
        let lo = (-base[axis]).max(0);
        let hi = (n_mov - 2 - base[axis]).min(n_ref - 1);
        if hi < lo {
            (1, 0)
        } else {
            (lo as usize, hi as usize)
        }
    };
    let (x_lo, x_hi) = range(0);
    let (y_lo, y_hi) = range(1);
    let (z_lo, z_hi) = range(2);
    if x_hi < x_lo || y_hi < y_lo || z_hi < z_lo {
        return [0.0; 11];
    }
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let wx = [1.0 - fx, fx];
    let wy = [1.0 - fy, fy];
    let wz = [1.0 - fz, fz];
    // value and per-axis derivative stencils over the 2x2x2 neighbourhood
    let mut w_val = [0.0f64; 8];
    let mut w_dx = [0.0f64; 8];
    let mut w_dy = [0.0f64; 8];
    let mut w_dz = [0.0f64; 8];
    for k in 0..2 {
        for j in 0..2 {
            for i in 0..2 {
                let n = i + 2 * j + 4 * k;
                let sx = if i == 0 { -1.0 } else { 1.0 };
                let sy = if j == 0 { -1.0 } else { 1.0 };
                let sz = if k == 0 { -1.0 } else { 1.0 };
                w_val[n] = wx[i] * wy[j] * wz[k];
                w_dx[n] = sx * wy[j] * wz[k] / mg.spacing.x;
                w_dy[n] = wx[i] * sy * wz[k] / mg.spacing.y;
                w_dz[n] = wx[i] * wy[j] * sz / mg.spacing.z;
            }
        }
    }
    let (nxr, nyr) = (rg.dims[0], rg.dims[1]);
    let (nxm, nym) = (mg.dims[0], mg.dims[1]);
    let rdata = &reference.data;
    let mdata = &moving.data;
    let n_slabs = z_hi - z_lo + 1;
    crate::util::par_chunk_reduce_sized(
        n_slabs,
        8,
        [0.0f64; 11],
        |slab_range| {
            let mut a = [0.0f64; 11];
            for sz in slab_range {
                let iz = z_lo + sz;
                let mz = (iz as i64 + base[2]) as usize;
                for iy in y_lo..=y_hi {
                    let my = (iy as i64 + base[1]) as usize;
                    let rrow = nxr * (iy + nyr * iz);
                    let mrow = nxm * (my + nym * mz);
                    let mrow1 = nxm * (my + 1 + nym * mz);
                    let mrow2 = nxm * (my + nym * (mz + 1));
                    let mrow3 = nxm * (my + 1 + nym * (mz + 1));
                    let mx0 = (x_lo as i64 + base[0]) as usize;
                    let mut m000 = mrow + mx0;
                    let mut m010 = mrow1 + mx0;
                    let mut m001 = mrow2 + mx0;
                    let mut m011 = mrow3 + mx0;
                    for ix in x_lo..=x_hi {
                        let v = [
                            mdata[m000] as f64,
                            mdata[m000 + 1] as f64,
                            mdata[m010] as f64,
                            mdata[m010 + 1] as f64,
                            mdata[m001] as f64,
                            mdata[m001 + 1] as f64,
                            mdata[m011] as f64,
                            mdata[m011 + 1] as f64,
                        ];
                        let mut val = 0.0;
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        let mut gz = 0.0;
                        for n in 0..8 {
                            val += w_val[n] * v[n];
                            gx += w_dx[n] * v[n];
                            gy += w_dy[n] * v[n];
                            gz += w_dz[n] * v[n];
                        }
                        let d = rdata[rrow + ix] as f64 - val;
                        lm_push(&mut a, Vec3::new(gx, gy, gz), d);
                        m000 += 1;
                        m010 += 1;
                        m001 += 1;
                        m011 += 1;
                    }
                }
            }
            a
        },
        merge11,
    )
}

fn solve3(jtj: [f64; 6], rhs: [f64; 3], damping: f64) -> Option<Vec3> {
    // symmetric 3x3 with Marquardt scaling on the diagonal
    let a = [
        [jtj[0] * (1.0 + damping), jtj[1], jtj[2]],
        [jtj[1], jtj[3] * (1.0 + damping), jtj[4]],
        [jtj[2], jtj[4], jtj[5] * (1.0 + damping)],
    ];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let scale = jtj[0].abs() + jtj[3].abs() + jtj[5].abs();
    if det.abs() < 1e-18 * scale.powi(3).max(1e-300) {
        return None;
    }
    let inv = |r: usize, c: usize| -> f64 {
        let m = |i: usize, j: usize| a[i][j];
        let cof = match (r, c) {
            (0, 0) => m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1),
            (0, 1) => -(m(0, 1) * m(2, 2) - m(0, 2) * m(2, 1)),
            (0, 2) => m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1),
            (1, 0) => -(m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)),
            (1, 1) => m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0),
            (1, 2) => -(m(0, 0) * m(1, 2) - m(0, 2) * m(1, 0)),
            (2, 0) => m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0),
            (2, 1) => -(m(0, 0) * m(2, 1) - m(0, 1) * m(2, 0)),
            _ => m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
        };
        cof / det
    };
    Some(Vec3::new(
        inv(0, 0) * rhs[0] + inv(0, 1) * rhs[1] + inv(0, 2) * rhs[2],
        inv(1, 0) * rhs[0] + inv(1, 1) * rhs[1] + inv(1, 2) * rhs[2],
        inv(2, 0) * rhs[0] + inv(2, 1) * rhs[1] + inv(2, 2) * rhs[2],
    ))
}

/// Levenberg-Marquardt on the voxelwise intensity residuals. Damping
/// multiplies by ten on a cost increase and divides by ten on a decrease;
/// iteration stops when the accepted step drops below `tol` or at
/// `max_iters`. A flat (constant) volume has no gradient anywhere and is
/// reported as degenerate input.
pub fn register_lm(reference: &Volume, moving: &Volume, opts: &LmOptions) -> Result<RegResult> {
    register_lm_smoothed(&pre_smooth(reference), &pre_smooth(moving), opts)
}

/// Levenberg-Marquardt core on already low-passed inputs; callers that
/// register many frames against one reference smooth it once.
pub(crate) fn register_lm_smoothed(
    reference: &Volume,
    moving: &Volume,
    opts: &LmOptions,
) -> Result<RegResult> {
    let mut t = opts.init;
    let mut lambda = opts.initial_damping;
    let (mut jtj, mut rhs, mut cost, _) = lm_accumulate(reference, moving, t)?;
    let grad_scale = jtj[0] + jtj[3] + jtj[5];
    let intensity_scale = reference.data.iter().map(|&v| (v as f64).abs()).fold(0.0, f64::max);
    if grad_scale <= 1e-20 * intensity_scale.max(1e-300) {
        return Err(Error::DegenerateInput(
            "volume has no intensity gradient; translation is unobservable".into(),
        ));
    }
    let mut trace = vec![(0usize, 0usize, cost, t)];
    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < opts.max_iters {
        let Some(delta) = solve3(jtj, rhs, lambda) else {
            return Err(Error::DegenerateInput("singular normal equations".into()));
        };
        if delta.norm() < opts.tol {
            converged = true;
            break;
        }
        let candidate = t + delta;
        let (njtj, nrhs, ncost, _) = lm_accumulate(reference, moving, candidate)?;
        iterations += 1;
        if ncost < cost {
            t = candidate;
            jtj = njtj;
            rhs = nrhs;
            cost = ncost;
            lambda = (lambda / 10.0).max(1e-12);
            trace.push((0, iterations, cost, t));
            if delta.norm() < opts.tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    Ok(RegResult { t, final_cost: cost, iterations, converged, trace })
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Trilinear resample of `volume` at `v + t`; reads outside the support are
/// zero. An integer-voxel translation reduces to an exact index shift.
pub fn resample_translate(volume: &Volume, t: Translation3) -> Volume {
    assert!(t.is_finite(), "translation must be finite");
    let mut out = Volume::zeros(volume.grid);
    out.frame_id = volume.frame_id;
    out.timestamp = volume.timestamp;
    let [nx, ny, nz] = volume.grid.dims;
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = volume.grid.voxel_center(ix, iy, iz) + t;
                *out.at_mut(ix, iy, iz) = volume.sample(p) as f32;
            }
        }
    }
    out
}
