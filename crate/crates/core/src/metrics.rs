//! Quantitative evaluation: landmark centroiding, residual displacement
//! statistics, regression versus stage speed, and Fourier shell correlation
//! resolution with the half-bit threshold.

use crate::error::{Error, Result};
use crate::fft::{fft3_inplace, C64};
use crate::geom::Vec3;
use crate::scene::LegInterval;
use crate::ulm::{accumulate_maps, SrMaps, Track};
use crate::util::next_pow2;
use crate::volume::{Grid3, Volume};

// ---------------------------------------------------------------------------
// Centroiding
// ---------------------------------------------------------------------------

/// Intensity-weighted centroid over a cubic window centred on the global
/// maximum. `window` is the odd edge length in voxels.
pub fn weighted_centroid(volume: &Volume, window: usize) -> Vec3 {
    let (cx, cy, cz) = volume.argmax();
    let half = (window / 2) as isize;
    let [nx, ny, nz] = volume.grid.dims;
    let mut sum_i = 0.0f64;
    let mut sum_p = Vec3::ZERO;
    for dz in -half..=half {
        for dy in -half..=half {
            for dx in -half..=half {
                let ix = cx as isize + dx;
                let iy = cy as isize + dy;
                let iz = cz as isize + dz;
                if ix < 0
                    || iy < 0
                    || iz < 0
                    || ix >= nx as isize
                    || iy >= ny as isize
                    || iz >= nz as isize
                {
                    continue;
                }
                let v = volume.at(ix as usize, iy as usize, iz as usize) as f64;
                if v <= 0.0 {
                    continue;
                }
                sum_i += v;
                sum_p += volume.grid.voxel_center(ix as usize, iy as usize, iz as usize) * v;
            }
        }
    }
    if sum_i > 0.0 {
        sum_p / sum_i
    } else {
        volume.grid.voxel_center(cx, cy, cz)
    }
}

// ---------------------------------------------------------------------------
// Residual series
// ---------------------------------------------------------------------------

/// Per-frame landmark displacement relative to frame 0, lateral and
/// elevational components (mm).
#[derive(Debug, Clone, Copy)]
pub struct ResidualSample {
    pub time: f64,
    pub dx: f64,
    pub dy: f64,
}

impl ResidualSample {
    /// Planar displacement magnitude.
    pub fn magnitude(&self) -> f64 {
        (self.dx * self.dx + self.dy * self.dy).sqrt()
    }
}

/// Residual displacement series with motion-onset detection.
#[derive(Debug, Clone)]
pub struct ResidualSeries {
    pub samples: Vec<ResidualSample>,
    /// First frame whose displacement exceeds the onset threshold.
    pub onset_frame: Option<usize>,
}

impl ResidualSeries {
    pub fn new(samples: Vec<ResidualSample>, onset_mm: f64) -> Self {
        let onset_frame = samples.iter().position(|s| s.magnitude() > onset_mm);
        ResidualSeries { samples, onset_frame }
    }
}

/// Mean and standard deviation of residual displacement for one speed level.
#[derive(Debug, Clone, Copy)]
pub struct SpeedStats {
    pub speed: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Residual statistics per stage speed level: only frames acquired while
/// the stage was actually moving contribute, grouped by the leg's cruise
/// speed and pooled over the legs sharing a speed.
pub fn residual_statistics(series: &ResidualSeries, legs: &[LegInterval]) -> Vec<SpeedStats> {
    let mut speeds: Vec<f64> = legs.iter().map(|l| l.speed).collect();
    speeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    speeds.dedup();
    let mut out = Vec::new();
    for speed in speeds {
        let mut values = Vec::new();
        for s in &series.samples {
            let moving_at_speed = legs
                .iter()
                .any(|l| l.speed == speed && s.time >= l.t_start && s.time < l.t_end);
            if moving_at_speed {
                values.push(s.magnitude());
            }
        }
        if values.is_empty() {
            continue;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        out.push(SpeedStats { speed, mean, std: var.sqrt(), n });
    }
    out
}

// ---------------------------------------------------------------------------
// Linear regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of y on x. Errors on fewer than two points or a
/// degenerate abscissa.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Underdetermined);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Underdetermined);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit { slope, intercept, r2 })
}

// ---------------------------------------------------------------------------
// Fourier shell correlation
// ---------------------------------------------------------------------------

/// Shell-by-shell correlation between two volumes plus the half-bit
/// threshold curve and the resolution at the first downward crossing.
#[derive(Debug, Clone)]
pub struct FscResult {
    /// FSC per spatial-frequency shell (shell 0 is DC).
    pub correlations: Vec<f64>,
    /// Half-bit threshold per shell.
    pub thresholds: Vec<f64>,
    /// Voxels per shell.
    pub shell_counts: Vec<usize>,
    /// Padded cube edge (voxels) and voxel spacing (mm).
    pub cube: usize,
    pub spacing: f64,
    /// Resolution in micrometres at the first crossing; when the curve never
    /// drops below the threshold this is the Nyquist limit (2 x spacing) and
    /// `crossed` is false.
    pub resolution_um: f64,
    pub crossed: bool,
}

impl FscResult {
    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!(
            "# config_hash={config_hash}\nshell,frequency_per_mm,fsc,half_bit_threshold,voxels\n"
        );
        for k in 0..self.correlations.len() {
            let freq = k as f64 / (self.cube as f64 * self.spacing);
            s.push_str(&format!(
                "{k},{freq:.6},{:.6},{:.6},{}\n",
                self.correlations[k], self.thresholds[k], self.shell_counts[k]
            ));
        }
        s
    }
}

/// Half-bit threshold for a shell of `n` independent voxels.
fn half_bit_threshold(n: f64) -> f64 {
    (0.2071 + 1.9102 / n.sqrt()) / (1.2071 + 0.9102 / n.sqrt())
}

/// Fourier shell correlation between two volumes on identical isotropic
/// grids. Volumes are zero-padded to a power-of-two cube; shells are one
/// DFT bin wide.
pub fn fsc(a: &Volume, b: &Volume) -> Result<FscResult> {
    if a.grid.dims != b.grid.dims || a.grid.spacing != b.grid.spacing {
        return Err(Error::ShapeMismatch("FSC inputs must share a grid".into()));
    }
    let sp = a.grid.spacing;
    if (sp.x - sp.y).abs() > 1e-12 || (sp.x - sp.z).abs() > 1e-12 {
        return Err(Error::ShapeMismatch("FSC requires isotropic spacing".into()));
    }
    if a.data.iter().all(|&v| v == 0.0) || b.data.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyVolume);
    }

    let n = next_pow2(a.grid.dims.iter().copied().max().unwrap());
    let mut fa = vec![C64::default(); n * n * n];
    let mut fb = vec![C64::default(); n * n * n];
    let [dx, dy, dz] = a.grid.dims;
    for iz in 0..dz {
        for iy in 0..dy {
            for ix in 0..dx {
                let src = a.grid.index(ix, iy, iz);
                let dst = ix + n * (iy + n * iz);
                fa[dst] = C64::new(a.data[src] as f64, 0.0);
                fb[dst] = C64::new(b.data[src] as f64, 0.0);
            }
        }
    }
    fft3_inplace(&mut fa, n);
    fft3_inplace(&mut fb, n);

    let n_shells = n / 2 + 1;
    let mut cross = vec![0.0f64; n_shells];
    let mut pow_a = vec![0.0f64; n_shells];
    let mut pow_b = vec![0.0f64; n_shells];
    let mut counts = vec![0usize; n_shells];
    let signed = |k: usize| -> f64 {
        if k > n / 2 {
            k as f64 - n as f64
        } else {
            k as f64
        }
    };
    for kz in 0..n {
        let fz = signed(kz);
        for ky in 0..n {
            let fy = signed(ky);
            for kx in 0..n {
                let fx = signed(kx);
                let shell = (fx * fx + fy * fy + fz * fz).sqrt().round() as usize;
                if shell >= n_shells {
                    continue;
                }
                let va = fa[kx + n * (ky + n * kz)];
                let vb = fb[kx + n * (ky + n * kz)];
                cross[shell] += va.re * vb.re + va.im * vb.im; // Re(a conj b)
                pow_a[shell] += va.abs2();
                pow_b[shell] += vb.abs2();
                counts[shell] += 1;
            }
        }
    }

    let mut correlations = vec![0.0f64; n_shells];
    let mut thresholds = vec![0.0f64; n_shells];
    for k in 0..n_shells {
        let denom = (pow_a[k] * pow_b[k]).sqrt();
        correlations[k] = if denom > 0.0 { cross[k] / denom } else { 0.0 };
        thresholds[k] = half_bit_threshold(counts[k].max(1) as f64);
    }

    // first downward crossing of the threshold, linearly interpolated
    let mut crossed = false;
    let mut k_cross = (n_shells - 1) as f64;
    for k in 1..n_shells {
        if correlations[k] < thresholds[k] {
            let d_prev = correlations[k - 1] - thresholds[k - 1];
            let d_here = correlations[k] - thresholds[k];
            let frac = if d_prev > 0.0 { d_prev / (d_prev - d_here) } else { 1.0 };
            k_cross = (k - 1) as f64 + frac.clamp(0.0, 1.0);
            crossed = true;
            break;
        }
    }
    let resolution_um = if crossed && k_cross > 0.0 {
        (n as f64 * sp.x / k_cross) * 1000.0
    } else {
        2.0 * sp.x * 1000.0
    };

    Ok(FscResult {
        correlations,
        thresholds,
        shell_counts: counts,
        cube: n,
        spacing: sp.x,
        resolution_um,
        crossed,
    })
}

/// Split tracks by ordinal parity and accumulate each half into maps on the
/// shared grid.
pub fn split_tracks_odd_even(tracks: &[Track], grid: Grid3) -> (SrMaps, SrMaps) {
    let odd: Vec<Track> = tracks.iter().step_by(2).cloned().collect();
    let even: Vec<Track> = tracks.iter().skip(1).step_by(2).cloned().collect();
    (accumulate_maps(&odd, grid), accumulate_maps(&even, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    // -----------------------------------------------------------------------
    // Centroid
    // -----------------------------------------------------------------------

    fn gaussian_volume(grid: Grid3, center: Vec3, sigma: f64) -> Volume {
        let mut v = Volume::zeros(grid);
        for iz in 0..grid.dims[2] {
            for iy in 0..grid.dims[1] {
                for ix in 0..grid.dims[0] {
                    let p = grid.voxel_center(ix, iy, iz);
                    *v.at_mut(ix, iy, iz) =
                        (-(p - center).norm2() / (2.0 * sigma * sigma)).exp() as f32;
                }
            }
        }
        v
    }

    #[test]
    fn centroid_of_symmetric_blob_is_exact() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(0.1, 0.1, 0.1), [21, 21, 21]);
        let center = grid.voxel_center(10, 10, 10);
        let v = gaussian_volume(grid, center, 0.25);
        let c = weighted_centroid(&v, 11);
        assert!((c - center).norm() < 1e-9, "{c}");
    }

    #[test]
    fn centroid_tracks_subvoxel_shift() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(0.1, 0.1, 0.1), [21, 21, 21]);
        let truth = grid.voxel_center(10, 10, 10) + Vec3::new(0.05, 0.0, -0.03);
        let v = gaussian_volume(grid, truth, 0.25);
        let c = weighted_centroid(&v, 11);
        assert!((c - truth).norm() < 0.01, "err {}", (c - truth).norm());
    }

    #[test]
    fn centroid_two_voxel_weighted_mean() {
        // intensities 1 and 3 at x = 0 and x = 0.1: centroid at 0.075
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(0.1, 0.1, 0.1), [2, 1, 1]);
        let mut v = Volume::zeros(grid);
        v.data[0] = 1.0;
        v.data[1] = 3.0;
        let c = weighted_centroid(&v, 11);
        assert!((c.x - 0.075).abs() < 1e-12, "{}", c.x);
    }

    // -----------------------------------------------------------------------
    // Residual statistics
    // -----------------------------------------------------------------------

    #[test]
    fn residual_stats_all_zero() {
        let samples: Vec<ResidualSample> = (0..100)
            .map(|k| ResidualSample { time: k as f64 * 0.01, dx: 0.0, dy: 0.0 })
            .collect();
        let series = ResidualSeries::new(samples, 0.1);
        assert!(series.onset_frame.is_none());
        let legs = vec![LegInterval { speed: 1.0, t_start: 0.2, t_end: 0.8 }];
        let stats = residual_statistics(&series, &legs);
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].mean, 0.0);
        assert_eq!(stats[0].std, 0.0);
    }

    #[test]
    fn residual_stats_constant_displacement() {
        let samples: Vec<ResidualSample> = (0..100)
            .map(|k| ResidualSample { time: k as f64 * 0.01, dx: 1.0, dy: 0.0 })
            .collect();
        let series = ResidualSeries::new(samples, 0.1);
        assert_eq!(series.onset_frame, Some(0));
        let legs = vec![LegInterval { speed: 2.0, t_start: 0.0, t_end: 1.0 }];
        let stats = residual_statistics(&series, &legs);
        assert!((stats[0].mean - 1.0).abs() < 1e-12);
        assert_eq!(stats[0].std, 0.0);
    }

    #[test]
    fn residual_stats_exclude_dwell_frames() {
        // displacement only during [0.0, 0.5); frames outside must not count
        let samples: Vec<ResidualSample> = (0..100)
            .map(|k| {
                let t = k as f64 * 0.01;
                let d = if t < 0.5 { 2.0 } else { 99.0 };
                ResidualSample { time: t, dx: d, dy: 0.0 }
            })
            .collect();
        let series = ResidualSeries::new(samples, 0.1);
        let legs = vec![LegInterval { speed: 3.0, t_start: 0.0, t_end: 0.5 }];
        let stats = residual_statistics(&series, &legs);
        assert!((stats[0].mean - 2.0).abs() < 1e-12);
    }

    // -----------------------------------------------------------------------
    // Regression
    // -----------------------------------------------------------------------

    #[test]
    fn fit_exact_line() {
        let fit = linear_fit(&[1.0, 2.0, 3.0], &[0.2, 0.4, 0.6]).unwrap();
        assert!((fit.slope - 0.2).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_single_point_is_underdetermined() {
        assert!(matches!(linear_fit(&[1.0], &[2.0]), Err(Error::Underdetermined)));
        assert!(matches!(
            linear_fit(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Underdetermined)
        ));
    }

    // -----------------------------------------------------------------------
    // FSC
    // -----------------------------------------------------------------------

    fn random_volume(seed: u64, dims: [usize; 3], spacing: f64) -> Volume {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(spacing, spacing, spacing), dims);
        let mut rng = Rng::new(seed);
        let mut v = Volume::zeros(grid);
        for x in v.data.iter_mut() {
            *x = rng.normal() as f32;
        }
        v
    }

    #[test]
    fn fsc_identical_inputs_is_one_everywhere() {
        let v = random_volume(1, [24, 24, 24], 0.02);
        let res = fsc(&v, &v).unwrap();
        for (k, &c) in res.correlations.iter().enumerate() {
            if res.shell_counts[k] > 0 {
                assert!((c - 1.0).abs() < 1e-9, "shell {k}: {c}");
            }
        }
        assert!(!res.crossed, "self-correlation never crosses the threshold");
    }

    #[test]
    fn fsc_independent_noise_decorrelates() {
        let a = random_volume(2, [32, 32, 32], 0.02);
        let b = random_volume(3, [32, 32, 32], 0.02);
        let res = fsc(&a, &b).unwrap();
        for k in 1..res.correlations.len() {
            let bound = 3.0 / (res.shell_counts[k] as f64).sqrt();
            assert!(
                res.correlations[k].abs() < bound.min(1.0) + 1e-9,
                "shell {k}: |{}| vs 3/sqrt(n) = {bound}",
                res.correlations[k]
            );
        }
    }

    #[test]
    fn fsc_symmetry_and_scale_invariance() {
        let a = random_volume(4, [16, 16, 16], 0.02);
        let b = random_volume(5, [16, 16, 16], 0.02);
        let ab = fsc(&a, &b).unwrap();
        let ba = fsc(&b, &a).unwrap();
        for (x, y) in ab.correlations.iter().zip(ba.correlations.iter()) {
            assert_eq!(x, y, "FSC must be symmetric");
        }
        // power-of-two factors keep the scaling exact in f32
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for v in a2.data.iter_mut() {
            *v *= 4.0;
        }
        for v in b2.data.iter_mut() {
            *v *= 0.5;
        }
        let scaled = fsc(&a2, &b2).unwrap();
        for (x, y) in ab.correlations.iter().zip(scaled.correlations.iter()) {
            assert!((x - y).abs() < 1e-9, "scale invariance violated: {x} vs {y}");
        }
    }

    #[test]
    fn fsc_grid_mismatch_and_empty_are_errors() {
        let a = random_volume(6, [16, 16, 16], 0.02);
        let b = random_volume(7, [16, 16, 8], 0.02);
        assert!(matches!(fsc(&a, &b), Err(Error::ShapeMismatch(_))));
        let z = Volume::zeros(a.grid);
        assert!(matches!(fsc(&a, &z), Err(Error::EmptyVolume)));
    }

    #[test]
    fn fsc_bandlimited_signal_resolution() {
        // two noisy copies of a smooth structure decorrelate at high
        // frequency, so a crossing exists and sits above the voxel scale
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(0.02, 0.02, 0.02), [48, 48, 48]);
        let mut rng_a = Rng::new(8);
        let mut rng_b = Rng::new(9);
        let mut a = Volume::zeros(grid);
        let mut b = Volume::zeros(grid);
        let c1 = grid.voxel_center(20, 24, 24);
        let c2 = grid.voxel_center(30, 24, 24);
        let sigma = 0.05;
        for iz in 0..48 {
            for iy in 0..48 {
                for ix in 0..48 {
                    let p = grid.voxel_center(ix, iy, iz);
                    let s = (-(p - c1).norm2() / (2.0 * sigma * sigma)).exp()
                        + (-(p - c2).norm2() / (2.0 * sigma * sigma)).exp();
                    *a.at_mut(ix, iy, iz) = (s + 0.3 * rng_a.normal()) as f32;
                    *b.at_mut(ix, iy, iz) = (s + 0.3 * rng_b.normal()) as f32;
                }
            }
        }
        let res = fsc(&a, &b).unwrap();
        assert!(res.crossed);
        assert!(res.resolution_um > 2.0 * 20.0, "{}", res.resolution_um);
        assert!(res.resolution_um < 1000.0, "{}", res.resolution_um);
    }

    #[test]
    fn split_parity_halves_counts() {
        use crate::ulm::Localization;
        let mk = |id: u64, y: f64| -> Track {
            let locs: Vec<Localization> = (0..6)
                .map(|k| Localization {
                    position: Vec3::new(k as f64 * 0.05, y, 30.0),
                    ncc_peak: 0.9,
                    frame_id: k,
                    timestamp: k as f64 / 85.0,
                })
                .collect();
            Track {
                id,
                localizations: locs.clone(),
                link_velocities: vec![Vec3::new(0.05 * 85.0, 0.0, 0.0); locs.len() - 1],
            }
        };
        let tracks: Vec<Track> = (0..6).map(|i| mk(i, i as f64 * 0.1)).collect();
        let grid = crate::ulm::sr_grid_for(&tracks, 0.02).unwrap();
        let (odd, even) = split_tracks_odd_even(&tracks, grid);
        let mass = |m: &SrMaps| m.density.data.iter().map(|&v| v as f64).sum::<f64>();
        assert!(mass(&odd) > 0.0 && mass(&even) > 0.0);
        // disjoint paths: each half carries exactly three tracks' mass
        let total = accumulate_maps(&tracks, grid);
        assert!((mass(&odd) + mass(&even) - mass(&total)).abs() < 1e-9);
    }
}
