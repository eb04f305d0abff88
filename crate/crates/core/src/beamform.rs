//! Volumetric delay-and-sum reconstruction, envelope detection, log
//! compression and MIP rendering.
//!
//! Plane-wave transmit with zero steering: the delay to a voxel is its depth
//! plus the return path to each element, channel samples are read with
//! linear interpolation and rectangular apodization. The envelope comes from
//! quadrature sampling at the demodulation frequency — each element is read
//! at the nominal delay and a quarter carrier period later, giving in-phase
//! and quadrature accumulators whose magnitude is the per-voxel envelope.
//! This keeps the computation strictly per-voxel, with no pass over whole
//! traces.

use crate::acoustics::ChannelFrame;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scene::ArraySpec;
use crate::volume::{Grid3, GrayImage, Volume};
use rayon::prelude::*;

/// Delay-and-sum with quadrature envelope detection.
pub fn das_beamform(frame: &ChannelFrame, grid: Grid3, array: &ArraySpec) -> Volume {
    das_impl(frame, grid, array, true)
}

/// Delay-and-sum without envelope detection: the raw RF accumulator, which
/// is linear in the channel data. Used by linearity checks and available for
/// callers that do their own detection.
pub fn das_beamform_rf(frame: &ChannelFrame, grid: Grid3, array: &ArraySpec) -> Volume {
    das_impl(frame, grid, array, false)
}

fn das_impl(frame: &ChannelFrame, grid: Grid3, array: &ArraySpec, envelope: bool) -> Volume {
    let mut vol = Volume::zeros(grid);
    let elements: Vec<Vec3> =
        (0..array.n_elements().min(frame.n_elements)).map(|e| array.element_position(e)).collect();
    let inv_c = 1.0 / array.sound_speed;
    let quarter_period = 0.25 / array.center_freq;
    let [nx, ny, _nz] = grid.dims;
    let plane = nx * ny;
    vol.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(iz, slab)| {
            for iy in 0..ny {
                for ix in 0..nx {
                    let p = grid.voxel_center(ix, iy, iz);
                    let mut acc_i = 0.0f64;
                    let mut acc_q = 0.0f64;
                    for (e, pe) in elements.iter().enumerate() {
                        let tau = (p.z + (*pe - p).norm()) * inv_c;
                        acc_i += frame.sample_at(e, tau);
                        if envelope {
                            acc_q += frame.sample_at(e, tau + quarter_period);
                        }
                    }
                    slab[iy * nx + ix] = if envelope {
                        (acc_i * acc_i + acc_q * acc_q).sqrt() as f32
                    } else {
                        acc_i as f32
                    };
                }
            }
        });
    vol
}

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

/// A cropped sub-volume plus a flag telling whether any part of the request
/// fell outside the parent field of view (those voxels are zero-filled).
#[derive(Debug, Clone)]
pub struct CropResult {
    pub volume: Volume,
    pub clipped: bool,
}

/// Cut a cuboid of `extent` millimetres centred on `center` out of `volume`,
/// snapped to the parent grid. The crop keeps the parent spacing; its origin
/// is adjusted accordingly. A centre outside the field of view is an error
/// (the target has been lost).
pub fn crop_online_volume(volume: &Volume, center: Vec3, extent: Vec3) -> Result<CropResult> {
    let grid = &volume.grid;
    if !grid.contains(center) {
        return Err(Error::TargetLost);
    }
    let sp = grid.spacing;
    let dims = [
        ((extent.x / sp.x).round() as usize).max(1),
        ((extent.y / sp.y).round() as usize).max(1),
        ((extent.z / sp.z).round() as usize).max(1),
    ];
    let f = grid.to_fractional(center);
    let start = [
        f.x.round() as isize - (dims[0] as isize - 1) / 2,
        f.y.round() as isize - (dims[1] as isize - 1) / 2,
        f.z.round() as isize - (dims[2] as isize - 1) / 2,
    ];
    let origin = Vec3::new(
        grid.origin.x + sp.x * start[0] as f64,
        grid.origin.y + sp.y * start[1] as f64,
        grid.origin.z + sp.z * start[2] as f64,
    );
    let out_grid = Grid3::new(origin, sp, dims);
    let mut out = Volume::zeros(out_grid);
    out.frame_id = volume.frame_id;
    out.timestamp = volume.timestamp;
    let mut clipped = false;
    for oz in 0..dims[2] {
        let iz = start[2] + oz as isize;
        for oy in 0..dims[1] {
            let iy = start[1] + oy as isize;
            for ox in 0..dims[0] {
                let ix = start[0] + ox as isize;
                if ix < 0
                    || iy < 0
                    || iz < 0
                    || ix >= grid.dims[0] as isize
                    || iy >= grid.dims[1] as isize
                    || iz >= grid.dims[2] as isize
                {
                    clipped = true;
                    continue;
                }
                *out.at_mut(ox, oy, oz) = volume.at(ix as usize, iy as usize, iz as usize);
            }
        }
    }
    Ok(CropResult { volume: out, clipped })
}

// ---------------------------------------------------------------------------
// Log-compressed MIP rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Maximum-intensity projection along `axis`, log-compressed to the given
/// dynamic range in dB and mapped linearly to [0, 255]. An all-zero volume
/// maps to an all-zero image.
pub fn log_mip(volume: &Volume, dynamic_range_db: f64, axis: Axis) -> GrayImage {
    assert!(dynamic_range_db > 0.0, "dynamic range must be positive");
    let [nx, ny, nz] = volume.grid.dims;
    let (w, h) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let vmax = volume.max_value() as f64;
    let mut pixels = vec![0.0f32; w * h];
    if vmax <= 0.0 {
        return GrayImage { width: w, height: h, pixels };
    }
    // project the linear maximum, then log-map (max and log commute)
    for row in 0..h {
        for col in 0..w {
            let mut m = 0.0f32;
            match axis {
                Axis::X => {
                    for ix in 0..nx {
                        m = m.max(volume.at(ix, col, row));
                    }
                }
                Axis::Y => {
                    for iy in 0..ny {
                        m = m.max(volume.at(col, iy, row));
                    }
                }
                Axis::Z => {
                    for iz in 0..nz {
                        m = m.max(volume.at(col, row, iz));
                    }
                }
            }
            let db = if m > 0.0 {
                (20.0 * (m as f64 / vmax).log10()).clamp(-dynamic_range_db, 0.0)
            } else {
                -dynamic_range_db
            };
            pixels[row * w + col] = ((db + dynamic_range_db) / dynamic_range_db * 255.0) as f32;
        }
    }
    GrayImage { width: w, height: h, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{simulate_channel_data, SimParams, TxAperture};
    use crate::scene::{Scatterer, ScattererKind};

    fn point(p: Vec3) -> Scatterer {
        Scatterer { position: p, amplitude: 1.0, kind: ScattererKind::Tissue, velocity: Vec3::ZERO }
    }

    #[test]
    fn das_localizes_point_scatterer() {
        let array = ArraySpec::default();
        let params = SimParams::default();
        let truth = Vec3::new(1.0, 1.0, 20.0);
        let frame =
            simulate_channel_data(&[point(truth)], &array, TxAperture::Full, &params).unwrap();
        let grid = Grid3::centered(truth, Vec3::new(4.0, 4.0, 4.0), 0.4);
        let vol = das_beamform(&frame, grid, &array);
        let (ix, iy, iz) = vol.argmax();
        let p = vol.grid.voxel_center(ix, iy, iz);
        assert!((p.x - truth.x).abs() <= 0.4 + 1e-9, "{p}");
        assert!((p.y - truth.y).abs() <= 0.4 + 1e-9, "{p}");
        assert!((p.z - truth.z).abs() <= 0.4 + 1e-9, "{p}");
    }

    #[test]
    fn das_zero_input_zero_output() {
        let array = ArraySpec::default();
        let frame = ChannelFrame::zeros(array.n_elements(), 256, 31.2, 0.0, TxAperture::Full);
        let grid = Grid3::centered(Vec3::new(0.0, 0.0, 3.0), Vec3::new(2.0, 2.0, 2.0), 0.4);
        let vol = das_beamform(&frame, grid, &array);
        assert!(vol.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn das_mirror_symmetry() {
        let array = ArraySpec::default();
        let params = SimParams::default();
        let pair = vec![point(Vec3::new(2.0, 0.0, 20.0)), point(Vec3::new(-2.0, 0.0, 20.0))];
        let frame = simulate_channel_data(&pair, &array, TxAperture::Full, &params).unwrap();
        let grid = Grid3::centered(Vec3::new(0.0, 0.0, 20.0), Vec3::new(6.0, 1.0, 2.0), 0.4);
        let vol = das_beamform(&frame, grid, &array);
        let [nx, ny, nz] = vol.grid.dims;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    let a = vol.at(ix, iy, iz);
                    let b = vol.at(nx - 1 - ix, iy, iz);
                    let denom = a.abs().max(b.abs()).max(1e-6);
                    assert!(
                        (a - b).abs() / denom < 0.05,
                        "asymmetry at ({ix},{iy},{iz}): {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn das_rf_is_linear() {
        let array = ArraySpec::default();
        let params = SimParams::default();
        let fa =
            simulate_channel_data(&[point(Vec3::new(0.5, 0.0, 15.0))], &array, TxAperture::Full, &params)
                .unwrap();
        let fb =
            simulate_channel_data(&[point(Vec3::new(-1.0, 1.0, 22.0))], &array, TxAperture::Full, &params)
                .unwrap();
        let (alpha, beta) = (0.7f32, -1.3f32);
        let mut combo = fa.clone();
        for i in 0..combo.samples.len() {
            combo.samples[i] = alpha * fa.samples[i] + beta * fb.samples[i];
        }
        let grid = Grid3::centered(Vec3::new(0.0, 0.5, 18.0), Vec3::new(4.0, 3.0, 9.0), 0.8);
        let va = das_beamform_rf(&fa, grid, &array);
        let vb = das_beamform_rf(&fb, grid, &array);
        let vc = das_beamform_rf(&combo, grid, &array);
        let scale = vc.data.iter().map(|v| v.abs()).fold(0.0f32, f32::max).max(1e-9);
        for i in 0..vc.data.len() {
            let expect = alpha * va.data[i] + beta * vb.data[i];
            assert!(
                (vc.data[i] - expect).abs() / scale < 1e-4,
                "nonlinear at {i}: {} vs {expect}",
                vc.data[i]
            );
        }
    }

    #[test]
    fn crop_single_voxel() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(0.4, 0.4, 0.4), [8, 8, 8]);
        let mut vol = Volume::zeros(grid);
        *vol.at_mut(3, 4, 5) = 7.0;
        let center = grid.voxel_center(3, 4, 5);
        let crop = crop_online_volume(&vol, center, Vec3::new(0.4, 0.4, 0.4)).unwrap();
        assert_eq!(crop.volume.grid.dims, [1, 1, 1]);
        assert_eq!(crop.volume.data[0], 7.0);
        assert!(!crop.clipped);
    }

    #[test]
    fn crop_online_size_matches_paper_scale() {
        // 12.5 mm at 0.4 mm spacing gives a 31^3 crop of ~3e4 voxels.
        let grid = Grid3::centered(Vec3::new(0.0, 0.0, 30.0), Vec3::new(20.0, 20.0, 45.0), 0.4);
        let vol = Volume::zeros(grid);
        let crop =
            crop_online_volume(&vol, Vec3::new(0.0, 0.0, 30.0), Vec3::new(12.5, 12.5, 12.5))
                .unwrap();
        assert_eq!(crop.volume.grid.dims, [31, 31, 31]);
        assert_eq!(crop.volume.grid.n_voxels(), 29_791);
    }

    #[test]
    fn crop_clips_and_flags_at_boundary() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), [6, 6, 6]);
        let mut vol = Volume::zeros(grid);
        for v in vol.data.iter_mut() {
            *v = 1.0;
        }
        let crop = crop_online_volume(&vol, Vec3::new(0.0, 3.0, 3.0), Vec3::new(4.0, 2.0, 2.0))
            .unwrap();
        assert!(crop.clipped);
        // zero-filled voxels outside, ones inside
        assert!(crop.volume.data.iter().any(|&v| v == 0.0));
        assert!(crop.volume.data.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn crop_center_outside_is_target_lost() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), [6, 6, 6]);
        let vol = Volume::zeros(grid);
        let err = crop_online_volume(&vol, Vec3::new(50.0, 0.0, 0.0), Vec3::new(2.0, 2.0, 2.0));
        assert!(matches!(err, Err(Error::TargetLost)));
    }

    #[test]
    fn log_mip_mapping() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), [3, 1, 1]);
        let mut vol = Volume::zeros(grid);
        vol.data[0] = 1.0; // 0 dB -> 255
        vol.data[1] = 10f32.powf(-0.5); // -10 dB: the DR-20 midpoint 127.5
        vol.data[2] = 0.01; // -40 dB -> clamped to 0
        let img = log_mip(&vol, 20.0, Axis::Z);
        assert!((img.pixels[0] - 255.0).abs() < 1e-3);
        assert!((img.pixels[1] - 127.5).abs() < 1e-3, "{}", img.pixels[1]);
        assert!(img.pixels[2].abs() < 1e-3);
    }

    #[test]
    fn log_mip_uniform_is_white_and_zero_is_black() {
        let grid = Grid3::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), [4, 4, 2]);
        let mut vol = Volume::zeros(grid);
        let img = log_mip(&vol, 20.0, Axis::Z);
        assert!(img.pixels.iter().all(|&p| p == 0.0));
        for v in vol.data.iter_mut() {
            *v = 3.5;
        }
        let img = log_mip(&vol, 20.0, Axis::Z);
        assert!(img.pixels.iter().all(|&p| (p - 255.0).abs() < 1e-3));
    }
}
