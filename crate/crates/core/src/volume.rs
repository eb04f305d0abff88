//! Regular 3D scalar grids — the universal image currency.
//!
//! A [`Volume`] is a dense array of `f32` samples on a [`Grid3`] with origin
//! and spacing in millimetres, in the probe frame. Data is stored x-fastest
//! (`idx = ix + nx * (iy + ny * iz)`). On disk a volume is a raw
//! little-endian f32 blob plus a sidecar text header; maximum intensity
//! projections are written as binary PGM.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use std::fs;
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Regular 3D grid: voxel centre `i` sits at `origin + spacing * i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub origin: Vec3,
    pub spacing: Vec3,
    pub dims: [usize; 3],
}

impl Grid3 {
    pub fn new(origin: Vec3, spacing: Vec3, dims: [usize; 3]) -> Self {
        assert!(
            spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0,
            "grid spacing must be positive"
        );
        Grid3 { origin, spacing, dims }
    }

    /// Isotropic grid centred on `center` with roughly `extent` per axis.
    /// Dimensions are forced odd so the centre is an exact voxel centre.
    pub fn centered(center: Vec3, extent: Vec3, spacing: f64) -> Self {
        let odd = |e: f64| {
            let n = (e / spacing).round().max(1.0) as usize;
            if n % 2 == 0 {
                n + 1
            } else {
                n
            }
        };
        let dims = [odd(extent.x), odd(extent.y), odd(extent.z)];
        let sp = Vec3::new(spacing, spacing, spacing);
        let origin = Vec3::new(
            center.x - 0.5 * (dims[0] - 1) as f64 * spacing,
            center.y - 0.5 * (dims[1] - 1) as f64 * spacing,
            center.z - 0.5 * (dims[2] - 1) as f64 * spacing,
        );
        Grid3 { origin, spacing: sp, dims }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let ix = idx % self.dims[0];
        let iy = (idx / self.dims[0]) % self.dims[1];
        let iz = idx / (self.dims[0] * self.dims[1]);
        (ix, iy, iz)
    }

    #[inline]
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        Vec3::new(
            self.origin.x + self.spacing.x * ix as f64,
            self.origin.y + self.spacing.y * iy as f64,
            self.origin.z + self.spacing.z * iz as f64,
        )
    }

    /// Continuous (fractional) voxel coordinates of a point.
    #[inline]
    pub fn to_fractional(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            (p.x - self.origin.x) / self.spacing.x,
            (p.y - self.origin.y) / self.spacing.y,
            (p.z - self.origin.z) / self.spacing.z,
        )
    }

    /// True when `p` lies within the voxel-centre bounding box.
    pub fn contains(&self, p: Vec3) -> bool {
        let f = self.to_fractional(p);
        f.x >= 0.0
            && f.y >= 0.0
            && f.z >= 0.0
            && f.x <= (self.dims[0] - 1) as f64
            && f.y <= (self.dims[1] - 1) as f64
            && f.z <= (self.dims[2] - 1) as f64
    }

    /// Nearest voxel index of a point, or None when outside.
    pub fn voxel_of(&self, p: Vec3) -> Option<(usize, usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let f = self.to_fractional(p);
        Some((
            (f.x.round() as usize).min(self.dims[0] - 1),
            (f.y.round() as usize).min(self.dims[1] - 1),
            (f.z.round() as usize).min(self.dims[2] - 1),
        ))
    }

    pub fn physical_extent(&self) -> Vec3 {
        Vec3::new(
            self.spacing.x * (self.dims[0] - 1) as f64,
            self.spacing.y * (self.dims[1] - 1) as f64,
            self.spacing.z * (self.dims[2] - 1) as f64,
        )
    }
}

// ---------------------------------------------------------------------------
// Volume
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid3,
    pub data: Vec<f32>,
    pub frame_id: u64,
    /// Acquisition time in seconds of simulated time.
    pub timestamp: f64,
}

impl Volume {
    pub fn zeros(grid: Grid3) -> Self {
        let n = grid.n_voxels();
        Volume { grid, data: vec![0.0; n], frame_id: 0, timestamp: 0.0 }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.data[self.grid.index(ix, iy, iz)]
    }

    #[inline]
    pub fn at_mut(&mut self, ix: usize, iy: usize, iz: usize) -> &mut f32 {
        let i = self.grid.index(ix, iy, iz);
        &mut self.data[i]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0_f32, f32::max)
    }

    /// Voxel index triple of the global maximum (first occurrence).
    pub fn argmax(&self) -> (usize, usize, usize) {
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        self.grid.unravel(best)
    }

    /// Trilinear sample at a physical point; zero outside the support.
    pub fn sample(&self, p: Vec3) -> f64 {
        let f = self.grid.to_fractional(p);
        let [nx, ny, nz] = self.grid.dims;
        if f.x < 0.0
            || f.y < 0.0
            || f.z < 0.0
            || f.x > (nx - 1) as f64
            || f.y > (ny - 1) as f64
            || f.z > (nz - 1) as f64
        {
            return 0.0;
        }
        let x0 = (f.x.floor() as usize).min(nx - 1);
        let y0 = (f.y.floor() as usize).min(ny - 1);
        let z0 = (f.z.floor() as usize).min(nz - 1);
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let fx = f.x - x0 as f64;
        let fy = f.y - y0 as f64;
        let fz = f.z - z0 as f64;
        let g = |ix: usize, iy: usize, iz: usize| self.at(ix, iy, iz) as f64;
        let c00 = g(x0, y0, z0) * (1.0 - fx) + g(x1, y0, z0) * fx;
        let c10 = g(x0, y1, z0) * (1.0 - fx) + g(x1, y1, z0) * fx;
        let c01 = g(x0, y0, z1) * (1.0 - fx) + g(x1, y0, z1) * fx;
        let c11 = g(x0, y1, z1) * (1.0 - fx) + g(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Trilinear sample and its spatial gradient (per millimetre). The
    /// gradient is the exact derivative of the interpolant inside each cell.
    /// Returns None outside the support.
    pub fn sample_with_grad(&self, p: Vec3) -> Option<(f64, Vec3)> {
        let f = self.grid.to_fractional(p);
        let [nx, ny, nz] = self.grid.dims;
        if f.x < 0.0
            || f.y < 0.0
            || f.z < 0.0
            || f.x > (nx - 1) as f64
            || f.y > (ny - 1) as f64
            || f.z > (nz - 1) as f64
        {
            return None;
        }
        let x0 = (f.x.floor() as usize).min(nx.saturating_sub(2));
        let y0 = (f.y.floor() as usize).min(ny.saturating_sub(2));
        let z0 = (f.z.floor() as usize).min(nz.saturating_sub(2));
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let fx = f.x - x0 as f64;
        let fy = f.y - y0 as f64;
        let fz = f.z - z0 as f64;
        let g = |ix: usize, iy: usize, iz: usize| self.at(ix, iy, iz) as f64;
        let (v000, v100) = (g(x0, y0, z0), g(x1, y0, z0));
        let (v010, v110) = (g(x0, y1, z0), g(x1, y1, z0));
        let (v001, v101) = (g(x0, y0, z1), g(x1, y0, z1));
        let (v011, v111) = (g(x0, y1, z1), g(x1, y1, z1));
        let c00 = v000 * (1.0 - fx) + v100 * fx;
        let c10 = v010 * (1.0 - fx) + v110 * fx;
        let c01 = v001 * (1.0 - fx) + v101 * fx;
        let c11 = v011 * (1.0 - fx) + v111 * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let value = c0 * (1.0 - fz) + c1 * fz;

        let dx = ((v100 - v000) * (1.0 - fy) + (v110 - v010) * fy) * (1.0 - fz)
            + ((v101 - v001) * (1.0 - fy) + (v111 - v011) * fy) * fz;
        let dy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
        let dz = c1 - c0;
        Some((
            value,
            Vec3::new(
                dx / self.grid.spacing.x,
                dy / self.grid.spacing.y,
                dz / self.grid.spacing.z,
            ),
        ))
    }

    // -----------------------------------------------------------------------
    // Raw f32 + sidecar header persistence
    // -----------------------------------------------------------------------

    /// Write `<path>.raw` (little-endian f32, x fastest) and `<path>.hdr`.
    pub fn save(&self, path_stem: &Path, config_hash: &str) -> Result<()> {
        let mut raw = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path_stem.with_extension("raw"), raw)?;
        let hdr = format!(
            "sonotrack volume v1\n\
             dims = {} {} {}\n\
             spacing = {:.9} {:.9} {:.9}\n\
             origin = {:.9} {:.9} {:.9}\n\
             frame = {}\n\
             time = {:.9}\n\
             config_hash = {}\n",
            self.grid.dims[0],
            self.grid.dims[1],
            self.grid.dims[2],
            self.grid.spacing.x,
            self.grid.spacing.y,
            self.grid.spacing.z,
            self.grid.origin.x,
            self.grid.origin.y,
            self.grid.origin.z,
            self.frame_id,
            self.timestamp,
            config_hash,
        );
        fs::write(path_stem.with_extension("hdr"), hdr)?;
        Ok(())
    }

    /// Load a volume written by [`Volume::save`]; returns the volume and the
    /// config hash recorded in the header.
    pub fn load(path_stem: &Path) -> Result<(Volume, String)> {
        let hdr = fs::read_to_string(path_stem.with_extension("hdr"))?;
        let mut dims = [0usize; 3];
        let mut spacing = Vec3::ZERO;
        let mut origin = Vec3::ZERO;
        let mut frame_id = 0u64;
        let mut timestamp = 0.0f64;
        let mut hash = String::new();
        for line in hdr.lines().skip(1) {
            let Some((key, val)) = line.split_once('=') else { continue };
            let key = key.trim();
            let val = val.trim();
            let nums = || -> Vec<f64> {
                val.split_whitespace()
                    .filter_map(|t| t.parse::<f64>().ok())
                    .collect()
            };
            match key {
                "dims" => {
                    let v = nums();
                    if v.len() != 3 {
                        return Err(Error::Format(format!("bad dims line: {line}")));
                    }
                    dims = [v[0] as usize, v[1] as usize, v[2] as usize];
                }
                "spacing" => {
                    let v = nums();
                    spacing = Vec3::new(v[0], v[1], v[2]);
                }
                "origin" => {
                    let v = nums();
                    origin = Vec3::new(v[0], v[1], v[2]);
                }
                "frame" => frame_id = val.parse().unwrap_or(0),
                "time" => timestamp = val.parse().unwrap_or(0.0),
                "config_hash" => hash = val.to_string(),
                _ => {}
            }
        }
        let raw = fs::read(path_stem.with_extension("raw"))?;
        let n = dims[0] * dims[1] * dims[2];
        if raw.len() != n * 4 {
            return Err(Error::Format(format!(
                "raw size {} does not match dims {:?}",
                raw.len(),
                dims
            )));
        }
        let mut data = Vec::with_capacity(n);
        for c in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        Ok((
            Volume { grid: Grid3::new(origin, spacing, dims), data, frame_id, timestamp },
            hash,
        ))
    }
}

// ---------------------------------------------------------------------------
// 2D images (MIPs)
// ---------------------------------------------------------------------------

/// Grey image with float pixels in [0, 255]; quantised only when saved.
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        for p in &self.pixels {
            out.push(p.round().clamp(0.0, 255.0) as u8);
        }
        fs::write(path, out)?;
        Ok(())
    }
}
