//! Small shared helpers: deterministic parallel reduction and FNV hashing.

use rayon::prelude::*;
use std::ops::Range;

/// Chunk size for deterministic parallel reductions over voxel ranges.
const CHUNK: usize = 8192;

/// Parallel reduction over `0..len` that is bit-identical for any thread
/// count: the range is split into fixed chunks, per-chunk partials are
/// computed in parallel, and the partials are folded sequentially in chunk
/// order. Float summation order therefore never depends on scheduling.
pub fn par_chunk_reduce<A, F, M>(len: usize, identity: A, eval: F, merge: M) -> A
where
    A: Send,
    F: Fn(Range<usize>) -> A + Sync,
    M: Fn(A, A) -> A,
{
    par_chunk_reduce_sized(len, CHUNK, identity, eval, merge)
}

/// [`par_chunk_reduce`] with an explicit chunk size, for callers whose work
/// items are coarse (e.g. volume slabs rather than voxels).
pub fn par_chunk_reduce_sized<A, F, M>(
    len: usize,
    chunk: usize,
    identity: A,
    eval: F,
    merge: M,
) -> A
where
    A: Send,
    F: Fn(Range<usize>) -> A + Sync,
    M: Fn(A, A) -> A,
{
    if len == 0 {
        return identity;
    }
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    if n_chunks == 1 {
        return merge(identity, eval(0..len));
    }
    let partials: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| eval(c * chunk..((c + 1) * chunk).min(len)))
        .collect();
    partials.into_iter().fold(identity, |acc, p| merge(acc, p))
}

/// Separable 1D convolution of a dense 3D field (x fastest) along one axis,
/// writing into `out`. `kernel` is centred; samples outside the volume are
/// dropped, and when `renormalize` is set the remaining taps are rescaled to
/// unit weight (mean-preserving at the edges; otherwise mass leaks out).
pub fn convolve_axis(
    data: &[f64],
    out: &mut [f64],
    dims: [usize; 3],
    axis: usize,
    kernel: &[f64],
    renormalize: bool,
) {
    let [nx, ny, nz] = dims;
    let radius = kernel.len() / 2;
    let n_axis = [nx, ny, nz][axis];
    let full: f64 = kernel.iter().sum();
    let norm_at = |pos: usize| -> f64 {
        if !renormalize {
            return 1.0;
        }
        if pos >= radius && pos + radius < n_axis {
            full
        } else {
            let lo = pos.max(radius) - radius;
            let hi = (pos + radius).min(n_axis - 1);
            (lo..=hi).map(|q| kernel[q + radius - pos]).sum()
        }
    };

    if axis == 0 {
        // contiguous lines along x
        for l in 0..ny * nz {
            let base = l * nx;
            let line = &data[base..base + nx];
            for pos in 0..nx {
                let lo = pos.max(radius) - radius;
                let hi = (pos + radius).min(nx - 1);
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += kernel[q + radius - pos] * line[q];
                }
                out[base + pos] = acc / norm_at(pos);
            }
        }
    } else {
        // y and z passes stay cache-friendly by accumulating whole x-rows
        out.fill(0.0);
        match axis {
            1 => {
                for iz in 0..nz {
                    for oy in 0..ny {
                        let dst = nx * (oy + ny * iz);
                        let lo = oy.max(radius) - radius;
                        let hi = (oy + radius).min(ny - 1);
                        let norm = norm_at(oy);
                        for q in lo..=hi {
                            let w = kernel[q + radius - oy] / norm;
                            let src = nx * (q + ny * iz);
                            for i in 0..nx {
                                out[dst + i] += w * data[src + i];
                            }
                        }
                    }
                }
            }
            _ => {
                for oz in 0..nz {
                    let lo = oz.max(radius) - radius;
                    let hi = (oz + radius).min(nz - 1);
                    let norm = norm_at(oz);
                    for q in lo..=hi {
                        let w = kernel[q + radius - oz] / norm;
                        let dst = nx * ny * oz;
                        let src = nx * ny * q;
                        for i in 0..nx * ny {
                            out[dst + i] += w * data[src + i];
                        }
                    }
                }
            }
        }
    }
}

/// Gaussian kernel with the given sigma (in samples), truncated at
/// `reach` sigma, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, reach: f64) -> Vec<f64> {
    let radius = (reach * sigma).ceil().max(1.0) as usize;
    let kernel: Vec<f64> =
        (0..=2 * radius).map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma) * (d / sigma)).exp()
        }).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.into_iter().map(|k| k / sum).collect()
}

/// FNV-1a 64-bit hash, used to stamp artifacts with their configuration.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Next power of two >= n (n >= 1).
pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}
