//! Minimal complex FFT used by the Fourier shell correlation.
//!
//! Iterative radix-2 Cooley-Tukey on power-of-two lengths; volumes are
//! zero-padded to power-of-two cubes before the 3D transform, so nothing
//! fancier is needed.

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct C64 {
    pub re: f64,
    pub im: f64,
}

impl C64 {
    pub fn new(re: f64, im: f64) -> Self {
        C64 { re, im }
    }

    #[inline]
    pub fn mul(self, o: C64) -> C64 {
        C64::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    #[inline]
    pub fn add(self, o: C64) -> C64 {
        C64::new(self.re + o.re, self.im + o.im)
    }

    #[inline]
    pub fn sub(self, o: C64) -> C64 {
        C64::new(self.re - o.re, self.im - o.im)
    }

    #[inline]
    pub fn conj(self) -> C64 {
        C64::new(self.re, -self.im)
    }

    #[inline]
    pub fn abs2(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// In-place radix-2 FFT; `buf.len()` must be a power of two.
pub fn fft_inplace(buf: &mut [C64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = C64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = C64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[i + k];
                let v = buf[i + k + len / 2].mul(w);
                buf[i + k] = u.add(v);
                buf[i + k + len / 2] = u.sub(v);
                w = w.mul(wlen);
            }
            i += len;
        }
        len <<= 1;
    }
    if inverse {
        let inv_n = 1.0 / n as f64;
        for v in buf.iter_mut() {
            v.re *= inv_n;
            v.im *= inv_n;
        }
    }
}

/// In-place 3D FFT of an `n`^3 cube stored x-fastest.
pub fn fft3_inplace(data: &mut [C64], n: usize) {
    assert_eq!(data.len(), n * n * n);
    let mut line = vec![C64::default(); n];
    // x lines
    for iz in 0..n {
        for iy in 0..n {
            let base = n * (iy + n * iz);
            line.copy_from_slice(&data[base..base + n]);
            fft_inplace(&mut line, false);
            data[base..base + n].copy_from_slice(&line);
        }
    }
    // y lines
    for iz in 0..n {
        for ix in 0..n {
            for iy in 0..n {
                line[iy] = data[ix + n * (iy + n * iz)];
            }
            fft_inplace(&mut line, false);
            for iy in 0..n {
                data[ix + n * (iy + n * iz)] = line[iy];
            }
        }
    }
    // z lines
    for iy in 0..n {
        for ix in 0..n {
            for iz in 0..n {
                line[iz] = data[ix + n * (iy + n * iz)];
            }
            fft_inplace(&mut line, false);
            for iz in 0..n {
                data[ix + n * (iy + n * iz)] = line[iz];
            }
        }
    }
}
