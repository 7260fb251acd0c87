//! Iterative radix-2 FFT used for the power spectrum of real frames.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::math;

#[derive(Clone, Debug)]
pub struct Fft {
    size: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Fft {
    /// `size` must be a power of two.
    pub fn new(size: usize) -> Self {
        assert!(size.is_power_of_two(), "FFT size must be a power of two");
        let bits = size.trailing_zeros();
        let bitrev = (0..size)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let half = size / 2;
        let cos = (0..half).map(|k| math::cos(TAU * k as f64 / size as f64)).collect();
        let sin = (0..half).map(|k| -math::sin(TAU * k as f64 / size as f64)).collect();
        Self {
            size,
            cos,
            sin,
            bitrev,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// In-place forward transform (`e^{-2πi kn/N}` convention).
    pub fn transform(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.size;
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let a = start + k;
                    let b = a + len / 2;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }

    /// `|X_k|²` for `k = 0..=N/2` of a real frame of length `N`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut re = frame.to_vec();
        let mut im = alloc::vec![0.0; self.size];
        self.transform(&mut re, &mut im);
        (0..=self.size / 2)
            .map(|k| re[k] * re[k] + im[k] * im[k])
            .collect()
    }
}
