//! Waveform corruptions used by the robustness harness.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, RngCore};

use super::AudioClip;
use crate::{math, Error, Result};

const SWAP_SEGMENTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    /// Additive Gaussian noise; magnitude is the noise/signal RMS ratio.
    Noise,
    /// Linear-interpolation resampling by a factor drawn from `[1 − m, 1 + m]`.
    TimeWarp,
    /// Swaps `ceil(m · 5)` random adjacent pairs out of ten equal segments.
    SegmentSwap,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [PerturbKind::Noise, PerturbKind::TimeWarp, PerturbKind::SegmentSwap];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Noise => "noise",
            PerturbKind::TimeWarp => "time_warp",
            PerturbKind::SegmentSwap => "segment_swap",
        }
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(PerturbKind::Noise),
            "time_warp" => Ok(PerturbKind::TimeWarp),
            "segment_swap" => Ok(PerturbKind::SegmentSwap),
            other => Err(Error::Argument(format!("unknown perturbation kind {other:?}"))),
        }
    }
}

/// Noise/signal RMS ratio that yields `snr` decibels.
pub fn noise_magnitude_for_snr(snr: f64) -> f64 {
    math::powf(10.0, -snr / 20.0)
}

/// `10·log10(P_signal / P_noise)` with `noise = noisy − clean`.
pub fn snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let ps: f64 = clean.iter().map(|v| v * v).sum();
    let pn: f64 = clean
        .iter()
        .zip(noisy)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    10.0 * math::log10(ps / pn)
}

fn rms(x: &[f64]) -> f64 {
    math::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64)
}

pub fn perturb_audio<R: RngCore + ?Sized>(
    clip: &AudioClip,
    kind: PerturbKind,
    magnitude: f64,
    rng: &mut R,
) -> Result<AudioClip> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::Argument(format!("perturbation magnitude {magnitude}")));
    }
    if magnitude == 0.0 {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    let out = match kind {
        PerturbKind::Noise => {
            let noise: Vec<f64> = (0..x.len()).map(|_| math::normal(rng)).collect();
            let scale = magnitude * rms(x) / rms(&noise).max(f64::MIN_POSITIVE);
            x.iter().zip(&noise).map(|(s, n)| s + scale * n).collect()
        }
        PerturbKind::TimeWarp => {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            let factor = (1.0 + magnitude * u).max(0.05);
            let new_len = (math::round(x.len() as f64 * factor) as usize).max(1);
            (0..new_len)
                .map(|i| {
                    let pos = i as f64 / factor;
                    let i0 = math::floor(pos) as usize;
                    if i0 + 1 >= x.len() {
                        x[x.len() - 1]
                    } else {
                        let frac = pos - i0 as f64;
                        x[i0] * (1.0 - frac) + x[i0 + 1] * frac
                    }
                })
                .collect()
        }
        PerturbKind::SegmentSwap => {
            let seg = x.len() / SWAP_SEGMENTS;
            let mut order: Vec<usize> = (0..SWAP_SEGMENTS).collect();
            let swaps = libm::ceil(magnitude.min(1.0) * (SWAP_SEGMENTS / 2) as f64) as usize;
            for _ in 0..swaps {
                let i = rng.gen_range(0..SWAP_SEGMENTS - 1);
                order.swap(i, i + 1);
            }
            let mut out = Vec::with_capacity(x.len());
            for &s in &order {
                out.extend_from_slice(&x[s * seg..(s + 1) * seg]);
            }
            out.extend_from_slice(&x[SWAP_SEGMENTS * seg..]);
            out
        }
    };
    AudioClip::from_clipped(out, clip.sample_rate_hz())
}
