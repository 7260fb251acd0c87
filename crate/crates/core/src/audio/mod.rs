//! Audio front end: waveform → log-mel spectrogram → normalized mel →
//! embedding → intent class.

mod encoder;
mod fft;
mod perturb;

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

pub use encoder::{
    classify_intent, AudioClassifier, AudioEmbedder, AudioEncoder, IntentLabel, AUDIO_EMBED_DIM,
};
pub use fft::Fft;
pub use perturb::{noise_magnitude_for_snr, perturb_audio, snr_db, PerturbKind};

use crate::tensor::Matrix;
use crate::{math, Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::SampleRate(sample_rate_hz));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        if let Some(i) = samples.iter().position(|v| v.abs() > 1.0) {
            return Err(Error::Validation(format!(
                "audio sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Clamps to `[-1, 1]` instead of rejecting out-of-range samples.
    pub fn from_clipped(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(
            samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            sample_rate_hz,
        )
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    /// Power floor applied before `log10`.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_samples: 400,
            hop_samples: 160,
            fft_size: 512,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_mels >= 1
            && self.hop_samples > 0
            && self.hop_samples <= self.window_samples
            && self.window_samples <= self.fft_size
            && self.fft_size.is_power_of_two()
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mel configuration {self:?}")))
        }
    }

    /// Number of frames for a clip of `len` samples under center padding.
    pub fn frame_count(&self, len: usize) -> usize {
        1 + len / self.hop_samples
    }

    /// Log value of a silent bin.
    pub fn log_floor_value(&self) -> f64 {
        math::log10(self.log_floor)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * math::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (math::powf(10.0, mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters, channel order.
pub fn mel_center_frequencies(n_mels: usize, sample_rate_hz: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    (1..=n_mels)
        .map(|m| mel_to_hz(top * m as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK-scale filterbank, `n_mels × (fft_size/2 + 1)`, unit peaks.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate_hz: u32) -> Matrix {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|m| mel_to_hz(top * m as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = fft_size / 2 + 1;
    let bin_hz = sample_rate_hz as f64 / fft_size as f64;
    Matrix::from_fn(n_mels, bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f <= mid {
            (f - lo) / (mid - lo)
        } else if f > mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    })
}

/// Periodic Hann window of `len` samples.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * math::cos(2.0 * PI * i as f64 / len as f64))
        .collect()
}

/// Log-mel matrix, `n_mels × frames`, `log10` power units.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

/// Reusable analysis state (window, filterbank, FFT tables).
#[derive(Clone, Debug)]
pub struct MelAnalyzer {
    config: MelConfig,
    window: Vec<f64>,
    filters: Matrix,
    fft: Fft,
}

impl MelAnalyzer {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            window: hann_window(config.window_samples),
            filters: mel_filterbank(config.n_mels, config.fft_size, SAMPLE_RATE_HZ),
            fft: Fft::new(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filters(&self) -> &Matrix {
        &self.filters
    }

    /// Windowed analysis frame `t`, zero padded by `fft_size / 2` on each side
    /// of the clip, window centered within the FFT span.
    pub fn frame(&self, samples: &[f64], t: usize) -> Vec<f64> {
        let c = &self.config;
        let pad = c.fft_size / 2;
        let offset = (c.fft_size - c.window_samples) / 2;
        let mut frame = alloc::vec![0.0; c.fft_size];
        for (i, w) in self.window.iter().enumerate() {
            let padded = t * c.hop_samples + offset + i;
            if padded >= pad && padded - pad < samples.len() {
                frame[offset + i] = samples[padded - pad] * w;
            }
        }
        frame
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate_hz() != SAMPLE_RATE_HZ {
            return Err(Error::SampleRate(clip.sample_rate_hz()));
        }
        let c = &self.config;
        if clip.len() < c.window_samples {
            return Err(Error::InputTooShort {
                samples: clip.len(),
                window: c.window_samples,
            });
        }
        let frames = c.frame_count(clip.len());
        let mut values = Matrix::zeros(c.n_mels, frames);
        for t in 0..frames {
            let power = self.fft.power_spectrum(&self.frame(clip.samples(), t));
            for m in 0..c.n_mels {
                let e: f64 = self
                    .filters
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                values.set(m, t, math::log10(e.max(c.log_floor)));
            }
        }
        Ok(MelSpectrogram {
            values,
            config: *c,
        })
    }
}

/// One-shot log-mel transform.
pub fn compute_mel(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(*config)?.compute(clip)
}

/// Dataset-level statistics for mel normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub min_val: f64,
    pub max_val: f64,
    pub n_mels: usize,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.min_val.is_finite() && self.max_val.is_finite()) {
            return Err(Error::NonFinite("normalization statistics".into()));
        }
        if self.min_val >= self.max_val {
            return Err(Error::DegenerateRange(self.min_val));
        }
        if self.mu < self.min_val || self.mu > self.max_val {
            return Err(Error::Validation(format!(
                "mean {} outside [{}, {}]",
                self.mu, self.min_val, self.max_val
            )));
        }
        Ok(())
    }
}

/// Mean over every entry of every spectrogram, plus global extrema.
pub fn fit_norm_stats(mels: &[MelSpectrogram]) -> Result<NormStats> {
    let first = mels.first().ok_or(Error::EmptyDataset)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut min_val = f64::INFINITY;
    let mut max_val = f64::NEG_INFINITY;
    for mel in mels {
        if mel.n_mels() != first.n_mels() {
            return Err(Error::Shape(format!(
                "mel channel count {} vs {}",
                mel.n_mels(),
                first.n_mels()
            )));
        }
        for &v in mel.values.data() {
            sum += v;
            count += 1;
            min_val = min_val.min(v);
            max_val = max_val.max(v);
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(NormStats {
        mu: sum / count as f64,
        min_val,
        max_val,
        n_mels: first.n_mels(),
    })
}

/// Which offset the normalization subtracts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    /// `2·(x − μ)/(max − min) − 1`: the dataset mean maps to −1.
    #[default]
    MeanAnchored,
    /// `2·(x − min)/(max − min) − 1`: `[min, max]` maps onto `[−1, 1]`.
    MinAnchored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMel {
    pub values: Matrix,
    pub stats_used: NormStats,
}

impl NormalizedMel {
    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }
}

pub fn normalize_mel(mel: &MelSpectrogram, stats: &NormStats, mode: NormMode) -> Result<NormalizedMel> {
    if stats.min_val >= stats.max_val {
        return Err(Error::DegenerateRange(stats.min_val));
    }
    let range = stats.max_val - stats.min_val;
    let anchor = match mode {
        NormMode::MeanAnchored => stats.mu,
        NormMode::MinAnchored => stats.min_val,
    };
    Ok(NormalizedMel {
        values: mel.values.map(|x| 2.0 * (x - anchor) / range - 1.0),
        stats_used: *stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mel_of(rows: usize, data: Vec<f64>) -> MelSpectrogram {
        let cols = data.len() / rows;
        MelSpectrogram {
            values: Matrix::new(rows, cols, data).unwrap(),
            config: MelConfig::default(),
        }
    }

    fn tone(freq: f64, len: usize) -> AudioClip {
        let s = (0..len)
            .map(|i| 0.5 * math::sin(2.0 * PI * freq * i as f64 / 16_000.0))
            .collect();
        AudioClip::new(s, 16_000).unwrap()
    }

    #[test]
    fn one_second_default_clip_has_101_frames() {
        // 1 + floor(16000 / 160)
        let mel = compute_mel(&tone(300.0, 16_000), &MelConfig::default()).unwrap();
        assert_eq!(mel.values.shape(), (80, 101));
    }

    #[test]
    fn silence_sits_on_the_log_floor() {
        let clip = AudioClip::new(vec![0.0; 4000], 16_000).unwrap();
        let mel = compute_mel(&clip, &MelConfig::default()).unwrap();
        assert!(mel.values.data().iter().all(|&v| v == -10.0));
        assert_eq!(MelConfig::default().log_floor_value(), -10.0);
    }

    #[test]
    fn short_and_wrong_rate_clips_are_rejected() {
        let short = AudioClip::new(vec![0.0; 399], 16_000).unwrap();
        assert_eq!(
            compute_mel(&short, &MelConfig::default()),
            Err(Error::InputTooShort {
                samples: 399,
                window: 400
            })
        );
        assert_eq!(AudioClip::new(vec![0.0; 800], 8_000), Err(Error::SampleRate(8_000)));
        assert!(AudioClip::new(vec![1.5], 16_000).is_err());
    }

    #[test]
    fn tone_peaks_in_the_nearest_channel() {
        let cfg = MelConfig::default();
        let mel = compute_mel(&tone(440.0, 16_000), &cfg).unwrap();
        let centers = mel_center_frequencies(cfg.n_mels, 16_000);
        let nearest = (0..cfg.n_mels)
            .min_by(|&a, &b| {
                (centers[a] - 440.0)
                    .abs()
                    .partial_cmp(&(centers[b] - 440.0).abs())
                    .unwrap()
            })
            .unwrap();
        for t in 0..mel.frames() {
            let argmax = (0..cfg.n_mels)
                .max_by(|&a, &b| mel.values.get(a, t).partial_cmp(&mel.values.get(b, t)).unwrap())
                .unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn delaying_by_one_hop_shifts_one_frame() {
        let cfg = MelConfig::default();
        let base = tone(523.0, 8000);
        let mut delayed = vec![0.0; cfg.hop_samples];
        delayed.extend_from_slice(base.samples());
        let delayed = AudioClip::new(delayed, 16_000).unwrap();
        let a = compute_mel(&base, &cfg).unwrap();
        let b = compute_mel(&delayed, &cfg).unwrap();
        assert_eq!(b.frames(), a.frames() + 1);
        for t in 0..a.frames() {
            for m in 0..cfg.n_mels {
                assert!((a.values.get(m, t) - b.values.get(m, t + 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn norm_stats_examples() {
        let s = fit_norm_stats(&[mel_of(1, vec![0.0, 4.0])]).unwrap();
        assert_eq!((s.mu, s.min_val, s.max_val), (2.0, 0.0, 4.0));
        let s = fit_norm_stats(&[mel_of(1, vec![0.0, 2.0]), mel_of(1, vec![4.0, 6.0])]).unwrap();
        assert_eq!((s.mu, s.min_val, s.max_val), (3.0, 0.0, 6.0));
        assert_eq!(fit_norm_stats(&[]), Err(Error::EmptyDataset));

        let flat = fit_norm_stats(&[mel_of(1, vec![3.0, 3.0])]).unwrap();
        assert_eq!(
            normalize_mel(&mel_of(1, vec![3.0]), &flat, NormMode::MeanAnchored),
            Err(Error::DegenerateRange(3.0))
        );
    }

    #[test]
    fn normalization_follows_the_mean_anchored_formula() {
        let stats = NormStats {
            mu: 2.0,
            min_val: 0.0,
            max_val: 4.0,
            n_mels: 1,
        };
        let n = normalize_mel(&mel_of(1, vec![4.0, 2.0, 0.0]), &stats, NormMode::MeanAnchored).unwrap();
        assert_eq!(n.values.data(), &[0.0, -1.0, -2.0]);
        let n = normalize_mel(&mel_of(1, vec![4.0, 2.0, 0.0]), &stats, NormMode::MinAnchored).unwrap();
        assert_eq!(n.values.data(), &[1.0, 0.0, -1.0]);
    }
}
