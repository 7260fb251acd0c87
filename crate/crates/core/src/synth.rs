//! Deterministic synthetic benchmark: polygon "instruments" on a tissue-like
//! background, and tone-signature audio commands.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{perturb_audio, AudioClip, PerturbKind, SAMPLE_RATE_HZ};
use crate::decoder::BinaryMask;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub max_instruments_per_frame: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            image_size: 64,
            n_train: 300,
            n_val: 60,
            max_instruments_per_frame: 3,
            noise_level: 0.03,
            seed: 7,
        }
    }
}

pub const ENCODER_STRIDE: usize = 8;
/// Smallest visible area, in pixels, a placed instrument must keep.
const MIN_VISIBLE: usize = 40;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.image_size == 0 || self.image_size % ENCODER_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the encoder stride {ENCODER_STRIDE}",
                self.image_size
            )));
        }
        if self.max_instruments_per_frame == 0 {
            return Err(Error::Config("max_instruments_per_frame must be at least 1".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config(format!("noise_level {}", self.noise_level)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(config: &SynthConfig, split: Split, index: usize) -> u64 {
    mix_seed(mix_seed(config.seed, split.salt()), index as u64)
}

pub fn audio_seed(sample_seed: u64, class_index: usize) -> u64 {
    mix_seed(sample_seed ^ 0xa0d1_0000, class_index as u64)
}

/// One placed instrument: a regular polygon with `3 + class_index` vertices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub class_index: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
}

impl ShapeParams {
    pub fn vertices(&self) -> Vec<(f64, f64)> {
        let n = 3 + self.class_index;
        (0..n)
            .map(|i| {
                let a = self.rotation + 2.0 * PI * i as f64 / n as f64;
                (self.cx + self.radius * math::cos(a), self.cy + self.radius * math::sin(a))
            })
            .collect()
    }

    /// Even-odd test at the pixel centre.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let v = self.vertices();
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (xi, yi) = v[i];
            let (xj, yj) = v[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

/// Per-class masks with later shapes occluding earlier ones.
pub fn render_masks(shapes: &[ShapeParams], num_classes: usize, size: usize) -> Result<Vec<BinaryMask>> {
    let mut owner: Vec<Option<usize>> = alloc::vec![None; size * size];
    for s in shapes {
        if s.class_index >= num_classes {
            return Err(Error::Argument(format!(
                "shape class {} outside 0..{num_classes}",
                s.class_index
            )));
        }
        for y in 0..size {
            for x in 0..size {
                if s.contains(y, x) {
                    owner[y * size + x] = Some(s.class_index);
                }
            }
        }
    }
    Ok((0..num_classes)
        .map(|k| BinaryMask::from_fn(size, size, |y, x| owner[y * size + x] == Some(k)))
        .collect())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - math::floor(h)) * 6.0;
    let i = math::floor(h6) as usize % 6;
    let f = h6 - math::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base colour of class `k`: hues spread evenly, offset away from the
/// reddish background.
pub fn class_color(k: usize, num_classes: usize) -> [f64; 3] {
    let hue = 0.08 + 0.84 * k as f64 / num_classes.max(1) as f64;
    hsv_to_rgb(hue, 0.75, 0.95)
}

fn stripe(k: usize, y: usize, x: usize) -> f64 {
    let angle = 0.4 + 0.7 * k as f64;
    let period = 4.0 + (k % 3) as f64 * 2.0;
    let u = x as f64 * math::cos(angle) + y as f64 * math::sin(angle);
    0.8 + 0.2 * math::sin(2.0 * PI * u / period)
}

/// A generated frame. `image` is row-major interleaved RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub index: usize,
    pub seed: u64,
    pub size: usize,
    pub image: Vec<u8>,
    pub masks: Vec<BinaryMask>,
    pub present_classes: Vec<usize>,
    pub shapes: Vec<ShapeParams>,
}

fn to_u8(v: f64) -> u8 {
    math::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

pub fn generate_sample(config: &SynthConfig, split: Split, index: usize) -> Result<SceneSample> {
    config.validate()?;
    let seed = sample_seed(config, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let sz = size as f64;
    let max_n = config.max_instruments_per_frame.min(config.num_classes);
    let n = rng.gen_range(1..=max_n);
    let mut classes: Vec<usize> = (0..config.num_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(n);

    let mut shapes: Vec<ShapeParams> = Vec::with_capacity(n);
    for &k in &classes {
        let mut placed = None;
        for _ in 0..50 {
            let radius = sz * rng.gen_range(0.14..0.28);
            let s = ShapeParams {
                class_index: k,
                cx: rng.gen_range(radius..sz - radius),
                cy: rng.gen_range(radius..sz - radius),
                radius,
                rotation: rng.gen_range(0.0..2.0 * PI),
            };
            let mut trial = shapes.clone();
            trial.push(s);
            let masks = render_masks(&trial, config.num_classes, size)?;
            if trial.iter().all(|t| masks[t.class_index].count() >= MIN_VISIBLE) {
                placed = Some(s);
                break;
            }
        }
        if let Some(s) = placed {
            shapes.push(s);
        }
    }
    let masks = render_masks(&shapes, config.num_classes, size)?;
    let present_classes: Vec<usize> = (0..config.num_classes).filter(|&k| !masks[k].is_empty()).collect();

    let tint = [rng.gen_range(0.30..0.45), rng.gen_range(0.08..0.16), rng.gen_range(0.08..0.16)];
    let (fx, fy, phase) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..2.0 * PI));
    let mut image = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let owner = present_classes.iter().copied().find(|&k| masks[k].get(y, x));
            let rgb = match owner {
                Some(k) => {
                    let base = class_color(k, config.num_classes);
                    let s = stripe(k, y, x);
                    [base[0] * s, base[1] * s, base[2] * s]
                }
                None => {
                    let wave = 0.85
                        + 0.15 * math::sin(2.0 * PI * (fx * x as f64 + fy * y as f64) / sz + phase);
                    [tint[0] * wave, tint[1] * wave, tint[2] * wave]
                }
            };
            for c in rgb {
                image.push(to_u8(c + config.noise_level * math::normal(&mut rng)));
            }
        }
    }
    Ok(SceneSample {
        index,
        seed,
        size,
        image,
        masks,
        present_classes,
        shapes,
    })
}

pub fn generate_split(config: &SynthConfig, split: Split) -> Result<Vec<SceneSample>> {
    let n = match split {
        Split::Train => config.n_train,
        Split::Val => config.n_val,
    };
    (0..n).map(|i| generate_sample(config, split, i)).collect()
}

pub const COMMAND_SECONDS: f64 = 1.0;
const HARMONICS: usize = 4;

/// Fundamental frequency of the class command, Hz.
pub fn command_fundamental(class_index: usize) -> f64 {
    180.0 * math::powf(1.25, class_index as f64)
}

/// Relative amplitudes of harmonics 1..=4; the fundamental always dominates.
pub fn harmonic_pattern(class_index: usize) -> [f64; HARMONICS] {
    let mut amps = [1.0, 0.15, 0.15, 0.15];
    for (h, a) in amps.iter_mut().enumerate().skip(1) {
        if (class_index >> (h - 1)) & 1 == 1 {
            *a = 0.6;
        }
    }
    amps
}

/// A one-second command: the class tone signature under a syllable-like
/// envelope, with mild per-seed speaker variation and background noise.
/// `level > 0` adds pitch jitter and segment swaps.
pub fn synth_command_audio(class_index: usize, num_classes: usize, seed: u64, level: f64) -> Result<AudioClip> {
    if class_index >= num_classes {
        return Err(Error::Argument(format!(
            "class {class_index} outside 0..{num_classes}"
        )));
    }
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::Argument(format!("mispronounce level {level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = f64::from(SAMPLE_RATE_HZ);
    let n = (COMMAND_SECONDS * sr) as usize;
    let speaker = 1.0 + rng.gen_range(-0.02..0.02);
    let gain = rng.gen_range(0.45..0.75);
    let onset = rng.gen_range(0.05..0.15);
    let length = rng.gen_range(0.6..0.75);
    let f0 = command_fundamental(class_index) * speaker;
    let amps = harmonic_pattern(class_index);
    // jitter is drawn even at level 0 so the canonical draw sequence is shared
    let segments = 8;
    let jitter: Vec<f64> = (0..segments).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut phase = 0.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let rel = (t - onset) / length;
        let env = if (0.0..1.0).contains(&rel) { math::sin(PI * rel) } else { 0.0 };
        let seg = ((rel.clamp(0.0, 0.999)) * segments as f64) as usize;
        let f = f0 * (1.0 + 0.1 * level * jitter[seg]);
        phase += 2.0 * PI * f / sr;
        let tone: f64 = amps
            .iter()
            .enumerate()
            .map(|(h, a)| a * math::sin((h + 1) as f64 * phase))
            .sum();
        samples.push(gain * env * tone / 2.2 + 0.005 * math::normal(&mut rng));
    }
    let clip = AudioClip::from_clipped(samples, SAMPLE_RATE_HZ)?;
    if level > 0.0 {
        perturb_audio(&clip, PerturbKind::SegmentSwap, level, &mut rng)
    } else {
        Ok(clip)
    }
}
