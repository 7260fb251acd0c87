//! PNG and WAV files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use asiseg_core::audio::{AudioClip, SAMPLE_RATE_HZ};
use asiseg_core::decoder::BinaryMask;
use asiseg_core::fusion::RgbImage;

use crate::error::{AppError, AppResult};

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| AppError::io(path, e))?))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> AppResult<()> {
    let mut enc = png::Encoder::new(create(path)?, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| AppError::format(path, e))?;
    writer.write_image_data(data).map_err(|e| AppError::format(path, e))?;
    writer.finish().map_err(|e| AppError::format(path, e))
}

/// Decoded 8-bit pixels with 1, 3 or 4 channels.
struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> AppResult<Decoded> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| AppError::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| AppError::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| AppError::format(path, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(AppError::format(path, "unexpanded palette image")),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(width * height * channels);
    for row in buf[..info.line_size * height].chunks(info.line_size) {
        data.extend_from_slice(&row[..width * channels]);
    }
    Ok(Decoded {
        width,
        height,
        channels,
        data,
    })
}

/// Writes interleaved 8-bit RGB.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> AppResult<()> {
    write_png(path, width, height, png::ColorType::Rgb, rgb)
}

/// Reads any 8/16-bit PNG as interleaved RGB (grey is replicated, alpha dropped).
pub fn read_rgb_png(path: &Path) -> AppResult<(usize, usize, Vec<u8>)> {
    let d = read_png(path)?;
    let rgb = match d.channels {
        1 => d.data.iter().flat_map(|&v| [v, v, v]).collect(),
        2 => d.data.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        3 => d.data,
        _ => d.data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
    };
    Ok((d.height, d.width, rgb))
}

pub fn read_image(path: &Path) -> AppResult<RgbImage> {
    let (h, w, rgb) = read_rgb_png(path)?;
    Ok(RgbImage::from_u8(h, w, &rgb)?)
}

/// Writes a mask as 8-bit greyscale 0/255.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> AppResult<()> {
    let data: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

/// Reads a single-channel mask; `0` is background, `255` (or `1`) foreground.
pub fn read_mask_png(path: &Path) -> AppResult<BinaryMask> {
    let d = read_png(path)?;
    if d.channels != 1 {
        return Err(AppError::format(path, "mask must be single-channel greyscale"));
    }
    let mut data = Vec::with_capacity(d.data.len());
    for &v in &d.data {
        data.push(match v {
            0 => 0,
            1 | 255 => 1,
            other => {
                return Err(asiseg_core::Error::Validation(format!(
                    "{}: mask value {other} is not binary",
                    path.display()
                ))
                .into())
            }
        });
    }
    Ok(BinaryMask::new(d.height, d.width, data)?)
}

/// PCM16 mono at the clip's rate.
pub fn write_wav(path: &Path, clip: &AudioClip) -> AppResult<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(create(path)?, spec).map_err(|e| AppError::format(path, e))?;
    for &s in clip.samples() {
        w.write_sample(pcm16(s)).map_err(|e| AppError::format(path, e))?;
    }
    w.finalize().map_err(|e| AppError::format(path, e))
}

fn pcm16(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Quantizes a clip exactly as a WAV round trip would.
pub fn quantize_pcm16(clip: &AudioClip) -> AudioClip {
    let samples = clip
        .samples()
        .iter()
        .map(|&v| f64::from(pcm16(v)) / 32767.0)
        .collect();
    AudioClip::from_clipped(samples, clip.sample_rate_hz()).expect("quantized samples are in range")
}

pub fn read_wav(path: &Path) -> AppResult<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| AppError::format(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(asiseg_core::Error::SampleRate(spec.sample_rate).into());
    }
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AppError::format(path, "expected mono 16-bit PCM"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| (f64::from(v) / 32767.0).max(-1.0)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AppError::format(path, e))?;
    Ok(AudioClip::new(samples, spec.sample_rate)?)
}
