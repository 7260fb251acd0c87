//! On-disk datasets: the synthetic benchmark and EndoVis-style folders.
//!
//! Layout under `<root>/<split>/`:
//! `images/<id>.png`, `masks/<k>/<id>.png` (every class, 0/255),
//! `audio/<k>/<id>.wav` (present classes), `shapes/<id>.json`, and
//! `manifest.json` with a SHA-256 over every listed file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use asiseg_core::audio::AudioClip;
use asiseg_core::decoder::BinaryMask;
use asiseg_core::fusion::RgbImage;
use asiseg_core::knowledge::fnv1a;
use asiseg_core::synth::{self, ShapeParams, Split, SynthConfig};

use crate::error::{AppError, AppResult};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Vec<u8>,
    pub image: RgbImage,
    pub masks: Vec<BinaryMask>,
    pub present_classes: Vec<usize>,
    /// Recorded commands keyed by class.
    pub audio: BTreeMap<usize, AudioClip>,
    /// Empty for frames that were not generated.
    pub shapes: Vec<ShapeParams>,
    /// Seed of the synthesized commands for this frame.
    pub command_seed: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub split: String,
    pub num_classes: usize,
    pub ids: Vec<String>,
    /// Lower-case hex SHA-256.
    pub checksum: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ShapeRecord {
    class_index: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ShapeFile {
    command_seed: u64,
    shapes: Vec<ShapeRecord>,
}

/// Mirror of [`SynthConfig`] for `config.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfigFile {
    pub num_classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub max_instruments_per_frame: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl From<SynthConfig> for SynthConfigFile {
    fn from(c: SynthConfig) -> Self {
        Self {
            num_classes: c.num_classes,
            image_size: c.image_size,
            n_train: c.n_train,
            n_val: c.n_val,
            max_instruments_per_frame: c.max_instruments_per_frame,
            noise_level: c.noise_level,
            seed: c.seed,
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Generates one split in memory. Commands are PCM16-quantized so the result
/// equals what a write/load round trip produces.
pub fn synth_split(config: &SynthConfig, split: Split) -> AppResult<Dataset> {
    config.validate()?;
    let n = match split {
        Split::Train => config.n_train,
        Split::Val => config.n_val,
    };
    let samples = (0..n)
        .into_par_iter()
        .map(|i| -> AppResult<Sample> {
            let scene = synth::generate_sample(config, split, i)?;
            let mut audio = BTreeMap::new();
            for &k in &scene.present_classes {
                let clip = synth::synth_command_audio(k, config.num_classes, synth::audio_seed(scene.seed, k), 0.0)?;
                audio.insert(k, io::quantize_pcm16(&clip));
            }
            Ok(Sample {
                id: sample_id(i),
                image: RgbImage::from_u8(scene.size, scene.size, &scene.image)?,
                rgb: scene.image,
                masks: scene.masks,
                present_classes: scene.present_classes,
                audio,
                shapes: scene.shapes,
                command_seed: scene.seed,
            })
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok(Dataset {
        split: split.name().into(),
        num_classes: config.num_classes,
        samples,
        warnings: Vec::new(),
    })
}

/// Writes both splits plus `config.json` under `root`.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> AppResult<Vec<DatasetManifest>> {
    let cfg_path = root.join("config.json");
    fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
    write_json(&cfg_path, &SynthConfigFile::from(*config))?;
    [Split::Train, Split::Val]
        .into_iter()
        .map(|s| write_dataset(&synth_split(config, s)?, root))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e))
}

/// Paths (relative to the split directory) of every file a sample owns.
fn sample_files(id: &str, num_classes: usize, audio_classes: &[usize], with_shapes: bool) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from(format!("images/{id}.png"))];
    files.extend((0..num_classes).map(|k| PathBuf::from(format!("masks/{k}/{id}.png"))));
    files.extend(audio_classes.iter().map(|k| PathBuf::from(format!("audio/{k}/{id}.wav"))));
    if with_shapes {
        files.push(PathBuf::from(format!("shapes/{id}.json")));
    }
    files
}

fn listed_files(dir: &Path, ids: &[String], num_classes: usize) -> AppResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for id in ids {
        let audio: Vec<usize> = (0..num_classes)
            .filter(|k| dir.join(format!("audio/{k}/{id}.wav")).exists())
            .collect();
        let with_shapes = dir.join(format!("shapes/{id}.json")).exists();
        files.extend(sample_files(id, num_classes, &audio, with_shapes));
    }
    Ok(files)
}

/// SHA-256 over `path\0len\0bytes` of every file, in the given order.
pub fn checksum_files(dir: &Path, files: &[PathBuf]) -> AppResult<String> {
    let mut h = Sha256::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| AppError::io(&path, e))?;
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> AppResult<DatasetManifest> {
    let dir = root.join(&ds.split);
    ds.samples.par_iter().try_for_each(|s| -> AppResult<()> {
        io::write_rgb_png(&dir.join(format!("images/{}.png", s.id)), s.width(), s.height(), &s.rgb)?;
        for (k, m) in s.masks.iter().enumerate() {
            io::write_mask_png(&dir.join(format!("masks/{k}/{}.png", s.id)), m)?;
        }
        for (k, clip) in &s.audio {
            io::write_wav(&dir.join(format!("audio/{k}/{}.wav", s.id)), clip)?;
        }
        if !s.shapes.is_empty() {
            let file = ShapeFile {
                command_seed: s.command_seed,
                shapes: s
                    .shapes
                    .iter()
                    .map(|p| ShapeRecord {
                        class_index: p.class_index,
                        cx: p.cx,
                        cy: p.cy,
                        radius: p.radius,
                        rotation: p.rotation,
                    })
                    .collect(),
            };
            let path = dir.join(format!("shapes/{}.json", s.id));
            fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| AppError::io(&path, e))?;
            write_json(&path, &file)?;
        }
        Ok(())
    })?;
    let ids: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();
    let files = listed_files(&dir, &ids, ds.num_classes)?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split: ds.split.clone(),
        num_classes: ds.num_classes,
        checksum: checksum_files(&dir, &files)?,
        ids,
    };
    fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path, split: &str) -> AppResult<DatasetManifest> {
    let path = root.join(split).join(MANIFEST_FILE);
    let mut m: DatasetManifest = read_json(&path)?;
    m.root = root.to_path_buf();
    if m.split != split {
        return Err(AppError::Manifest(format!(
            "{} describes split {:?}, expected {split:?}",
            path.display(),
            m.split
        )));
    }
    Ok(m)
}

/// Recomputes the checksum; any missing or altered file is a manifest error.
pub fn verify_manifest(m: &DatasetManifest) -> AppResult<()> {
    let dir = m.root.join(&m.split);
    for id in &m.ids {
        for f in sample_files(id, m.num_classes, &[], false) {
            if !dir.join(&f).exists() {
                return Err(AppError::Manifest(format!("missing file {}", dir.join(f).display())));
            }
        }
    }
    let files = listed_files(&dir, &m.ids, m.num_classes)?;
    let actual = checksum_files(&dir, &files)?;
    if actual != m.checksum {
        return Err(AppError::Manifest(format!(
            "checksum mismatch in {}: manifest {}, files {actual}",
            dir.display(),
            m.checksum
        )));
    }
    Ok(())
}

fn load_sample(dir: &Path, id: &str, num_classes: usize) -> AppResult<Sample> {
    let img_path = dir.join(format!("images/{id}.png"));
    if !img_path.exists() {
        return Err(AppError::Manifest(format!("missing image {}", img_path.display())));
    }
    let (h, w, rgb) = io::read_rgb_png(&img_path)?;
    let mut masks = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let p = dir.join(format!("masks/{k}/{id}.png"));
        if !p.exists() {
            return Err(AppError::Manifest(format!("missing mask {} for frame {id}", p.display())));
        }
        let m = io::read_mask_png(&p)?;
        if m.shape() != (h, w) {
            return Err(asiseg_core::Error::Shape(format!(
                "{}: mask {:?} vs image {h}x{w}",
                p.display(),
                m.shape()
            ))
            .into());
        }
        masks.push(m);
    }
    let mut audio = BTreeMap::new();
    for k in 0..num_classes {
        let p = dir.join(format!("audio/{k}/{id}.wav"));
        if p.exists() {
            audio.insert(k, io::read_wav(&p)?);
        }
    }
    let shape_path = dir.join(format!("shapes/{id}.json"));
    let (shapes, command_seed) = if shape_path.exists() {
        let f: ShapeFile = read_json(&shape_path)?;
        let shapes = f
            .shapes
            .into_iter()
            .map(|r| ShapeParams {
                class_index: r.class_index,
                cx: r.cx,
                cy: r.cy,
                radius: r.radius,
                rotation: r.rotation,
            })
            .collect();
        (shapes, f.command_seed)
    } else {
        (Vec::new(), fnv1a(id.as_bytes()))
    };
    Ok(Sample {
        id: id.to_string(),
        image: RgbImage::from_u8(h, w, &rgb)?,
        rgb,
        present_classes: (0..num_classes).filter(|&k| !masks[k].is_empty()).collect(),
        masks,
        audio,
        shapes,
        command_seed,
    })
}

fn load_ids(dir: &Path, split: &str, ids: &[String], num_classes: usize) -> AppResult<Dataset> {
    let samples = ids
        .par_iter()
        .map(|id| load_sample(dir, id, num_classes))
        .collect::<AppResult<Vec<_>>>()?;
    let mut warnings = Vec::new();
    if samples.is_empty() {
        warnings.push(format!("split {split:?} lists no frames"));
    }
    Ok(Dataset {
        split: split.to_string(),
        num_classes,
        samples,
        warnings,
    })
}

/// Loads a split written by [`write_dataset`], verifying its checksum.
pub fn load_dataset(root: &Path, split: &str) -> AppResult<Dataset> {
    let m = read_manifest(root, split)?;
    verify_manifest(&m)?;
    load_ids(&root.join(split), split, &m.ids, m.num_classes)
}

/// Frame ids from a split file: one per line, blank lines and `#` comments
/// ignored.
pub fn read_split_file(path: &Path) -> AppResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Loads EndoVis-style frames listed in `split_file` from `<root>/<split>/`,
/// where `split` is the split file's stem. The class count is the number of
/// `masks/<k>` directories.
pub fn load_endovis(root: &Path, split_file: &Path) -> AppResult<Dataset> {
    let split = split_file
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| AppError::Manifest(format!("bad split file name {}", split_file.display())))?
        .to_string();
    let ids = read_split_file(split_file)?;
    let dir = root.join(&split);
    let mut num_classes = 0;
    while dir.join(format!("masks/{num_classes}")).is_dir() {
        num_classes += 1;
    }
    if num_classes == 0 && !ids.is_empty() {
        return Err(AppError::Manifest(format!("no masks/<k> directories under {}", dir.display())));
    }
    load_ids(&dir, &split, &ids, num_classes)
}

/// Perturbation applied to a command before recognition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CommandCondition {
    /// Synthesized mispronunciation level; `0` uses the recorded clip when
    /// there is one.
    pub mispronounce: f64,
    pub perturb: Option<(asiseg_core::audio::PerturbKind, f64)>,
}

impl CommandCondition {
    pub const CLEAN: CommandCondition = CommandCondition {
        mispronounce: 0.0,
        perturb: None,
    };
}

impl Sample {
    /// The command for class `k` under `cond`.
    pub fn command(&self, k: usize, num_classes: usize, cond: &CommandCondition) -> AppResult<AudioClip> {
        use rand::SeedableRng;
        let seed = synth::audio_seed(self.command_seed, k);
        let clip = match self.audio.get(&k) {
            Some(c) if cond.mispronounce == 0.0 => c.clone(),
            _ => io::quantize_pcm16(&synth::synth_command_audio(k, num_classes, seed, cond.mispronounce)?),
        };
        match cond.perturb {
            Some((kind, m)) if m > 0.0 => {
                let salt = kind.name().bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(u64::from(b)));
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(synth::mix_seed(seed, salt ^ m.to_bits()));
                let out = asiseg_core::audio::perturb_audio(&clip, kind, m, &mut rng)?;
                Ok(io::quantize_pcm16(&out))
            }
            _ => Ok(clip),
        }
    }
}
