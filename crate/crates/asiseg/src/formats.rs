//! JSON forms of the description bank, normalization statistics, model
//! configuration and metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use asiseg_core::audio::{MelConfig, NormMode, NormStats};
use asiseg_core::decoder::DecoderConfig;
use asiseg_core::knowledge::{DescriptionBank, InstrumentDescription};
use asiseg_core::metrics::MetricsReport;
use asiseg_core::model::{ModelConfig, Variant};
use asiseg_core::prompt::BackgroundSource;

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankEntry {
    pub class_index: usize,
    pub class_name: String,
    pub description: String,
}

pub fn bank_to_entries(bank: &DescriptionBank) -> Vec<BankEntry> {
    bank.entries()
        .iter()
        .map(|e| BankEntry {
            class_index: e.class_index,
            class_name: e.class_name.clone(),
            description: e.description.clone(),
        })
        .collect()
}

pub fn bank_from_entries(entries: Vec<BankEntry>, expected_classes: Option<usize>) -> AppResult<DescriptionBank> {
    let entries = entries
        .into_iter()
        .map(|e| InstrumentDescription {
            class_index: e.class_index,
            class_name: e.class_name,
            description: e.description,
        })
        .collect();
    Ok(DescriptionBank::new(entries, expected_classes)?)
}

/// Parses a bank file: a JSON array of `{class_index, class_name, description}`.
pub fn parse_bank(text: &str, expected_classes: Option<usize>) -> AppResult<DescriptionBank> {
    let entries: Vec<BankEntry> =
        serde_json::from_str(text).map_err(|e| asiseg_core::Error::Schema(e.to_string()))?;
    bank_from_entries(entries, expected_classes)
}

pub fn read_bank(path: &Path, expected_classes: Option<usize>) -> AppResult<DescriptionBank> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_bank(&text, expected_classes)
}

pub fn bank_json(bank: &DescriptionBank) -> String {
    serde_json::to_string_pretty(&bank_to_entries(bank)).expect("bank serializes")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStatsFile {
    pub mu: f64,
    pub min: f64,
    pub max: f64,
    pub n_mels: usize,
}

impl From<NormStats> for NormStatsFile {
    fn from(s: NormStats) -> Self {
        Self {
            mu: s.mu,
            min: s.min_val,
            max: s.max_val,
            n_mels: s.n_mels,
        }
    }
}

impl NormStatsFile {
    pub fn into_stats(self) -> AppResult<NormStats> {
        let s = NormStats {
            mu: self.mu,
            min_val: self.min,
            max_val: self.max,
            n_mels: self.n_mels,
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn norm_stats_json(stats: &NormStats) -> String {
    serde_json::to_string(&NormStatsFile::from(*stats)).expect("stats serialize")
}

pub fn parse_norm_stats(text: &str) -> AppResult<NormStats> {
    let f: NormStatsFile = serde_json::from_str(text).map_err(|e| asiseg_core::Error::Schema(e.to_string()))?;
    f.into_stats()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfigFile {
    pub n_mels: usize,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub log_floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfigFile {
    pub dim: usize,
    pub prompt_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub cross_dim: usize,
    pub mlp_dim: usize,
    pub up_channels: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFile {
    pub use_bank: bool,
    pub contrastive: bool,
    /// `"refined"` or `"raw"`.
    pub background: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfigFile {
    pub num_classes: usize,
    pub dim: usize,
    pub key_dim: usize,
    pub patch: usize,
    pub encoder_blocks: usize,
    pub mel: MelConfigFile,
    /// `"mean_anchored"` or `"min_anchored"`.
    pub norm_mode: String,
    pub decoder: DecoderConfigFile,
    pub variant: VariantFile,
}

impl From<&ModelConfig> for ModelConfigFile {
    fn from(c: &ModelConfig) -> Self {
        let m = c.mel;
        let d = c.decoder;
        Self {
            num_classes: c.num_classes,
            dim: c.dim,
            key_dim: c.key_dim,
            patch: c.patch,
            encoder_blocks: c.encoder_blocks,
            mel: MelConfigFile {
                n_mels: m.n_mels,
                window_samples: m.window_samples,
                hop_samples: m.hop_samples,
                fft_size: m.fft_size,
                log_floor: m.log_floor,
            },
            norm_mode: match c.norm_mode {
                NormMode::MeanAnchored => "mean_anchored",
                NormMode::MinAnchored => "min_anchored",
            }
            .into(),
            decoder: DecoderConfigFile {
                dim: d.dim,
                prompt_dim: d.prompt_dim,
                layers: d.layers,
                heads: d.heads,
                cross_dim: d.cross_dim,
                mlp_dim: d.mlp_dim,
                up_channels: d.up_channels,
            },
            variant: VariantFile {
                use_bank: c.variant.use_bank,
                contrastive: c.variant.contrastive,
                background: match c.variant.background {
                    BackgroundSource::Refined => "refined",
                    BackgroundSource::Raw => "raw",
                }
                .into(),
            },
        }
    }
}

impl ModelConfigFile {
    pub fn into_config(self) -> AppResult<ModelConfig> {
        let bad = |m: String| AppError::from(asiseg_core::Error::Config(m));
        let norm_mode = match self.norm_mode.as_str() {
            "mean_anchored" => NormMode::MeanAnchored,
            "min_anchored" => NormMode::MinAnchored,
            other => return Err(bad(format!("unknown norm_mode {other:?}"))),
        };
        let background = match self.variant.background.as_str() {
            "refined" => BackgroundSource::Refined,
            "raw" => BackgroundSource::Raw,
            other => return Err(bad(format!("unknown background source {other:?}"))),
        };
        let d = self.decoder;
        let cfg = ModelConfig {
            num_classes: self.num_classes,
            dim: self.dim,
            key_dim: self.key_dim,
            patch: self.patch,
            encoder_blocks: self.encoder_blocks,
            mel: MelConfig {
                n_mels: self.mel.n_mels,
                window_samples: self.mel.window_samples,
                hop_samples: self.mel.hop_samples,
                fft_size: self.mel.fft_size,
                log_floor: self.mel.log_floor,
            },
            norm_mode,
            decoder: DecoderConfig {
                dim: d.dim,
                prompt_dim: d.prompt_dim,
                layers: d.layers,
                heads: d.heads,
                cross_dim: d.cross_dim,
                mlp_dim: d.mlp_dim,
                up_channels: d.up_channels,
            },
            variant: Variant {
                use_bank: self.variant.use_bank,
                contrastive: self.variant.contrastive,
                background,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Metrics report as written to JSON. Unevaluated classes are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub mode: String,
    pub challenge_iou: f64,
    pub iou: f64,
    pub mc_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub n_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent_accuracy: Option<f64>,
}

impl MetricsJson {
    pub fn new(mode: &str, r: &MetricsReport, intent_accuracy: Option<f64>) -> Self {
        Self {
            mode: mode.into(),
            challenge_iou: r.challenge_iou,
            iou: r.iou,
            mc_iou: r.mc_iou,
            per_class_iou: r.per_class_iou.clone(),
            n_frames: r.n_frames,
            intent_accuracy,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// Aligned two-column table; `class_names` label the per-class rows.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.clone()),
            ("frames".into(), self.n_frames.to_string()),
            ("challenge_iou".into(), format!("{:.4}", self.challenge_iou)),
            ("iou".into(), format!("{:.4}", self.iou)),
            ("mc_iou".into(), format!("{:.4}", self.mc_iou)),
        ];
        if let Some(a) = self.intent_accuracy {
            rows.push(("intent_accuracy".into(), format!("{a:.4}")));
        }
        for (k, v) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class {k}"));
            rows.push((
                format!("iou[{k}] {name}"),
                v.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
            ));
        }
        let width = rows.iter().map(|(a, _)| a.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(a, b)| format!("{a:<width$}  {b:>8}\n"))
            .collect()
    }
}
