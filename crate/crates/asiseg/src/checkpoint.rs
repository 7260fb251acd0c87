//! Single-file checkpoints.
//!
//! ```text
//! "ASISEGCK"  u32 format_version  u32 header_len  header JSON
//! u32 blob_count, then per blob: u32 name_len, name, u32 rows, u32 cols,
//! rows·cols f64 (all integers and floats little-endian)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use asiseg_core::model::Model;
use asiseg_core::Matrix;

use crate::error::{AppError, AppResult};
use crate::formats::{bank_from_entries, bank_to_entries, BankEntry, ModelConfigFile, NormStatsFile};

pub const MAGIC: &[u8; 8] = b"ASISEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub train: u64,
    pub data: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub d: usize,
    pub seeds: Seeds,
    pub bank: Vec<BankEntry>,
    pub norm_stats: Option<NormStatsFile>,
    pub model_config: ModelConfigFile,
}

pub fn encode(model: &Model, seeds: Seeds) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        num_classes: model.num_classes(),
        d: model.config.dim,
        seeds,
        bank: bank_to_entries(&model.bank),
        norm_stats: model.norm_stats.map(NormStatsFile::from),
        model_config: ModelConfigFile::from(&model.config),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, model: &Model, seeds: Seeds) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::write(path, encode(model, seeds)).map_err(|e| AppError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AppError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint. With `expected_classes`, a different class count is a
/// configuration error.
pub fn decode(bytes: &[u8], expected_classes: Option<usize>) -> AppResult<(Model, CheckpointHeader)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(AppError::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(AppError::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let len = c.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(len)?).map_err(|e| AppError::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(AppError::Checkpoint(format!(
            "header format version {}, this build reads {FORMAT_VERSION}",
            header.format_version
        )));
    }
    if let Some(k) = expected_classes {
        if k != header.num_classes {
            return Err(asiseg_core::Error::Config(format!(
                "checkpoint has {} classes, expected {k}",
                header.num_classes
            ))
            .into());
        }
    }
    let config = header.model_config.clone().into_config()?;
    if config.num_classes != header.num_classes || config.dim != header.d {
        return Err(AppError::Checkpoint("header K/d disagree with the model configuration".into()));
    }
    let bank = bank_from_entries(header.bank.clone(), Some(header.num_classes))?;
    let mut model = Model::new(config, bank, header.seeds.model)?;
    model.norm_stats = header.norm_stats.map(NormStatsFile::into_stats).transpose()?;
    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(AppError::Checkpoint(format!(
            "{count} parameter blobs, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| AppError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let raw = c.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        model.store.load(&name, Matrix::new(rows, cols, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(AppError::Checkpoint("trailing bytes".into()));
    }
    Ok((model, header))
}

pub fn load(path: &Path, expected_classes: Option<usize>) -> AppResult<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes, expected_classes)
}
