//! Instrument description bank and its text encoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::RngCore;

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{math, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstrumentDescription {
    pub class_index: usize,
    pub class_name: String,
    pub description: String,
}

/// One description per class, ordered by class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionBank {
    entries: Vec<InstrumentDescription>,
}

impl DescriptionBank {
    /// Validates and orders `entries`. With `expected_classes`, a different
    /// class count is a configuration error.
    pub fn new(entries: Vec<InstrumentDescription>, expected_classes: Option<usize>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Schema("description bank has no entries".into()));
        }
        let mut by_index = BTreeMap::new();
        for e in entries {
            if e.class_name.trim().is_empty() {
                return Err(Error::Schema(format!("class {} has an empty name", e.class_index)));
            }
            if e.description.trim().is_empty() {
                return Err(Error::Schema(format!(
                    "class {} has an empty description",
                    e.class_index
                )));
            }
            let idx = e.class_index;
            if by_index.insert(idx, e).is_some() {
                return Err(Error::Schema(format!("duplicate class_index {idx}")));
            }
        }
        let k = by_index.len();
        if let Some((missing, _)) = (0..k).zip(by_index.keys()).find(|(i, idx)| i != *idx) {
            return Err(Error::Schema(format!("missing class_index {missing}")));
        }
        if let Some(expected) = expected_classes {
            if expected != k {
                return Err(Error::Config(format!(
                    "bank has {k} classes, run configuration expects {expected}"
                )));
            }
        }
        Ok(Self {
            entries: by_index.into_values().collect(),
        })
    }

    pub fn entries(&self) -> &[InstrumentDescription] {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.class_name.clone()).collect()
    }

    /// The seven instrument categories shared by the EndoVis benchmarks, with
    /// short visual descriptions.
    pub fn default_instruments() -> Self {
        const DEFAULT: [(&str, &str); 7] = [
            (
                "Bipolar Forceps",
                "Bipolar forceps have two slender insulated jaws with fenestrated tips that grasp tissue and pass coagulating current between them.",
            ),
            (
                "Prograsp Forceps",
                "Prograsp forceps carry wide curved jaws with a textured gripping surface on a long articulated metal shaft.",
            ),
            (
                "Large Needle Driver",
                "The large needle driver has short heavy flat jaws with a cross hatched insert that clamps curved suture needles firmly.",
            ),
            (
                "Suction Instrument",
                "The suction instrument is a straight rigid hollow tube with a rounded perforated tip that aspirates blood and fluid.",
            ),
            (
                "Clip Applier",
                "The clip applier has a pair of grooved jaws at the end of a thick shaft that close small metal clips around vessels.",
            ),
            (
                "Monopolar Curved Scissors",
                "Monopolar curved scissors have two sharp curved blades joined at a pivot and cut or cauterize tissue with a single electrode.",
            ),
            (
                "Ultrasound Probe",
                "The ultrasound probe is a smooth elongated capsule with a flat transducer face held against organs to image beneath the surface.",
            ),
        ];
        let entries = DEFAULT
            .iter()
            .enumerate()
            .map(|(i, (name, desc))| InstrumentDescription {
                class_index: i,
                class_name: name.to_string(),
                description: desc.to_string(),
            })
            .collect();
        Self::new(entries, Some(7)).expect("built-in bank is valid")
    }
}

/// Maps a list of descriptions to one feature row each.
pub trait TextEmbedder {
    fn embed_dim(&self) -> usize;
    fn embed(&self, params: &ParamStore, text: &str) -> Result<Vec<f64>>;
}

pub const HASH_BINS: usize = 1024;

/// Hashed bag-of-tokens projected by a fixed random matrix, L2-normalized.
#[derive(Clone, Debug)]
pub struct HashedTextEncoder {
    pub projection: ParamId,
    pub dim: usize,
}

impl HashedTextEncoder {
    pub fn new<R: RngCore + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let projection = store.add(
            "text_encoder.projection",
            ParamGroup::TextEncoder,
            Matrix::randn(HASH_BINS, dim, 1.0, rng),
        );
        Self { projection, dim }
    }
}

/// Lower-cased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn token_counts(text: &str) -> Vec<f64> {
    let mut counts = alloc::vec![0.0; HASH_BINS];
    for tok in tokenize(text) {
        counts[(fnv1a(tok.as_bytes()) % HASH_BINS as u64) as usize] += 1.0;
    }
    counts
}

impl TextEmbedder for HashedTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, params: &ParamStore, text: &str) -> Result<Vec<f64>> {
        let counts = Matrix::row_vector(token_counts(text));
        let proj = counts.matmul(params.get(self.projection))?;
        let norm = math::sqrt(proj.data().iter().map(|v| v * v).sum());
        if norm == 0.0 {
            return Ok(proj.into_data());
        }
        Ok(proj.data().iter().map(|v| v / norm).collect())
    }
}

/// `K × d` text features; row `k` depends only on entry `k`.
pub fn encode_descriptions(
    bank: &DescriptionBank,
    encoder: &dyn TextEmbedder,
    params: &ParamStore,
) -> Result<Matrix> {
    let d = encoder.embed_dim();
    let mut data = Vec::with_capacity(bank.num_classes() * d);
    for e in bank.entries() {
        let row = encoder.embed(params, &e.description)?;
        if row.len() != d {
            return Err(Error::Shape(format!("text embedding length {} vs {d}", row.len())));
        }
        data.extend(row);
    }
    let m = Matrix::new(bank.num_classes(), d, data)?;
    if !m.is_finite() {
        return Err(Error::NonFinite("text features".into()));
    }
    Ok(m)
}
