//! Named parameter storage partitioned into frozen and trainable groups.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
    AudioEncoder,
    Queries,
    Fusion,
    Classifier,
    PromptEncoder,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::AudioEncoder,
        ParamGroup::Queries,
        ParamGroup::Fusion,
        ParamGroup::Classifier,
        ParamGroup::PromptEncoder,
        ParamGroup::Decoder,
    ];

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            ParamGroup::ImageEncoder | ParamGroup::TextEncoder | ParamGroup::AudioEncoder
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::AudioEncoder => "audio_encoder",
            ParamGroup::Queries => "queries",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Classifier => "classifier",
            ParamGroup::PromptEncoder => "prompt_encoder",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            trainable: !group.is_encoder(),
            group,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Mark every parameter of `group` trainable or frozen.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.trainable = trainable;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_trainable(id)).collect()
    }

    /// Replace a value by name, keeping the shape.
    pub fn load(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(alloc::format!(
                "parameter {name}: stored {:?}, loaded {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter in the selected groups,
    /// in registration order.
    pub fn checksum(&self, groups: &[ParamGroup]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn group_names(&self, trainable: bool) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.trainable == trainable) {
            let n = e.group.name().to_string();
            if !names.contains(&n) {
                names.push(n);
            }
        }
        names
    }
}
