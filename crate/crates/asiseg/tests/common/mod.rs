#![allow(dead_code)]

use asiseg::dataset::{synth_split, Dataset};
use asiseg_core::knowledge::DescriptionBank;
use asiseg_core::model::{Model, ModelConfig};
use asiseg_core::synth::{Split, SynthConfig};

pub fn tiny_config(seed: u64) -> SynthConfig {
    SynthConfig {
        n_train: 8,
        n_val: 4,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_split(seed: u64, split: Split) -> Dataset {
    synth_split(&tiny_config(seed), split).unwrap()
}

pub fn default_model(seed: u64) -> Model {
    Model::new(ModelConfig::default(), DescriptionBank::default_instruments(), seed).unwrap()
}
