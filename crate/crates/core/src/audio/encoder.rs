use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;

use super::NormalizedMel;
use crate::graph::{softmax_rows, Graph, Var, ZERO_INDEX};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const AUDIO_EMBED_DIM: usize = 64;
const CONV_BLOCKS: usize = 3;
const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Anything that maps a normalized mel spectrogram to a fixed-length vector.
pub trait AudioEmbedder {
    fn embed_dim(&self) -> usize;
    fn embed(&self, params: &ParamStore, mel: &NormalizedMel) -> Result<Vec<f64>>;
}

/// Strided 1-D convolution stack over time (mel channels as input channels),
/// global average pooling, then a parameter-free layer norm.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub n_mels: usize,
    pub dim: usize,
    convs: Vec<Linear>,
}

impl AudioEncoder {
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        n_mels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::with_capacity(CONV_BLOCKS);
        let mut channels = n_mels;
        for b in 0..CONV_BLOCKS {
            convs.push(Linear::new(
                store,
                &format!("audio_encoder.conv{b}"),
                ParamGroup::AudioEncoder,
                KERNEL * channels,
                dim,
                true,
                1.4,
                rng,
            ));
            channels = dim;
        }
        Self { n_mels, dim, convs }
    }

    /// Records the encoder on `g`; `input` is `frames × n_mels`.
    pub fn forward(&self, g: &mut Graph<'_>, input: Var) -> Result<Var> {
        let mut h = input;
        for conv in &self.convs {
            let cols = im2col(g, h)?;
            let y = conv.forward(g, cols)?;
            h = g.gelu(y);
        }
        let pooled = g.mean_rows(h);
        Ok(g.layer_norm(pooled, crate::nn::LN_EPS))
    }
}

/// Gathers `KERNEL` neighbouring rows (stride 2, zero padding 1) into one row.
fn im2col(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (t, c) = g.shape(x);
    let out_t = (t + 2 - KERNEL) / STRIDE + 1;
    let mut index = Vec::with_capacity(out_t * KERNEL * c);
    for o in 0..out_t {
        for k in 0..KERNEL {
            let src = (o * STRIDE + k) as isize - 1;
            for ch in 0..c {
                if src < 0 || src as usize >= t {
                    index.push(ZERO_INDEX);
                } else {
                    index.push(src as usize * c + ch);
                }
            }
        }
    }
    g.gather(x, index, out_t, KERNEL * c)
}

impl AudioEmbedder for AudioEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, params: &ParamStore, mel: &NormalizedMel) -> Result<Vec<f64>> {
        if mel.n_mels() != self.n_mels {
            return Err(Error::Shape(format!(
                "audio encoder expects {} mel channels, got {}",
                self.n_mels,
                mel.n_mels()
            )));
        }
        if mel.values.cols() < 1 {
            return Err(Error::Shape("empty mel spectrogram".into()));
        }
        let mut g = Graph::with_params(params);
        let x = g.input(mel.values.transpose());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Linear intent head over the audio embedding.
#[derive(Clone, Debug)]
pub struct AudioClassifier {
    pub head: Linear,
    pub num_classes: usize,
}

impl AudioClassifier {
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        embed_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            head: Linear::new(
                store,
                "classifier",
                ParamGroup::Classifier,
                embed_dim,
                num_classes,
                true,
                1.0,
                rng,
            ),
            num_classes,
        }
    }

    pub fn logits(&self, g: &mut Graph<'_>, embedding: Var) -> Result<Var> {
        self.head.forward(g, embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentLabel {
    pub class_index: usize,
    pub class_name: String,
    pub probabilities: Vec<f64>,
}

impl IntentLabel {
    /// Softmax over `logits`; ties go to the lowest index.
    pub fn from_logits(logits: &[f64], class_names: &[String]) -> Result<Self> {
        if logits.len() != class_names.len() {
            return Err(Error::Config(format!(
                "{} logits for {} classes",
                logits.len(),
                class_names.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("intent logits".into()));
        }
        let probabilities = softmax_rows(&Matrix::row_vector(logits.to_vec())).into_data();
        let mut class_index = 0;
        for (i, p) in probabilities.iter().enumerate() {
            if *p > probabilities[class_index] {
                class_index = i;
            }
        }
        Ok(Self {
            class_index,
            class_name: class_names[class_index].clone(),
            probabilities,
        })
    }
}

/// Applies the classifier head to an embedding.
pub fn classify_intent(
    embedding: &[f64],
    classifier: &AudioClassifier,
    params: &ParamStore,
    class_names: &[String],
) -> Result<IntentLabel> {
    if classifier.num_classes != class_names.len() {
        return Err(Error::Config(format!(
            "classifier has {} outputs but {} class names were given",
            classifier.num_classes,
            class_names.len()
        )));
    }
    if embedding.len() != classifier.head.in_dim {
        return Err(Error::Shape(format!(
            "embedding length {} vs classifier input {}",
            embedding.len(),
            classifier.head.in_dim
        )));
    }
    let mut g = Graph::with_params(params);
    let e = g.input(Matrix::row_vector(embedding.to_vec()));
    let logits = classifier.logits(&mut g, e)?;
    IntentLabel::from_logits(g.value(logits).data(), class_names)
}
