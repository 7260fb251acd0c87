//! The assembled pipeline: encoders, fusion, prompt encoder and decoder over
//! one [`ParamStore`], plus per-item loss and gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{
    AudioClassifier, AudioClip, AudioEmbedder, AudioEncoder, IntentLabel, MelAnalyzer, MelConfig, NormMode,
    NormStats, normalize_mel,
};
use crate::decoder::{BinaryMask, DecoderConfig, MaskDecoder, MaskLogits, DICE_EPS};
use crate::fusion::{
    irrelevant_classes, visual_fuse_vars, ImageEncoder, ImageFeatureMap, LearnableQueries, RgbImage, TextFusion,
};
use crate::graph::{Graph, Var};
use crate::knowledge::{encode_descriptions, DescriptionBank, HashedTextEncoder};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::prompt::{contrastive_loss_var, BackgroundSource, ClassPooledEmbeddings, DistinguishingAttention, PromptProjection};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    /// Fuse learnable queries with the description bank. Without it the
    /// queries attend to themselves.
    pub use_bank: bool,
    pub contrastive: bool,
    pub background: BackgroundSource,
}

impl Variant {
    pub const FULL: Variant = Variant {
        use_bank: true,
        contrastive: true,
        background: BackgroundSource::Refined,
    };
    /// No description bank, dice loss only.
    pub const BASELINE: Variant = Variant {
        use_bank: false,
        contrastive: false,
        background: BackgroundSource::Refined,
    };
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub key_dim: usize,
    pub patch: usize,
    pub encoder_blocks: usize,
    pub mel: MelConfig,
    pub norm_mode: NormMode,
    pub decoder: DecoderConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            dim: 64,
            key_dim: 64,
            patch: 8,
            encoder_blocks: 2,
            mel: MelConfig::default(),
            norm_mode: NormMode::default(),
            decoder: DecoderConfig::default(),
            variant: Variant::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.decoder.dim != self.dim {
            return Err(Error::Config(format!(
                "decoder width {} differs from feature width {}",
                self.decoder.dim, self.dim
            )));
        }
        if self.patch != crate::decoder::UPSAMPLE {
            return Err(Error::Config(format!(
                "encoder stride {} must equal the decoder upsampling factor {}",
                self.patch,
                crate::decoder::UPSAMPLE
            )));
        }
        if self.dim % self.decoder.heads != 0 || self.decoder.cross_dim % self.decoder.heads != 0 {
            return Err(Error::Config("attention widths must divide by the head count".into()));
        }
        self.mel.validate()
    }
}

/// Frozen and trainable group names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub bank: DescriptionBank,
    pub seed: u64,
    pub store: ParamStore,
    pub norm_stats: Option<NormStats>,
    pub image_encoder: ImageEncoder,
    pub text_encoder: HashedTextEncoder,
    pub audio_encoder: AudioEncoder,
    pub classifier: AudioClassifier,
    pub queries: LearnableQueries,
    pub text_fusion: TextFusion,
    pub distinguish: DistinguishingAttention,
    pub prompt: PromptProjection,
    pub decoder: MaskDecoder,
}

/// Inputs of one segmentation call; `text` is the encoded bank.
#[derive(Clone, Copy, Debug)]
pub struct SegmentInputs<'a> {
    pub features: &'a ImageFeatureMap,
    pub image: &'a RgbImage,
    pub text: &'a Matrix,
    pub target: usize,
}

/// Vars of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub queries: Var,
    pub similarity: Var,
    pub required: Var,
    pub refined_required: Var,
    pub refined_irrelevant: Vec<Var>,
    pub foreground: Var,
    pub background: Option<Var>,
    pub logits: Var,
}

/// Per-item loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// `None` for items whose class is absent from the frame.
    pub dice: Option<f64>,
    pub cl: Option<f64>,
    pub ce: Option<f64>,
    /// Suppression term of absent-class items.
    pub absent: Option<f64>,
}

impl LossTerms {
    /// `dice + cl`, the segmentation objective.
    pub fn total(&self) -> f64 {
        total_loss(self.dice.unwrap_or(0.0), self.cl.unwrap_or(0.0))
    }
}

/// Weight of the all-background cross-entropy on absent-class items.
pub const ABSENT_WEIGHT: f64 = 1.0;

/// Training signal for one (frame, class) item.
#[derive(Clone, Copy, Debug)]
pub struct ItemTargets<'a> {
    pub gt: &'a BinaryMask,
    pub pooled: &'a ClassPooledEmbeddings,
    pub audio_embedding: Option<&'a [f64]>,
    pub tau: f64,
}

/// Unweighted sum of the segmentation and contrastive terms.
pub fn total_loss(dice: f64, cl: f64) -> f64 {
    dice + cl
}

impl Model {
    pub fn new(config: ModelConfig, bank: DescriptionBank, seed: u64) -> Result<Self> {
        config.validate()?;
        if bank.num_classes() != config.num_classes {
            return Err(Error::Config(format!(
                "bank has {} classes, model expects {}",
                bank.num_classes(),
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (k, d) = (config.num_classes, config.dim);
        let image_encoder = ImageEncoder::new(&mut store, config.patch, d, config.encoder_blocks, &mut rng);
        let text_encoder = HashedTextEncoder::new(&mut store, d, &mut rng);
        let audio_encoder = AudioEncoder::new(&mut store, config.mel.n_mels, crate::audio::AUDIO_EMBED_DIM, &mut rng);
        let classifier = AudioClassifier::new(&mut store, crate::audio::AUDIO_EMBED_DIM, k, &mut rng);
        let queries = LearnableQueries::new(&mut store, k, d, &mut rng);
        let text_fusion = TextFusion::new(&mut store, d, config.key_dim, &mut rng);
        let distinguish = DistinguishingAttention::new(&mut store, d, config.key_dim, &mut rng);
        let prompt = PromptProjection::new(&mut store, d, config.decoder.prompt_dim, &mut rng);
        let decoder = MaskDecoder::new(&mut store, config.decoder, &mut rng);
        Ok(Self {
            config,
            bank,
            seed,
            store,
            norm_stats: None,
            image_encoder,
            text_encoder,
            audio_encoder,
            classifier,
            queries,
            text_fusion,
            distinguish,
            prompt,
            decoder,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.bank.class_names()
    }

    pub fn partition(&self) -> ParamPartition {
        ParamPartition {
            frozen: self.store.group_names(false),
            trainable: self.store.group_names(true),
        }
    }

    pub fn set_encoders_frozen(&mut self, frozen: bool) {
        for g in [ParamGroup::ImageEncoder, ParamGroup::TextEncoder, ParamGroup::AudioEncoder] {
            self.store.set_group_trainable(g, !frozen);
        }
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.store.checksum(&[
            ParamGroup::ImageEncoder,
            ParamGroup::TextEncoder,
            ParamGroup::AudioEncoder,
        ])
    }

    pub fn text_features(&self) -> Result<Matrix> {
        encode_descriptions(&self.bank, &self.text_encoder, &self.store)
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<ImageFeatureMap> {
        self.image_encoder.encode(&self.store, image)
    }

    pub fn mel_analyzer(&self) -> Result<MelAnalyzer> {
        MelAnalyzer::new(self.config.mel)
    }

    pub fn embed_audio_with(&self, analyzer: &MelAnalyzer, clip: &AudioClip) -> Result<Vec<f64>> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| Error::Config("mel normalization statistics have not been fitted".into()))?;
        let mel = analyzer.compute(clip)?;
        let norm = normalize_mel(&mel, stats, self.config.norm_mode)?;
        self.audio_encoder.embed(&self.store, &norm)
    }

    pub fn embed_audio(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.embed_audio_with(&self.mel_analyzer()?, clip)
    }

    pub fn classify_embedding(&self, embedding: &[f64]) -> Result<IntentLabel> {
        crate::audio::classify_intent(embedding, &self.classifier, &self.store, &self.class_names())
    }

    pub fn recognize_intent(&self, clip: &AudioClip) -> Result<IntentLabel> {
        self.classify_embedding(&self.embed_audio(clip)?)
    }

    /// Records the segmentation path for `inputs.target` on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, inputs: &SegmentInputs<'_>) -> Result<ForwardVars> {
        let k = self.num_classes();
        if inputs.target >= k {
            return Err(Error::Argument(format!("target class {} outside 0..{k}", inputs.target)));
        }
        if inputs.text.shape() != (k, self.config.dim) {
            return Err(Error::Shape(format!(
                "text features {:?}, expected {k}x{}",
                inputs.text.shape(),
                self.config.dim
            )));
        }
        let f = inputs.features;
        let queries = g.param(self.queries.id);
        let text = if self.config.variant.use_bank {
            g.input(inputs.text.clone())
        } else {
            queries
        };
        let fused = self.text_fusion.forward(g, queries, text)?.q;
        let fv = g.input(f.values.clone());
        let similarity = g.matmul_t(fused, fv)?;
        let maps = visual_fuse_vars(g, fv, similarity)?;
        let required = maps[inputs.target];
        let irrelevant: Vec<Var> = irrelevant_classes(k, inputs.target).into_iter().map(|c| maps[c]).collect();
        let refined = self
            .distinguish
            .refine(g, required, &irrelevant, self.config.variant.background)?;
        let (foreground, background) = self.prompt.forward(g, &refined)?;
        let logits = self
            .decoder
            .forward(g, fv, f.h, f.w, foreground, background, &inputs.image.pixels)?;
        Ok(ForwardVars {
            queries: fused,
            similarity,
            required,
            refined_required: refined.required,
            refined_irrelevant: refined.irrelevant,
            foreground,
            background,
            logits,
        })
    }

    pub fn segment(&self, inputs: &SegmentInputs<'_>) -> Result<MaskLogits> {
        let mut g = Graph::with_params(&self.store);
        let vars = self.forward(&mut g, inputs)?;
        let img = inputs.image;
        MaskLogits::new(Matrix::new(img.height, img.width, g.value(vars.logits).data().to_vec())?)
    }

    /// Records the item losses; returns the terms and the root
    /// `weight · (dice + cl + ce)`. An empty ground-truth mask makes the item
    /// an absent-class item whose only segmentation term pushes every pixel
    /// to background.
    pub fn loss_vars(
        &self,
        g: &mut Graph<'_>,
        inputs: &SegmentInputs<'_>,
        targets: &ItemTargets<'_>,
        weight: f64,
    ) -> Result<(LossTerms, Var)> {
        let vars = self.forward(g, inputs)?;
        let mut terms = LossTerms {
            dice: None,
            cl: None,
            ce: None,
            absent: None,
        };
        let present = !targets.gt.is_empty();
        let mut root = if present {
            let dice = g.dice_loss(vars.logits, &targets.gt.as_f64(), DICE_EPS)?;
            terms.dice = Some(g.scalar(dice));
            dice
        } else {
            let bce = g.mean_softplus(vars.logits);
            let bce = g.scale(bce, ABSENT_WEIGHT);
            terms.absent = Some(g.scalar(bce));
            bce
        };
        if present && self.config.variant.contrastive {
            let anchor = g.mean_rows(vars.refined_required);
            if let Some(cl) = contrastive_loss_var(g, anchor, targets.pooled, inputs.target, targets.tau)? {
                terms.cl = Some(g.scalar(cl));
                root = g.add(root, cl)?;
            }
        }
        if let Some(e) = targets.audio_embedding {
            let ev = g.input(Matrix::row_vector(e.to_vec()));
            let logits = self.classifier.logits(g, ev)?;
            let include = alloc::vec![true; self.num_classes()];
            let ce = g.softmax_nll(logits, inputs.target, &include)?;
            terms.ce = Some(g.scalar(ce));
            root = g.add(root, ce)?;
        }
        let root = g.scale(root, weight);
        Ok((terms, root))
    }

    /// Loss terms and trainable-parameter gradients of `weight · loss`.
    pub fn item_gradients(
        &self,
        inputs: &SegmentInputs<'_>,
        targets: &ItemTargets<'_>,
        weight: f64,
    ) -> Result<(LossTerms, Vec<(ParamId, Matrix)>)> {
        let mut g = Graph::with_params(&self.store);
        let (terms, root) = self.loss_vars(&mut g, inputs, targets, weight)?;
        if !g.scalar(root).is_finite() {
            return Err(Error::NonFinite(format!(
                "loss for class {} (dice {:?}, cl {:?}, ce {:?}, absent {:?})",
                inputs.target, terms.dice, terms.cl, terms.ce, terms.absent
            )));
        }
        let grads = g.backward(root).param_grads(&g);
        Ok((
            terms,
            grads.into_iter().filter(|(id, _)| self.store.is_trainable(*id)).collect(),
        ))
    }
}

/// Sums per-item gradients in the order given.
#[derive(Clone, Debug, Default)]
pub struct GradientAccumulator {
    slots: Vec<Option<Matrix>>,
}

impl GradientAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: &[(ParamId, Matrix)]) {
        for (id, g) in grads {
            if self.slots.len() <= id.index() {
                self.slots.resize(id.index() + 1, None);
            }
            match &mut self.slots[id.index()] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn into_grads(self) -> Vec<(ParamId, Matrix)> {
        self.slots
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.3, 0.7), 1.0);
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        let v = total_loss(1.0 / 3.0, core::f64::consts::LN_2);
        assert!((v - (1.0 / 3.0 + 0.693_147_180_559_945_3)).abs() < 1e-15);
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let model = Model::new(ModelConfig::default(), DescriptionBank::default_instruments(), 1).unwrap();
        let p = model.partition();
        assert_eq!(p.frozen, ["image_encoder", "text_encoder", "audio_encoder"]);
        assert_eq!(
            p.trainable,
            ["classifier", "queries", "fusion", "prompt_encoder", "decoder"]
        );
    }

    #[test]
    fn bank_size_must_match() {
        let cfg = ModelConfig {
            num_classes: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(
            Model::new(cfg, DescriptionBank::default_instruments(), 0),
            Err(Error::Config(_))
        ));
    }
}
