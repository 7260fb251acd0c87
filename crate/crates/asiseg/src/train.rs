//! Training loop over (frame, present class) items with frozen encoders.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use asiseg_core::audio::fit_norm_stats;
use asiseg_core::fusion::ImageFeatureMap;
use asiseg_core::model::{GradientAccumulator, ItemTargets, LossTerms, Model, SegmentInputs};
use asiseg_core::optim::{Adam, AdamConfig};
use asiseg_core::prompt::{pool_gt_features, ClassPooledEmbeddings};
use asiseg_core::synth::mix_seed;
use asiseg_core::{Matrix, ParamId};

use crate::dataset::{CommandCondition, Dataset};
use crate::error::{AppError, AppResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    pub freeze_encoders: bool,
    /// Absent classes drawn per frame and epoch as all-background items.
    pub absent_per_frame: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 30,
            tau: 0.07,
            seed: 0,
            freeze_encoders: true,
            absent_per_frame: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: String| Err(asiseg_core::Error::Config(m).into());
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("temperature {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !self.freeze_encoders {
            return bad("encoders are precomputed feature extractors and cannot be unfrozen".into());
        }
        Ok(())
    }
}

/// Per-frame quantities that do not change during training.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub features: ImageFeatureMap,
    pub pooled: ClassPooledEmbeddings,
    /// Audio embedding of each present class's command.
    pub embeddings: BTreeMap<usize, Vec<f64>>,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub dice: f64,
    pub cl: f64,
    pub total: f64,
    pub lr: f64,
    pub intent_ce: f64,
    pub absent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub steps: u64,
}

/// Fits mel normalization statistics on every recorded command of `ds`.
pub fn fit_audio_norm(model: &mut Model, ds: &Dataset) -> AppResult<()> {
    let analyzer = model.mel_analyzer()?;
    let mels = ds
        .samples
        .par_iter()
        .flat_map_iter(|s| s.present_classes.iter().map(move |&k| (s, k)))
        .map(|(s, k)| -> AppResult<_> {
            let clip = s.command(k, ds.num_classes, &CommandCondition::CLEAN)?;
            Ok(analyzer.compute(&clip)?)
        })
        .collect::<AppResult<Vec<_>>>()?;
    model.norm_stats = Some(fit_norm_stats(&mels)?);
    Ok(())
}

pub fn prepare(model: &Model, ds: &Dataset) -> AppResult<Vec<PreparedSample>> {
    if ds.num_classes != model.num_classes() {
        return Err(asiseg_core::Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.num_classes,
            model.num_classes()
        ))
        .into());
    }
    let analyzer = model.mel_analyzer()?;
    ds.samples
        .par_iter()
        .map(|s| -> AppResult<PreparedSample> {
            let features = model.encode_image(&s.image)?;
            let gt: Vec<Matrix> = s.masks.iter().map(|m| m.to_matrix()).collect();
            let pooled = pool_gt_features(&features, &gt)?;
            let mut embeddings = BTreeMap::new();
            for &k in &s.present_classes {
                let clip = s.command(k, ds.num_classes, &CommandCondition::CLEAN)?;
                embeddings.insert(k, model.embed_audio_with(&analyzer, &clip)?);
            }
            Ok(PreparedSample {
                features,
                pooled,
                embeddings,
            })
        })
        .collect()
}

/// `(frame, class)` pairs for every present class, in dataset order.
pub fn training_items(ds: &Dataset) -> Vec<(usize, usize)> {
    ds.samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.present_classes.iter().map(move |&k| (i, k)))
        .collect()
}

/// Present items plus `per_frame` absent classes of each frame drawn with
/// `rng`, sorted then shuffled.
pub fn epoch_items(ds: &Dataset, per_frame: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut items = training_items(ds);
    if per_frame > 0 {
        for (i, s) in ds.samples.iter().enumerate() {
            let absent: Vec<usize> = (0..ds.num_classes).filter(|k| !s.present_classes.contains(k)).collect();
            items.extend(absent.choose_multiple(rng, per_frame).map(|&k| (i, k)));
        }
    }
    items.sort_unstable();
    items.shuffle(rng);
    items
}

/// Mean loss terms and summed gradients of one batch; per-item results are
/// reduced in batch order.
pub fn batch_gradients(
    model: &Model,
    ds: &Dataset,
    prepared: &[PreparedSample],
    text: &Matrix,
    batch: &[(usize, usize)],
    tau: f64,
) -> AppResult<(Vec<LossTerms>, Vec<(ParamId, Matrix)>)> {
    let weight = 1.0 / batch.len() as f64;
    let results = batch
        .par_iter()
        .map(|&(i, k)| {
            let s = &ds.samples[i];
            let p = &prepared[i];
            let inputs = SegmentInputs {
                features: &p.features,
                image: &s.image,
                text,
                target: k,
            };
            let targets = ItemTargets {
                gt: &s.masks[k],
                pooled: &p.pooled,
                audio_embedding: p.embeddings.get(&k).map(Vec::as_slice),
                tau,
            };
            model.item_gradients(&inputs, &targets, weight)
        })
        .collect::<Vec<_>>();
    let mut acc = GradientAccumulator::new();
    let mut terms = Vec::with_capacity(batch.len());
    for r in results {
        let (t, g) = r?;
        acc.add(&g);
        terms.push(t);
    }
    Ok((terms, acc.into_grads()))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean objective (dice + contrastive + intent + absent) of `batch`.
pub fn batch_loss(
    model: &Model,
    ds: &Dataset,
    prepared: &[PreparedSample],
    text: &Matrix,
    batch: &[(usize, usize)],
    tau: f64,
) -> AppResult<f64> {
    let (terms, _) = batch_gradients(model, ds, prepared, text, batch, tau)?;
    Ok(mean(
        terms
            .iter()
            .map(|t| t.total() + t.ce.unwrap_or(0.0) + t.absent.unwrap_or(0.0)),
    ))
}

/// Trains `model` in place. Norm statistics are fitted on `ds` when the
/// model has none.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> AppResult<TrainOutcome> {
    config.validate()?;
    if ds.is_empty() {
        return Err(asiseg_core::Error::EmptyDataset.into());
    }
    model.set_encoders_frozen(config.freeze_encoders);
    if model.norm_stats.is_none() {
        fit_audio_norm(model, ds)?;
    }
    let prepared = prepare(model, ds)?;
    let text = model.text_features()?;
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate));
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64));
        let items = epoch_items(ds, config.absent_per_frame, &mut rng);
        let mut terms = Vec::with_capacity(items.len());
        for (b, batch) in items.chunks(config.batch_size).enumerate() {
            let (t, grads) = batch_gradients(model, ds, &prepared, &text, batch, config.tau).map_err(|e| {
                AppError::Training(format!("epoch {epoch}, batch {b}: {e}"))
            })?;
            adam.step(&mut model.store, &grads)
                .map_err(|e| AppError::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            terms.extend(t);
        }
        let dice = mean(terms.iter().filter_map(|t| t.dice));
        let cl = mean(terms.iter().filter_map(|t| t.cl));
        let log = EpochLog {
            epoch: epoch + 1,
            dice,
            cl,
            total: asiseg_core::model::total_loss(dice, cl),
            lr: config.learning_rate,
            intent_ce: mean(terms.iter().filter_map(|t| t.ce)),
            absent: mean(terms.iter().filter_map(|t| t.absent)),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome {
        logs,
        steps: adam.steps(),
    })
}
