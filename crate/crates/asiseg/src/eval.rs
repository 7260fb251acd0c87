//! Intention-oriented and semantic evaluation, and the robustness sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use asiseg_core::audio::PerturbKind;
use asiseg_core::decoder::{threshold, MaskLogits};
use asiseg_core::metrics::{compose_label_map, compute_iou, label_map_masks, ClassIou, MetricsReport};
use asiseg_core::model::{Model, SegmentInputs};

use crate::dataset::{CommandCondition, Dataset};
use crate::error::AppResult;

/// Background threshold on mask logits.
pub const MASK_THRESHOLD: f64 = 0.0;

#[derive(Clone, Debug, PartialEq)]
pub struct IntentionResult {
    pub report: MetricsReport,
    pub intent_accuracy: f64,
    pub n_commands: usize,
}

fn check_classes(model: &Model, ds: &Dataset) -> AppResult<()> {
    if ds.num_classes != model.num_classes() {
        return Err(asiseg_core::Error::Config(format!(
            "dataset has {} classes, checkpoint {}",
            ds.num_classes,
            model.num_classes()
        ))
        .into());
    }
    Ok(())
}

/// For every frame and present class: issue that class's command, segment the
/// recognized class, and score against the commanded class's mask.
pub fn evaluate_intention(model: &Model, ds: &Dataset, cond: &CommandCondition) -> AppResult<IntentionResult> {
    check_classes(model, ds)?;
    let text = model.text_features()?;
    let analyzer = model.mel_analyzer()?;
    let k_total = model.num_classes();
    let per_frame = ds
        .samples
        .par_iter()
        .map(|s| -> AppResult<(Vec<ClassIou>, usize)> {
            let features = model.encode_image(&s.image)?;
            let mut out = Vec::with_capacity(s.present_classes.len());
            let mut correct = 0;
            for &k in &s.present_classes {
                let clip = s.command(k, k_total, cond)?;
                let intent = model.classify_embedding(&model.embed_audio_with(&analyzer, &clip)?)?;
                correct += usize::from(intent.class_index == k);
                let logits = model.segment(&SegmentInputs {
                    features: &features,
                    image: &s.image,
                    text: &text,
                    target: intent.class_index,
                })?;
                let iou = compute_iou(&threshold(&logits, MASK_THRESHOLD), &s.masks[k])?;
                out.push(ClassIou { class_index: k, iou });
            }
            Ok((out, correct))
        })
        .collect::<AppResult<Vec<_>>>()?;
    let n_commands: usize = per_frame.iter().map(|(f, _)| f.len()).sum();
    let correct: usize = per_frame.iter().map(|(_, c)| c).sum();
    let frames: Vec<Vec<ClassIou>> = per_frame.into_iter().map(|(f, _)| f).collect();
    Ok(IntentionResult {
        report: MetricsReport::from_frames(&frames, k_total)?,
        intent_accuracy: if n_commands == 0 {
            0.0
        } else {
            correct as f64 / n_commands as f64
        },
        n_commands,
    })
}

/// Runs every class on every frame and composes a label map by per-pixel
/// argmax; IoU is scored for the classes present in each frame.
pub fn evaluate_semantic(model: &Model, ds: &Dataset) -> AppResult<MetricsReport> {
    check_classes(model, ds)?;
    let text = model.text_features()?;
    let k_total = model.num_classes();
    let frames = ds
        .samples
        .par_iter()
        .map(|s| -> AppResult<Vec<ClassIou>> {
            let features = model.encode_image(&s.image)?;
            let logits = (0..k_total)
                .map(|k| {
                    model.segment(&SegmentInputs {
                        features: &features,
                        image: &s.image,
                        text: &text,
                        target: k,
                    })
                })
                .collect::<Result<Vec<MaskLogits>, _>>()?;
            let labels = compose_label_map(&logits, MASK_THRESHOLD)?;
            let masks = label_map_masks(&labels, s.height(), s.width(), k_total);
            s.present_classes
                .iter()
                .map(|&k| {
                    Ok(ClassIou {
                        class_index: k,
                        iou: compute_iou(&masks[k], &s.masks[k])?,
                    })
                })
                .collect()
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok(MetricsReport::from_frames(&frames, k_total)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: String,
    pub magnitude: f64,
    pub intent_accuracy: f64,
    pub mc_iou: f64,
}

/// One intention-mode evaluation per (kind, magnitude), kinds outermost.
pub fn robustness_sweep(
    model: &Model,
    ds: &Dataset,
    kinds: &[PerturbKind],
    magnitudes: &[f64],
) -> AppResult<Vec<RobustnessRow>> {
    let mut rows = Vec::with_capacity(kinds.len() * magnitudes.len());
    for &kind in kinds {
        for &m in magnitudes {
            let r = evaluate_intention(
                model,
                ds,
                &CommandCondition {
                    mispronounce: 0.0,
                    perturb: Some((kind, m)),
                },
            )?;
            rows.push(RobustnessRow {
                kind: kind.name().into(),
                magnitude: m,
                intent_accuracy: r.intent_accuracy,
                mc_iou: r.report.mc_iou,
            });
        }
    }
    Ok(rows)
}
