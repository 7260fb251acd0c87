//! IoU and its frame/class aggregations.

use alloc::format;
use alloc::vec::Vec;

use crate::decoder::{BinaryMask, MaskLogits};
use crate::{Error, Result};

/// `|pred ∧ gt| / |pred ∨ gt|`, `1` when both masks are empty.
pub fn compute_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p & g);
        union += usize::from(p | g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of one class on one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassIou {
    pub class_index: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub challenge_iou: f64,
    pub iou: f64,
    pub mc_iou: f64,
    /// `None` for classes never evaluated.
    pub per_class_iou: Vec<Option<f64>>,
    pub n_frames: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean over frames of the per-frame mean over present classes.
pub fn challenge_iou(frames: &[Vec<ClassIou>]) -> f64 {
    mean(frames.iter().filter_map(|f| mean(f.iter().map(|c| c.iou)))).unwrap_or(0.0)
}

/// Mean over every (frame, present class) pair.
pub fn pooled_iou(frames: &[Vec<ClassIou>]) -> f64 {
    mean(frames.iter().flatten().map(|c| c.iou)).unwrap_or(0.0)
}

/// Per-class mean over the frames where the class was evaluated.
pub fn per_class_iou(frames: &[Vec<ClassIou>], num_classes: usize) -> Result<Vec<Option<f64>>> {
    let mut sums = alloc::vec![(0.0, 0usize); num_classes];
    for c in frames.iter().flatten() {
        let slot = sums
            .get_mut(c.class_index)
            .ok_or_else(|| Error::Argument(format!("class {} outside 0..{num_classes}", c.class_index)))?;
        slot.0 += c.iou;
        slot.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Mean of the per-class values over classes evaluated at least once.
pub fn mc_iou(frames: &[Vec<ClassIou>], num_classes: usize) -> Result<f64> {
    Ok(mean(per_class_iou(frames, num_classes)?.into_iter().flatten()).unwrap_or(0.0))
}

impl MetricsReport {
    pub fn from_frames(frames: &[Vec<ClassIou>], num_classes: usize) -> Result<Self> {
        let per_class = per_class_iou(frames, num_classes)?;
        Ok(Self {
            challenge_iou: challenge_iou(frames),
            iou: pooled_iou(frames),
            mc_iou: mean(per_class.iter().flatten().copied()).unwrap_or(0.0),
            per_class_iou: per_class,
            n_frames: frames.len(),
        })
    }
}

/// Per-pixel argmax over class logits; background (`None`) where every
/// logit is `≤ t`. Ties go to the lowest class.
pub fn compose_label_map(logits: &[MaskLogits], t: f64) -> Result<Vec<Option<usize>>> {
    let Some(first) = logits.first() else {
        return Err(Error::Argument("no class logits to compose".into()));
    };
    let shape = first.values.shape();
    if logits.iter().any(|l| l.values.shape() != shape) {
        return Err(Error::Shape("class logits differ in size".into()));
    }
    let n = shape.0 * shape.1;
    Ok((0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (k, l) in logits.iter().enumerate() {
                let v = l.values.data()[i];
                if v > t && best.map_or(true, |(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect())
}

/// Splits a label map into one mask per class.
pub fn label_map_masks(labels: &[Option<usize>], height: usize, width: usize, num_classes: usize) -> Vec<BinaryMask> {
    (0..num_classes)
        .map(|k| BinaryMask::from_fn(height, width, |y, x| labels[y * width + x] == Some(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| on.contains(&(y, x)))
    }

    #[test]
    fn iou_examples() {
        let a = mask(2, 2, &[(0, 0), (0, 1)]);
        let b = mask(2, 2, &[(0, 1), (1, 1)]);
        assert!((compute_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(compute_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(compute_iou(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 1.0);
        assert!(matches!(compute_iou(&a, &mask(1, 4, &[])), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregation_by_hand() {
        let c = |class_index, iou| ClassIou { class_index, iou };
        let frames = alloc::vec![
            alloc::vec![c(0, 1.0), c(1, 0.5)],
            alloc::vec![c(1, 0.25)],
            alloc::vec![c(0, 0.5), c(2, 0.0)],
        ];
        let r = MetricsReport::from_frames(&frames, 4).unwrap();
        assert!((r.challenge_iou - (0.75 + 0.25 + 0.25) / 3.0).abs() < 1e-15);
        assert!((r.iou - 2.25 / 5.0).abs() < 1e-15);
        assert_eq!(r.per_class_iou, [Some(0.75), Some(0.375), Some(0.0), None]);
        assert!((r.mc_iou - 1.125 / 3.0).abs() < 1e-15);
        assert_eq!(r.n_frames, 3);
    }

    #[test]
    fn label_map_uses_background_threshold() {
        let l0 = MaskLogits::new(Matrix::new(1, 3, alloc::vec![1.0, -1.0, 2.0]).unwrap()).unwrap();
        let l1 = MaskLogits::new(Matrix::new(1, 3, alloc::vec![0.5, -0.5, 2.0]).unwrap()).unwrap();
        let labels = compose_label_map(&[l0, l1], 0.0).unwrap();
        assert_eq!(labels, [Some(0), None, Some(0)]);
        let masks = label_map_masks(&labels, 1, 3, 2);
        assert_eq!(masks[0].data(), &[1, 0, 1]);
        assert!(masks[1].is_empty());
    }
}
