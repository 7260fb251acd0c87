//! Brute-force oracles and criterion checks shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asiseg_core::decoder::{dice_loss, BinaryMask, MaskLogits};
use asiseg_core::fusion::{visual_fuse, ImageFeatureMap, SimilarityMaps};
use asiseg_core::gradcheck::{instances, GradCheckConfig, GradCheckReport};
use asiseg_core::metrics::{challenge_iou, compute_iou, mc_iou, per_class_iou, pooled_iou, ClassIou};
use asiseg_core::prompt::{contrastive_loss, inverse_residual, ClassPooledEmbeddings};
use asiseg_core::Matrix;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

/// One frame: per class, an optional (prediction, ground truth) pair; `None`
/// marks a class absent from the frame.
pub type Frame = Vec<Option<(BinaryMask, BinaryMask)>>;

fn pixel_set(m: &BinaryMask) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn oracle_iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (p, g) = (pixel_set(pred), pixel_set(gt));
    let union = p.union(&g).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&g).count() as f64 / union as f64
}

pub struct OracleMetrics {
    pub challenge: f64,
    pub pooled: f64,
    pub mc: f64,
}

pub fn oracle_metrics(frames: &[Frame], k: usize) -> OracleMetrics {
    let mut frame_means = Vec::new();
    let mut all = Vec::new();
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    for f in frames {
        let mut vals = Vec::new();
        for (c, pair) in f.iter().enumerate() {
            if let Some((p, g)) = pair {
                let v = oracle_iou(p, g);
                vals.push(v);
                all.push(v);
                by_class[c].push(v);
            }
        }
        if !vals.is_empty() {
            let mut s = 0.0;
            for v in &vals {
                s += v;
            }
            frame_means.push(s / vals.len() as f64);
        }
    }
    let avg = |v: &[f64]| {
        if v.is_empty() {
            return 0.0;
        }
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        s / v.len() as f64
    };
    let class_means: Vec<f64> = by_class.iter().filter(|v| !v.is_empty()).map(|v| avg(v)).collect();
    OracleMetrics {
        challenge: avg(&frame_means),
        pooled: avg(&all),
        mc: avg(&class_means),
    }
}

/// Dice loss of hard predictions: logits of ±1000 saturate the sigmoid to
/// exactly 0 or 1.
pub fn oracle_dice(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (p, g) = (pixel_set(pred), pixel_set(gt));
    let inter = p.intersection(&g).count() as f64;
    let denom = (p.len() + g.len()) as f64;
    let eps = asiseg_core::decoder::DICE_EPS;
    1.0 - (2.0 * inter + eps) / (denom + eps)
}

pub fn hard_logits(m: &BinaryMask) -> MaskLogits {
    let data = m.data().iter().map(|&v| if v == 1 { 1000.0 } else { -1000.0 }).collect();
    MaskLogits::new(Matrix::new(m.height(), m.width(), data).unwrap()).unwrap()
}

pub fn mask_from_bits(h: usize, w: usize, bits: u32) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| bits >> (y * w + x) & 1 == 1)
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

fn to_class_ious(frames: &[Frame]) -> Vec<Vec<ClassIou>> {
    frames
        .iter()
        .map(|f| {
            f.iter()
                .enumerate()
                .filter_map(|(c, pair)| {
                    pair.as_ref().map(|(p, g)| ClassIou {
                        class_index: c,
                        iou: compute_iou(p, g).unwrap(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Up to four frames of `h × w` masks over `k` classes; every frame has at
/// least one present class.
pub fn random_frames(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Frame> {
    let n = rng.gen_range(1..=4);
    (0..n)
        .map(|_| {
            let first = rng.gen_range(0..k);
            (0..k)
                .map(|c| {
                    (c == first || rng.gen_bool(0.5)).then(|| {
                        let d1 = rng.gen_range(0.0..1.0);
                        let d2 = rng.gen_range(0.0..1.0);
                        (random_mask(h, w, d1, rng), random_mask(h, w, d2, rng))
                    })
                })
                .collect()
        })
        .collect()
}

/// Compares every metric with its oracle on one fixture; returns a failure
/// description.
pub fn compare_fixture(frames: &[Frame], k: usize) -> Option<String> {
    let ious = to_class_ious(frames);
    for (f, per) in frames.iter().zip(&ious) {
        let mut it = per.iter();
        for pair in f.iter().flatten() {
            let got = it.next().unwrap().iou;
            let want = oracle_iou(&pair.0, &pair.1);
            if got != want {
                return Some(format!("compute_iou {got} vs oracle {want}"));
            }
            let d = dice_loss(&hard_logits(&pair.0), &pair.1).unwrap();
            let dw = oracle_dice(&pair.0, &pair.1);
            if d != dw {
                return Some(format!("dice_loss {d} vs oracle {dw}"));
            }
        }
    }
    let o = oracle_metrics(frames, k);
    let checks = [
        ("challenge_iou", challenge_iou(&ious), o.challenge),
        ("iou", pooled_iou(&ious), o.pooled),
        ("mc_iou", mc_iou(&ious, k).unwrap(), o.mc),
    ];
    for (name, got, want) in checks {
        if got != want {
            return Some(format!("{name} {got} vs oracle {want}"));
        }
    }
    let per = per_class_iou(&ious, k).unwrap();
    if per.iter().flatten().count() == 0 {
        return Some("no evaluated class".into());
    }
    None
}

/// Every mask pair on grids of at most four pixels, a sampled sweep of the
/// remaining shapes up to 4×4, multi-frame fixtures up to 4×4, and 100 random
/// 16×16 fixtures.
pub fn check_metric_oracles() -> Outcome {
    let mut checked = 0usize;
    let mut fail = None;
    for h in 1..=4 {
        for w in 1..=4 {
            let n = h * w;
            if n <= 4 {
                for a in 0..1u32 << n {
                    for b in 0..1u32 << n {
                        let frame = vec![Some((mask_from_bits(h, w, a), mask_from_bits(h, w, b)))];
                        checked += 1;
                        if let Some(e) = compare_fixture(&[frame], 1) {
                            fail.get_or_insert(format!("{h}x{w} {a:b}/{b:b}: {e}"));
                        }
                    }
                }
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64((h * 10 + w) as u64);
                for _ in 0..2000 {
                    let a = rng.gen_range(0..1u32 << n);
                    let b = rng.gen_range(0..1u32 << n);
                    let frame = vec![Some((mask_from_bits(h, w, a), mask_from_bits(h, w, b)))];
                    checked += 1;
                    if let Some(e) = compare_fixture(&[frame], 1) {
                        fail.get_or_insert(format!("{h}x{w} {a:b}/{b:b}: {e}"));
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + (h * 10 + w) as u64);
            for _ in 0..200 {
                let frames = random_frames(h, w, 3, &mut rng);
                checked += 1;
                if let Some(e) = compare_fixture(&frames, 3) {
                    fail.get_or_insert(format!("{h}x{w} multi-frame: {e}"));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for i in 0..100 {
        let frames = random_frames(16, 16, 7, &mut rng);
        checked += 1;
        if let Some(e) = compare_fixture(&frames, 7) {
            fail.get_or_insert(format!("16x16 fixture {i}: {e}"));
        }
    }
    match fail {
        None => Outcome {
            passed: true,
            detail: format!("{checked} fixtures identical to the oracles"),
        },
        Some(e) => Outcome {
            passed: false,
            detail: e,
        },
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_INSTANCES: u64 = 20;

type Instance = fn(u64, &GradCheckConfig) -> asiseg_core::Result<GradCheckReport>;

pub fn gradient_instances() -> [(&'static str, Instance); 5] {
    [
        ("text_fuse", instances::text_fuse),
        ("distinguishing_attention", instances::distinguishing_attention),
        ("contrastive_loss", instances::contrastive_loss),
        ("dice_loss", instances::dice_loss),
        ("total_loss", instances::total_loss),
    ]
}

/// Worst relative error of one component over the seeded instances.
pub fn check_gradients(name: &str, f: Instance) -> (GradCheckReport, Duration) {
    let config = GradCheckConfig::default();
    let start = Instant::now();
    let mut report = GradCheckReport::default();
    for seed in 0..GRAD_INSTANCES {
        let r = f(seed, &config).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        report = report.merge(r);
    }
    (report, start.elapsed())
}

pub fn check_all_gradients() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, f) in gradient_instances() {
        let (r, _) = check_gradients(name, f);
        passed &= r.max_rel_err <= GRAD_TOLERANCE;
        parts.push(format!("{name} {:.1e}", r.max_rel_err));
    }
    let elapsed = start.elapsed();
    passed &= elapsed <= Duration::from_secs(120);
    Outcome {
        passed,
        detail: format!("max rel err: {}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    }
}

pub fn check_closed_forms() -> Outcome {
    let mut problems = Vec::new();
    for (k, expected) in [(2usize, std::f64::consts::LN_2), (7, 7f64.ln())] {
        let v = ClassPooledEmbeddings {
            values: Matrix::filled(k, 3, 0.25),
            present: vec![true; k],
        };
        let loss = contrastive_loss(&[0.3, -0.1, 0.7], &v, 0, 0.07).unwrap().unwrap();
        if (loss - expected).abs() > 1e-6 {
            problems.push(format!("contrastive K={k}: {loss}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = ImageFeatureMap::new(Matrix::randn(12, 5, 1.0, &mut rng), 3, 4, (24, 32)).unwrap();
    let s = SimilarityMaps {
        values: Matrix::zeros(4, 12),
        h: 3,
        w: 4,
    };
    let fused = visual_fuse(&f, &s).unwrap();
    for m in &fused.maps {
        if m.data().iter().zip(f.values.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            problems.push("visual_fuse with zero similarity changed f".into());
            break;
        }
    }
    let p = Matrix::randn(6, 5, 1.0, &mut rng);
    let out = inverse_residual(&p, &Matrix::zeros(6, 5)).unwrap();
    if out.data().iter().zip(p.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        problems.push("inverse_residual with zero attention changed P".into());
    }
    Outcome {
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            "ln2, ln7 within 1e-6; identities bitwise".into()
        } else {
            problems.join("; ")
        },
    }
}
