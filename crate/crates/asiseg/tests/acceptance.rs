//! End-to-end acceptance criteria. Each prints one `PASS`/`FAIL` line to
//! stdout (uncaptured) and the test fails if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::Write;
use std::time::{Duration, Instant};

use asiseg::dataset::{synth_split, CommandCondition, Dataset};
use asiseg::eval::{evaluate_intention, evaluate_semantic, IntentionResult};
use asiseg::formats::MetricsJson;
use asiseg::train::{train, TrainConfig};
use asiseg_core::audio::{noise_magnitude_for_snr, PerturbKind};
use asiseg_core::knowledge::DescriptionBank;
use asiseg_core::model::{Model, ModelConfig, Variant};
use asiseg_core::synth::{Split, SynthConfig};

use support::Outcome;

const TRAIN_BUDGET: Duration = Duration::from_secs(20 * 60);
const A3_SEEDS: [u64; 3] = [0, 1, 2];

fn report(name: &str, o: &Outcome, failures: &mut Vec<String>) {
    let status = if o.passed { "PASS" } else { "FAIL" };
    let line = format!("{name} {status} {}", o.detail);
    writeln!(std::io::stdout(), "{line}").unwrap();
    if !o.passed {
        failures.push(line);
    }
}

struct Data {
    train: Dataset,
    val: Dataset,
}

fn data(config: &SynthConfig) -> Data {
    Data {
        train: synth_split(config, Split::Train).unwrap(),
        val: synth_split(config, Split::Val).unwrap(),
    }
}

fn variant_config(variant: Variant) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    let mut train = TrainConfig::default();
    if variant == Variant::BASELINE {
        train.absent_per_frame = 0;
    }
    (model, train)
}

fn trained(data: &Data, variant: Variant, seed: u64) -> (Model, Duration) {
    let (mc, mut tc) = variant_config(variant);
    tc.seed = seed;
    let mut model = Model::new(mc, DescriptionBank::default_instruments(), seed).unwrap();
    let start = Instant::now();
    train(&mut model, &data.train, &tc, |_| {}).unwrap();
    (model, start.elapsed())
}

fn intention(model: &Model, val: &Dataset, cond: &CommandCondition) -> IntentionResult {
    evaluate_intention(model, val, cond).unwrap()
}

fn a2(model: &Model, elapsed: Duration, val: &Dataset) -> (Outcome, IntentionResult) {
    let clean = intention(model, val, &CommandCondition::CLEAN);
    let semantic = evaluate_semantic(model, val).unwrap();
    let passed = elapsed <= TRAIN_BUDGET
        && clean.intent_accuracy >= 0.95
        && clean.report.mc_iou >= 0.70
        && semantic.challenge_iou >= 0.75;
    let detail = format!(
        "train {:.0}s (limit {}s), intent acc {:.4} (>= 0.95), intention mc IoU {:.4} (>= 0.70), semantic Challenge IoU {:.4} (>= 0.75)",
        elapsed.as_secs_f64(),
        TRAIN_BUDGET.as_secs(),
        clean.intent_accuracy,
        clean.report.mc_iou,
        semantic.challenge_iou
    );
    (Outcome { passed, detail }, clean)
}

fn a5(model: &Model, clean: &IntentionResult, val: &Dataset) -> Outcome {
    let cond = CommandCondition {
        mispronounce: 0.3,
        perturb: Some((PerturbKind::Noise, noise_magnitude_for_snr(20.0))),
    };
    let noisy = intention(model, val, &cond);
    let drop = clean.report.mc_iou - noisy.report.mc_iou;
    Outcome {
        passed: noisy.intent_accuracy >= 0.90 && drop <= 0.10,
        detail: format!(
            "intent acc {:.4} (>= 0.90), mc IoU {:.4} vs clean {:.4}, drop {:.2} points (<= 10)",
            noisy.intent_accuracy,
            noisy.report.mc_iou,
            clean.report.mc_iou,
            drop * 100.0
        ),
    }
}

fn a3(data: &Data, first_full: &IntentionResult) -> Outcome {
    let mut full = vec![first_full.report.mc_iou];
    let mut base = Vec::new();
    for &seed in &A3_SEEDS {
        if seed != 0 {
            let (m, _) = trained(data, Variant::FULL, seed);
            full.push(intention(&m, &data.val, &CommandCondition::CLEAN).report.mc_iou);
        }
        let (m, _) = trained(data, Variant::BASELINE, seed);
        base.push(intention(&m, &data.val, &CommandCondition::CLEAN).report.mc_iou);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = (mean(&full) - mean(&base)) * 100.0;
    Outcome {
        passed: gain >= 2.0,
        detail: format!(
            "full mc IoU {full:.4?} mean {:.4}, baseline {base:.4?} mean {:.4}, gain {gain:.2} points (>= 2)",
            mean(&full),
            mean(&base)
        ),
    }
}

fn a8() -> Outcome {
    let synth = SynthConfig {
        n_train: 24,
        n_val: 12,
        ..SynthConfig::default()
    };
    let d = data(&synth);
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Model::new(ModelConfig::default(), DescriptionBank::default_instruments(), 0).unwrap();
        let before = model.encoder_checksum();
        train(&mut model, &d.train, &tc, |_| {}).unwrap();
        let after = model.encoder_checksum();
        let r = intention(&model, &d.val, &CommandCondition::CLEAN);
        let json = MetricsJson::new("intention", &r.report, Some(r.intent_accuracy)).to_json();
        (before, after, json)
    };
    let (b1, a1, j1) = run();
    let (b2, a2, j2) = run();
    let frozen = b1 == a1 && b2 == a2 && b1 == b2;
    let identical = j1.as_bytes() == j2.as_bytes();
    Outcome {
        passed: frozen && identical,
        detail: format!(
            "encoder checksum {b1:016x} -> {a1:016x} (unchanged: {frozen}), metrics JSON byte-identical across runs: {identical}"
        ),
    }
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    report("A4", &support::check_metric_oracles(), &mut failures);
    report("A6", &support::check_all_gradients(), &mut failures);
    report("A7", &support::check_closed_forms(), &mut failures);
    report("A8", &a8(), &mut failures);

    let d = data(&SynthConfig::default());
    let (model, elapsed) = trained(&d, Variant::FULL, 0);
    let (outcome, clean) = a2(&model, elapsed, &d.val);
    report("A2", &outcome, &mut failures);
    report("A5", &a5(&model, &clean, &d.val), &mut failures);
    drop(model);
    report("A3", &a3(&d, &clean), &mut failures);

    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
