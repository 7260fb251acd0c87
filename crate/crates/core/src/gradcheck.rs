//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::Result;

/// Settings of [`check_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Step of the fourth-order central difference
    /// `(f(−2h) − 8f(−h) + 8f(h) − f(2h)) / 12h`.
    pub step: f64,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub floor: f64,
    /// At most this many entries of each parameter are probed, evenly spaced.
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_entries: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate(store: &ParamStore, f: &impl Fn(&mut Graph<'_>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::with_params(store);
    let root = f(&mut g)?;
    Ok(g.scalar(root))
}

/// Compares the backward pass of the scalar built by `f` with central
/// differences over entries of `ids`.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    config: &GradCheckConfig,
    f: impl Fn(&mut Graph<'_>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::with_params(store);
        let root = f(&mut g)?;
        g.backward(root).param_grads(&g)
    };
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let grad = analytic.iter().find(|(p, _)| *p == id).map(|(_, m)| m);
        let stride = n.div_ceil(config.max_entries.max(1)).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        for i in picks {
            let orig = store.get(id).data()[i];
            let h = config.step;
            let mut at = |offset: f64| {
                store.get_mut(id).data_mut()[i] = orig + offset;
                evaluate(store, &f)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (m2? - 8.0 * m1? + 8.0 * p1? - p2?) / (12.0 * h);
            let a = grad.map_or(0.0, |m| m.data()[i]);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, config.floor));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Small randomized instances of the differentiable building blocks, each
/// returning the finite-difference comparison for one seed.
pub mod instances {
    use alloc::vec;
    use alloc::vec::Vec;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check_params, GradCheckConfig, GradCheckReport};
    use crate::decoder::{BinaryMask, DecoderConfig};
    use crate::fusion::{LearnableQueries, RgbImage, TextFusion};
    use crate::graph::{Graph, Var};
    use crate::knowledge::{DescriptionBank, InstrumentDescription};
    use crate::model::{ItemTargets, Model, ModelConfig, SegmentInputs};
    use crate::params::{ParamGroup, ParamStore};
    use crate::prompt::{contrastive_loss_var, pool_gt_features, DistinguishingAttention};
    use crate::tensor::Matrix;
    use crate::Result;

    /// `Σ x ⊙ r`: a fixed random projection of a matrix output to a scalar.
    fn project(g: &mut Graph<'_>, x: Var, r: &Matrix) -> Result<Var> {
        let rv = g.input(r.clone());
        let p = g.mul(x, rv)?;
        Ok(g.sum_all(p))
    }

    pub fn text_fuse(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (rng.gen_range(2..5), rng.gen_range(3..7));
        let mut store = ParamStore::new();
        let queries = LearnableQueries::new(&mut store, k, d, &mut rng);
        let text = store.add("text", ParamGroup::Queries, Matrix::randn(k, d, 1.0, &mut rng));
        let fusion = TextFusion::new(&mut store, d, 4, &mut rng);
        let r = Matrix::randn(k, d, 1.0, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        check_params(&mut store, &ids, config, |g| {
            let q = g.param(queries.id);
            let t = g.param(text);
            let out = fusion.forward(g, q, t)?;
            project(g, out.q, &r)
        })
    }

    pub fn distinguishing_attention(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tp, tn, d) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(2..6));
        let mut store = ParamStore::new();
        let fp = store.add("fp", ParamGroup::Queries, Matrix::randn(tp, d, 1.0, &mut rng));
        let fneg = store.add("fneg", ParamGroup::Queries, Matrix::randn(tn, d, 1.0, &mut rng));
        let attn = DistinguishingAttention::new(&mut store, d, 3, &mut rng);
        let r = Matrix::randn(tp, d, 1.0, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        check_params(&mut store, &ids, config, |g| {
            let p = g.param(fp);
            let n = g.param(fneg);
            let (a, _) = attn.forward(g, p, n)?;
            let refined = g.sub(p, a)?;
            project(g, refined, &r)
        })
    }

    fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.4))
    }

    pub fn contrastive_loss(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let mut store = ParamStore::new();
        let anchor = store.add("anchor", ParamGroup::PromptEncoder, Matrix::randn(1, d, 0.3, &mut rng));
        let mut present = vec![true; k];
        for p in present.iter_mut().skip(1) {
            *p = rng.gen_bool(0.7);
        }
        let target = 0;
        let v = crate::prompt::ClassPooledEmbeddings {
            values: Matrix::randn(k, d, 0.3, &mut rng),
            present,
        };
        let tau = rng.gen_range(0.05..1.0);
        check_params(&mut store, &[anchor], config, |g| {
            let a = g.param(anchor);
            Ok(contrastive_loss_var(g, a, &v, target, tau)?.expect("target present"))
        })
    }

    pub fn dice_loss(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let logits = store.add("logits", ParamGroup::Decoder, Matrix::randn(h * w, 1, 2.0, &mut rng));
        let gt = random_mask(h, w, &mut rng).as_f64();
        check_params(&mut store, &[logits], config, |g| {
            let x = g.param(logits);
            g.dice_loss(x, &gt, crate::decoder::DICE_EPS)
        })
    }

    /// A reduced model small enough for exhaustive probing.
    pub fn small_model_config(num_classes: usize) -> ModelConfig {
        let d = 8;
        ModelConfig {
            num_classes,
            dim: d,
            key_dim: 8,
            encoder_blocks: 1,
            decoder: DecoderConfig {
                dim: d,
                prompt_dim: d,
                layers: 1,
                heads: 2,
                cross_dim: 4,
                mlp_dim: 16,
                up_channels: (4, 4),
            },
            ..ModelConfig::default()
        }
    }

    pub fn small_bank(num_classes: usize) -> DescriptionBank {
        let entries = (0..num_classes)
            .map(|k| InstrumentDescription {
                class_index: k,
                class_name: alloc::format!("tool {k}"),
                description: alloc::format!("instrument number {k} with a shaft of length {}", k + 2),
            })
            .collect();
        DescriptionBank::new(entries, Some(num_classes)).expect("valid bank")
    }

    /// Dice plus contrastive loss of the whole segmentation path, probed over
    /// every trainable parameter.
    pub fn total_loss(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..4);
        let mut model = Model::new(small_model_config(k), small_bank(k), seed)?;
        let size = 16;
        let pixels: Vec<u8> = (0..size * size * 3).map(|_| rng.gen()).collect();
        let image = RgbImage::from_u8(size, size, &pixels)?;
        let features = model.encode_image(&image)?;
        let text = model.text_features()?;
        let masks: Vec<BinaryMask> = (0..k).map(|_| random_mask(size, size, &mut rng)).collect();
        let gt: Vec<Matrix> = masks.iter().map(BinaryMask::to_matrix).collect();
        let pooled = pool_gt_features(&features, &gt)?;
        let target = rng.gen_range(0..k);
        let ids = model.store.trainable_ids();
        let Model { ref mut store, .. } = model;
        let mut scratch = core::mem::take(store);
        let shell = Model {
            store: ParamStore::new(),
            ..model
        };
        check_params(&mut scratch, &ids, config, |g| {
            let inputs = SegmentInputs {
                features: &features,
                image: &image,
                text: &text,
                target,
            };
            let targets = ItemTargets {
                gt: &masks[target],
                pooled: &pooled,
                audio_embedding: None,
                tau: 0.07,
            };
            Ok(shell.loss_vars(g, &inputs, &targets, 1.0)?.1)
        })
    }
}
