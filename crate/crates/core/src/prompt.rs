//! Contrastive prompt encoder: distinguishing cross-attention with an inverse
//! residual, the InfoNCE objective against mask-pooled image features, and the
//! foreground/background prompt projection.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::fusion::ImageFeatureMap;
use crate::graph::{Graph, Var};
use crate::nn::{AttentionLayer, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Single-head attention without biases or output projection; shared by the
/// required→irrelevant and irrelevant→required directions.
#[derive(Clone, Debug)]
pub struct DistinguishingAttention {
    pub attn: AttentionLayer,
}

impl DistinguishingAttention {
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: AttentionLayer::new(
                store,
                "prompt.distinguish",
                ParamGroup::PromptEncoder,
                dim,
                key_dim,
                1,
                false,
                false,
                1.0,
                rng,
            ),
        }
    }

    /// `softmax(Q(fp)·K(fn)ᵀ/√D)·V(fn)`; returns the output and the weights.
    pub fn forward(&self, g: &mut Graph<'_>, fp: Var, fneg: Var) -> Result<(Var, Var)> {
        let (tn, dn) = g.shape(fneg);
        let (_, dp) = g.shape(fp);
        if tn == 0 {
            return Err(Error::Argument("irrelevant feature sequence is empty".into()));
        }
        if dn != dp || dp != self.attn.q.in_dim {
            return Err(Error::Shape(format!(
                "distinguishing attention: dims {dp} / {dn}, model {}",
                self.attn.q.in_dim
            )));
        }
        let (out, w) = self.attn.forward(g, fp, fneg, fneg)?;
        Ok((out, w[0]))
    }
}

pub fn distinguishing_attention(
    fp: &Matrix,
    fneg: &Matrix,
    params: &DistinguishingAttention,
    store: &ParamStore,
) -> Result<Matrix> {
    let mut g = Graph::with_params(store);
    let a = g.input(fp.clone());
    let b = g.input(fneg.clone());
    let (out, _) = params.forward(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

/// `P* = P − attention`.
pub fn inverse_residual(p: &Matrix, attn_out: &Matrix) -> Result<Matrix> {
    p.zip_map(attn_out, |a, b| a - b)
}

/// Refined required tokens and, per irrelevant class, refined irrelevant tokens.
#[derive(Clone, Debug)]
pub struct RefinedVars {
    pub required: Var,
    pub irrelevant: Vec<Var>,
}

/// Which irrelevant features feed the background prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackgroundSource {
    /// `N* = N − Attention(F⁻, F⁺)` per irrelevant class.
    #[default]
    Refined,
    /// The irrelevant maps as they come out of fusion.
    Raw,
}

impl DistinguishingAttention {
    /// Applies both refinement directions. With no irrelevant maps the
    /// required tokens pass through unchanged.
    pub fn refine(
        &self,
        g: &mut Graph<'_>,
        required: Var,
        irrelevant: &[Var],
        background: BackgroundSource,
    ) -> Result<RefinedVars> {
        if irrelevant.is_empty() {
            return Ok(RefinedVars {
                required,
                irrelevant: Vec::new(),
            });
        }
        let negatives = g.concat_rows(irrelevant)?;
        let (a, _) = self.forward(g, required, negatives)?;
        let p_star = g.sub(required, a)?;
        let n_star = match background {
            BackgroundSource::Raw => irrelevant.to_vec(),
            BackgroundSource::Refined => {
                let mut out = Vec::with_capacity(irrelevant.len());
                for &n in irrelevant {
                    let (b, _) = self.forward(g, n, required)?;
                    out.push(g.sub(n, b)?);
                }
                out
            }
        };
        Ok(RefinedVars {
            required: p_star,
            irrelevant: n_star,
        })
    }
}

/// Per-class mean of image features under the max-pooled ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPooledEmbeddings {
    pub values: Matrix,
    pub present: Vec<bool>,
}

/// Max-pools an `H × W` binary mask onto an `h × w` grid.
pub fn downsample_mask(mask: &Matrix, h: usize, w: usize) -> Result<Vec<bool>> {
    let (hh, ww) = mask.shape();
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::Shape(format!("mask {hh}x{ww} onto grid {h}x{w}")));
    }
    let (fy, fx) = (hh / h, ww / w);
    let mut out = alloc::vec![false; h * w];
    for y in 0..hh {
        for x in 0..ww {
            let v = mask.get(y, x);
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("mask value {v} at ({y}, {x}) is not binary")));
            }
            if v == 1.0 {
                out[(y / fy) * w + x / fx] = true;
            }
        }
    }
    Ok(out)
}

pub fn pool_gt_features(f: &ImageFeatureMap, gt_masks: &[Matrix]) -> Result<ClassPooledEmbeddings> {
    let d = f.dim();
    let mut values = Matrix::zeros(gt_masks.len(), d);
    let mut present = Vec::with_capacity(gt_masks.len());
    for (k, mask) in gt_masks.iter().enumerate() {
        let cells = downsample_mask(mask, f.h, f.w)?;
        let n = cells.iter().filter(|&&c| c).count();
        present.push(n > 0);
        if n == 0 {
            continue;
        }
        let row = values.row_mut(k);
        for (t, _) in cells.iter().enumerate().filter(|(_, &c)| c) {
            for (o, v) in row.iter_mut().zip(f.values.row(t)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(ClassPooledEmbeddings { values, present })
}

fn check_loss_args(p_dim: usize, v: &ClassPooledEmbeddings, target: usize, tau: f64) -> Result<bool> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    if target >= v.present.len() {
        return Err(Error::Argument(format!(
            "target {target} outside 0..{}",
            v.present.len()
        )));
    }
    if p_dim != v.values.cols() {
        return Err(Error::Shape(format!(
            "anchor dim {p_dim} vs pooled dim {}",
            v.values.cols()
        )));
    }
    Ok(v.present[target])
}

/// InfoNCE over the present classes; `None` when the target class is absent
/// (the sample is then left out of the batch mean).
pub fn contrastive_loss_var(
    g: &mut Graph<'_>,
    anchor: Var,
    v: &ClassPooledEmbeddings,
    target: usize,
    tau: f64,
) -> Result<Option<Var>> {
    if !check_loss_args(g.shape(anchor).1, v, target, tau)? {
        return Ok(None);
    }
    let keys = g.input(v.values.clone());
    let logits = g.matmul_t(anchor, keys)?;
    let logits = g.scale(logits, 1.0 / tau);
    Ok(Some(g.softmax_nll(logits, target, &v.present)?))
}

pub fn contrastive_loss(
    anchor: &[f64],
    v: &ClassPooledEmbeddings,
    target: usize,
    tau: f64,
) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let a = g.input(Matrix::row_vector(anchor.to_vec()));
    Ok(contrastive_loss_var(&mut g, a, v, target, tau)?.map(|l| g.scalar(l)))
}

/// Foreground (`1 × d_p`) and background (`m_b × d_p`) prompt embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub foreground: Matrix,
    pub background: Matrix,
}

impl PromptPair {
    pub fn num_foreground(&self) -> usize {
        self.foreground.rows()
    }

    pub fn num_background(&self) -> usize {
        self.background.rows()
    }
}

/// Linear map from mean-pooled refined tokens to prompt embeddings.
#[derive(Clone, Debug)]
pub struct PromptProjection {
    pub proj: Linear,
}

impl PromptProjection {
    pub fn new<R: RngCore + ?Sized>(store: &mut ParamStore, dim: usize, prompt_dim: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(
                store,
                "prompt.projection",
                ParamGroup::PromptEncoder,
                dim,
                prompt_dim,
                true,
                1.0,
                rng,
            ),
        }
    }

    /// Returns the foreground var and, if any irrelevant maps exist, the
    /// stacked background var.
    pub fn forward(&self, g: &mut Graph<'_>, refined: &RefinedVars) -> Result<(Var, Option<Var>)> {
        let p = g.mean_rows(refined.required);
        let fg = self.proj.forward(g, p)?;
        if refined.irrelevant.is_empty() {
            return Ok((fg, None));
        }
        let pooled: Vec<Var> = refined.irrelevant.iter().map(|&n| g.mean_rows(n)).collect();
        let stacked = g.concat_rows(&pooled)?;
        Ok((fg, Some(self.proj.forward(g, stacked)?)))
    }
}

pub fn emit_prompts(
    required: &Matrix,
    irrelevant: &[Matrix],
    params: &PromptProjection,
    store: &ParamStore,
) -> Result<PromptPair> {
    if !required.is_finite() || irrelevant.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("refined features".into()));
    }
    let mut g = Graph::with_params(store);
    let r = g.input(required.clone());
    let irr = irrelevant.iter().map(|m| g.input(m.clone())).collect();
    let (fg, bg) = params.forward(
        &mut g,
        &RefinedVars {
            required: r,
            irrelevant: irr,
        },
    )?;
    let prompt_dim = params.proj.out_dim;
    Ok(PromptPair {
        foreground: g.value(fg).clone(),
        background: bg.map_or_else(|| Matrix::zeros(0, prompt_dim), |b| g.value(b).clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pooled(k: usize, present: usize) -> ClassPooledEmbeddings {
        ClassPooledEmbeddings {
            values: Matrix::from_fn(k, 3, |r, c| if r < present { (c + 1) as f64 } else { 0.0 }),
            present: (0..k).map(|r| r < present).collect(),
        }
    }

    #[test]
    fn equal_logits_give_log_of_present_count() {
        let p = [0.2, -0.1, 0.4];
        let l2 = contrastive_loss(&p, &pooled(4, 2), 1, 0.07).unwrap().unwrap();
        assert!((l2 - LN_2).abs() < 1e-6);
        let l7 = contrastive_loss(&p, &pooled(7, 7), 3, 0.07).unwrap().unwrap();
        assert!((l7 - libm::log(7.0)).abs() < 1e-6);
    }

    #[test]
    fn absent_target_and_bad_temperature() {
        assert_eq!(contrastive_loss(&[1.0; 3], &pooled(4, 2), 3, 0.1).unwrap(), None);
        assert!(matches!(
            contrastive_loss(&[1.0; 3], &pooled(4, 2), 0, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let values = Matrix::from_fn(4, 2, |t, c| (t * 2 + c) as f64);
        let f = ImageFeatureMap::new(values, 2, 2, (4, 4)).unwrap();
        let one_cell = Matrix::from_fn(4, 4, |y, x| if y < 2 && x >= 2 { 1.0 } else { 0.0 });
        let full = Matrix::filled(4, 4, 1.0);
        let two = Matrix::from_fn(4, 4, |y, x| if (y, x) == (0, 0) || (y, x) == (3, 3) { 1.0 } else { 0.0 });
        let empty = Matrix::zeros(4, 4);
        let p = pool_gt_features(&f, &[one_cell, full, two, empty]).unwrap();
        assert_eq!(p.values.row(0), f.at(0, 1));
        assert_eq!(p.values.row(1), &[3.0, 4.0]);
        assert_eq!(p.values.row(2), &[3.0, 4.0]);
        assert_eq!(p.present, [true, true, true, false]);
        let bad = Matrix::filled(4, 4, 0.5);
        assert!(matches!(pool_gt_features(&f, &[bad]), Err(Error::Validation(_))));
    }

    #[test]
    fn single_token_negatives_broadcast_their_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let da = DistinguishingAttention::new(&mut store, 4, 4, &mut rng);
        let fp = Matrix::randn(3, 4, 1.0, &mut rng);
        let fneg = Matrix::randn(1, 4, 1.0, &mut rng);
        let out = distinguishing_attention(&fp, &fneg, &da, &store).unwrap();
        let v = fneg.matmul(store.get(da.attn.v.weight)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
        assert!(matches!(
            distinguishing_attention(&fp, &Matrix::zeros(0, 4), &da, &store),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn prompt_counts_follow_the_irrelevant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let pp = PromptProjection::new(&mut store, 4, 4, &mut rng);
        let req = Matrix::randn(5, 4, 1.0, &mut rng);
        let irr: Vec<Matrix> = (0..6).map(|_| Matrix::randn(5, 4, 1.0, &mut rng)).collect();
        let pair = emit_prompts(&req, &irr, &pp, &store).unwrap();
        assert_eq!((pair.num_foreground(), pair.num_background()), (1, 6));
        let pair = emit_prompts(&req, &[], &pp, &store).unwrap();
        assert_eq!((pair.num_foreground(), pair.num_background()), (1, 0));

        *store.get_mut(pp.proj.weight) = Matrix::identity(4);
        let token = Matrix::row_vector(alloc::vec![1.0, -2.0, 0.5, 3.0]);
        let pair = emit_prompts(&token, &[], &pp, &store).unwrap();
        assert_eq!(pair.foreground, token);
    }
}
