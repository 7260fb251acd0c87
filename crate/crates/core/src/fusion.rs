//! Intention-oriented multimodal fusion.
//!
//! Learnable per-class queries and text features attend to each other
//! ([`TextFusion`]); the fused instrument queries are correlated with image
//! features into per-class similarity maps, which re-weight the image
//! features ([`visual_fuse`]). The recognized intent then splits the per-class
//! features into the required map and the irrelevant ones.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::graph::{Graph, Var};
use crate::nn::{attend, AttentionLayer, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{math, Error, Result};

/// `K × d` trainable class queries.
#[derive(Clone, Debug)]
pub struct LearnableQueries {
    pub id: ParamId,
    pub num_classes: usize,
    pub dim: usize,
}

impl LearnableQueries {
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        num_classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / math::sqrt(dim as f64);
        let id = store.add(
            "queries",
            ParamGroup::Queries,
            Matrix::randn(num_classes, dim, std, rng),
        );
        Self {
            id,
            num_classes,
            dim,
        }
    }
}

/// Mutual cross-attention between text features and learnable queries,
/// followed by an MLP over the concatenation (`2d → 2d → d`).
#[derive(Clone, Debug)]
pub struct TextFusion {
    pub q_text: Linear,
    pub k_text: Linear,
    pub v_text: Linear,
    pub q_query: Linear,
    pub k_query: Linear,
    pub v_query: Linear,
    pub mlp: Mlp,
    pub key_dim: usize,
}

/// Gain of the query/key projections: rows of unit norm then give attention
/// logits of roughly unit spread instead of a near-uniform softmax.
pub const QK_GAIN: f64 = 8.0;

impl TextFusion {
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Fusion;
        let mut lin = |name: &str, o: usize, gain: f64, r: &mut R| {
            Linear::new(store, &format!("text_fusion.{name}"), g, dim, o, false, gain, r)
        };
        let q_text = lin("q_text", key_dim, QK_GAIN, rng);
        let k_text = lin("k_text", key_dim, QK_GAIN, rng);
        let v_text = lin("v_text", dim, 1.0, rng);
        let q_query = lin("q_query", key_dim, QK_GAIN, rng);
        let k_query = lin("k_query", key_dim, QK_GAIN, rng);
        let v_query = lin("v_query", dim, 1.0, rng);
        let mlp = Mlp::new(store, "text_fusion.mlp", g, &[2 * dim, 2 * dim, dim], 1.0, rng);
        Self {
            q_text,
            k_text,
            v_text,
            q_query,
            k_query,
            v_query,
            mlp,
            key_dim,
        }
    }
}

/// Intermediates of [`TextFusion`] kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct TextFuseVars {
    /// Text rows attending over query keys/values.
    pub q_t: Var,
    /// Query rows attending over text keys/values.
    pub q_c: Var,
    pub weights_t: Var,
    pub weights_c: Var,
    /// Fused instrument queries, `K × d`.
    pub q: Var,
}

impl TextFusion {
    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, text: Var) -> Result<TextFuseVars> {
        let (kq, dq) = g.shape(queries);
        let (kt, dt) = g.shape(text);
        if dq != dt || dq != self.v_text.in_dim {
            return Err(Error::Shape(format!(
                "text fusion: queries {kq}x{dq}, text {kt}x{dt}, model d={}",
                self.v_text.in_dim
            )));
        }
        if kq != kt {
            return Err(Error::Shape(format!("{kq} queries vs {kt} text rows")));
        }
        let qt = self.q_text.forward(g, text)?;
        let kt_ = self.k_text.forward(g, text)?;
        let vt = self.v_text.forward(g, text)?;
        let qc = self.q_query.forward(g, queries)?;
        let kc = self.k_query.forward(g, queries)?;
        let vc = self.v_query.forward(g, queries)?;
        let (q_t, wt) = attend(g, qt, kc, vc, 1)?;
        let (q_c, wc) = attend(g, qc, kt_, vt, 1)?;
        let cat = g.concat_cols(&[q_t, q_c])?;
        let q = self.mlp.forward(g, cat)?;
        Ok(TextFuseVars {
            q_t,
            q_c,
            weights_t: wt[0],
            weights_c: wc[0],
            q,
        })
    }
}

/// Fused `K × d` instrument queries.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentQueryMatrix {
    pub values: Matrix,
}

pub fn text_fuse(
    queries: &LearnableQueries,
    text: &Matrix,
    fusion: &TextFusion,
    params: &ParamStore,
) -> Result<InstrumentQueryMatrix> {
    let mut g = Graph::with_params(params);
    let qv = g.param(queries.id);
    let tv = g.input(text.clone());
    let out = fusion.forward(&mut g, qv, tv)?;
    Ok(InstrumentQueryMatrix {
        values: g.value(out.q).clone(),
    })
}

/// `h × w × d` image features stored as `(h·w) × d`, row-major positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    pub values: Matrix,
    pub h: usize,
    pub w: usize,
    pub source_size: (usize, usize),
}

impl ImageFeatureMap {
    pub fn new(values: Matrix, h: usize, w: usize, source_size: (usize, usize)) -> Result<Self> {
        if h * w == 0 || values.rows() != h * w {
            return Err(Error::Shape(format!(
                "feature map {}x{} for a {h}x{w} grid",
                values.rows(),
                values.cols()
            )));
        }
        Ok(Self {
            values,
            h,
            w,
            source_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.values.row(y * self.w + x)
    }
}

/// RGB image with values in `[0, 1]`, stored as `(H·W) × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub pixels: Matrix,
    pub height: usize,
    pub width: usize,
}

impl RgbImage {
    pub fn from_u8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width} RGB image",
                rgb.len()
            )));
        }
        let data = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self {
            pixels: Matrix::new(height * width, 3, data)?,
            height,
            width,
        })
    }
}

/// 2-D sinusoidal position code for an `h × w` grid, `(h·w) × dim`.
pub fn sinusoidal_positions(h: usize, w: usize, dim: usize) -> Matrix {
    let quarter = dim / 4;
    Matrix::from_fn(h * w, dim, |t, c| {
        let (y, x) = ((t / w) as f64, (t % w) as f64);
        let (pos, c) = if c < dim / 2 { (y, c) } else { (x, c - dim / 2) };
        let i = (c % quarter.max(1)) as f64;
        let freq = 1.0 / math::powf(100.0, i / quarter.max(1) as f64);
        if c < quarter {
            math::sin(pos * freq)
        } else {
            math::cos(pos * freq)
        }
    })
}

/// Patch embedding followed by pre-norm residual self-attention blocks and a
/// final layer norm.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: usize,
    pub dim: usize,
    pub embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionLayer,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl ImageEncoder {
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        patch: usize,
        dim: usize,
        num_blocks: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::ImageEncoder;
        let embed = Linear::new(store, "image_encoder.patch", g, patch * patch * 3, dim, true, 1.0, rng);
        let blocks = (0..num_blocks)
            .map(|b| {
                let n = format!("image_encoder.block{b}");
                EncoderBlock {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), g, dim),
                    attn: AttentionLayer::new(store, &format!("{n}.attn"), g, dim, dim, 4, true, true, 1.0, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), g, dim),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), g, &[dim, 2 * dim, dim], 1.0, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "image_encoder.norm", g, dim);
        Self {
            patch,
            dim,
            embed,
            blocks,
            final_norm,
        }
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height == 0 || width == 0 || height % self.patch != 0 || width % self.patch != 0 {
            return Err(Error::Shape(format!(
                "image {height}x{width} is not divisible by stride {}",
                self.patch
            )));
        }
        Ok((height / self.patch, width / self.patch))
    }

    /// Records the encoder on `g`; returns the `(h·w) × d` feature var.
    pub fn forward(&self, g: &mut Graph<'_>, image: &RgbImage) -> Result<Var> {
        let (h, w) = self.grid(image.height, image.width)?;
        let p = self.patch;
        let mut index = Vec::with_capacity(h * w * p * p * 3);
        for ty in 0..h {
            for tx in 0..w {
                for py in 0..p {
                    for px in 0..p {
                        let pix = (ty * p + py) * image.width + tx * p + px;
                        for c in 0..3 {
                            index.push(pix * 3 + c);
                        }
                    }
                }
            }
        }
        let centered = image.pixels.map(|v| v - 0.5);
        let src = g.input(centered);
        let patches = g.gather(src, index, h * w, p * p * 3)?;
        let x = self.embed.forward(g, patches)?;
        let pos = g.input(sinusoidal_positions(h, w, self.dim));
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            let n = b.norm1.forward(g, x)?;
            let (a, _) = b.attn.forward(g, n, n, n)?;
            x = g.add(x, a)?;
            let n = b.norm2.forward(g, x)?;
            let m = b.mlp.forward(g, n)?;
            x = g.add(x, m)?;
        }
        self.final_norm.forward(g, x)
    }

    pub fn encode(&self, params: &ParamStore, image: &RgbImage) -> Result<ImageFeatureMap> {
        let (h, w) = self.grid(image.height, image.width)?;
        let mut g = Graph::with_params(params);
        let f = self.forward(&mut g, image)?;
        ImageFeatureMap::new(g.value(f).clone(), h, w, (image.height, image.width))
    }
}

pub fn encode_image(encoder: &ImageEncoder, params: &ParamStore, image: &RgbImage) -> Result<ImageFeatureMap> {
    encoder.encode(params, image)
}

/// `K × (h·w)`; entry `(k, t)` is `⟨q_k, f_t⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMaps {
    pub values: Matrix,
    pub h: usize,
    pub w: usize,
}

impl SimilarityMaps {
    pub fn at(&self, k: usize, y: usize, x: usize) -> f64 {
        self.values.get(k, y * self.w + x)
    }
}

pub fn similarity_maps(q: &InstrumentQueryMatrix, f: &ImageFeatureMap) -> Result<SimilarityMaps> {
    if q.values.cols() != f.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs feature dim {}",
            q.values.cols(),
            f.dim()
        )));
    }
    Ok(SimilarityMaps {
        values: q.values.matmul_t(&f.values)?,
        h: f.h,
        w: f.w,
    })
}

/// Per-class feature maps `f ⊙ S^k + f`, each `(h·w) × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalFeatureSet {
    pub maps: Vec<Matrix>,
    pub h: usize,
    pub w: usize,
}

impl MultimodalFeatureSet {
    pub fn num_classes(&self) -> usize {
        self.maps.len()
    }
}

/// Graph form of the visual fusion: one var per class.
pub fn visual_fuse_vars(g: &mut Graph<'_>, f: Var, s: Var) -> Result<Vec<Var>> {
    let (t, _) = g.shape(f);
    let (k, ts) = g.shape(s);
    if ts != t {
        return Err(Error::Shape(format!("similarity has {ts} positions, features {t}")));
    }
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let col = g.gather(s, (c * t..(c + 1) * t).collect(), t, 1)?;
        let scaled = g.mul_col(f, col)?;
        out.push(g.add(scaled, f)?);
    }
    Ok(out)
}

pub fn visual_fuse(f: &ImageFeatureMap, s: &SimilarityMaps) -> Result<MultimodalFeatureSet> {
    if (s.h, s.w) != (f.h, f.w) || s.values.cols() != f.tokens() {
        return Err(Error::Shape(format!(
            "similarity grid {}x{} vs feature grid {}x{}",
            s.h, s.w, f.h, f.w
        )));
    }
    let mut g = Graph::new();
    let fv = g.input(f.values.clone());
    let sv = g.input(s.values.clone());
    let maps = visual_fuse_vars(&mut g, fv, sv)?
        .into_iter()
        .map(|v| g.value(v).clone())
        .collect();
    Ok(MultimodalFeatureSet {
        maps,
        h: f.h,
        w: f.w,
    })
}

/// Required map for the target class and the remaining maps in ascending
/// class order.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentPartition {
    pub required: Matrix,
    pub irrelevant: Vec<Matrix>,
    pub irrelevant_classes: Vec<usize>,
    pub target_class: usize,
}

impl IntentPartition {
    /// Puts every map back at its class index.
    pub fn reassemble(&self, h: usize, w: usize) -> MultimodalFeatureSet {
        let k = self.irrelevant.len() + 1;
        let mut maps: Vec<Option<Matrix>> = (0..k).map(|_| None).collect();
        maps[self.target_class] = Some(self.required.clone());
        for (c, m) in self.irrelevant_classes.iter().zip(&self.irrelevant) {
            maps[*c] = Some(m.clone());
        }
        MultimodalFeatureSet {
            maps: maps.into_iter().map(|m| m.expect("partition covers every class")).collect(),
            h,
            w,
        }
    }
}

/// Class order of the irrelevant maps for `target` out of `k` classes.
pub fn irrelevant_classes(k: usize, target: usize) -> Vec<usize> {
    (0..k).filter(|&c| c != target).collect()
}

pub fn assign_by_intent(f: &MultimodalFeatureSet, target_class: usize) -> Result<IntentPartition> {
    let k = f.num_classes();
    if target_class >= k {
        return Err(Error::Argument(format!(
            "target class {target_class} outside 0..{k}"
        )));
    }
    let classes = irrelevant_classes(k, target_class);
    Ok(IntentPartition {
        required: f.maps[target_class].clone(),
        irrelevant: classes.iter().map(|&c| f.maps[c].clone()).collect(),
        irrelevant_classes: classes,
        target_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_fuse_shapes_and_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let queries = LearnableQueries::new(&mut store, 7, 64, &mut rng);
        let fusion = TextFusion::new(&mut store, 64, 64, &mut rng);
        let text = Matrix::randn(7, 64, 0.125, &mut rng);
        let mut g = Graph::with_params(&store);
        let qv = g.param(queries.id);
        let tv = g.input(text.clone());
        let out = fusion.forward(&mut g, qv, tv).unwrap();
        assert_eq!(g.shape(out.q), (7, 64));
        for w in [out.weights_t, out.weights_c] {
            for r in 0..7 {
                let s: f64 = g.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let wrong = Matrix::zeros(7, 32);
        assert!(matches!(
            text_fuse(&queries, &wrong, &fusion, &store),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_class_attention_returns_the_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let queries = LearnableQueries::new(&mut store, 1, 8, &mut rng);
        let fusion = TextFusion::new(&mut store, 8, 4, &mut rng);
        let text = Matrix::randn(1, 8, 1.0, &mut rng);
        let mut g = Graph::with_params(&store);
        let qv = g.param(queries.id);
        let tv = g.input(text);
        let out = fusion.forward(&mut g, qv, tv).unwrap();
        assert_eq!(g.value(out.weights_t).data(), &[1.0]);
        let vc = store.get(queries.id).matmul(store.get(fusion.v_query.weight)).unwrap();
        assert_eq!(g.value(out.q_t), &vc);
    }

    #[test]
    fn image_encoder_shapes_and_stride_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, 8, 64, 2, &mut rng);
        let img = RgbImage::from_u8(64, 64, &alloc::vec![100u8; 64 * 64 * 3]).unwrap();
        let f = enc.encode(&store, &img).unwrap();
        assert_eq!((f.h, f.w, f.dim()), (8, 8, 64));
        let bad = RgbImage::from_u8(60, 64, &alloc::vec![0u8; 60 * 64 * 3]).unwrap();
        assert!(matches!(enc.encode(&store, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn partition_examples() {
        let maps: Vec<Matrix> = (0..7).map(|k| Matrix::filled(2, 3, k as f64)).collect();
        let set = MultimodalFeatureSet { maps, h: 1, w: 2 };
        let p = assign_by_intent(&set, 2).unwrap();
        assert_eq!(p.required, set.maps[2]);
        assert_eq!(p.irrelevant_classes, [0, 1, 3, 4, 5, 6]);
        assert_eq!(p.reassemble(1, 2), set);
        assert!(matches!(assign_by_intent(&set, 7), Err(Error::Argument(_))));

        let single = MultimodalFeatureSet {
            maps: alloc::vec![Matrix::zeros(2, 3)],
            h: 1,
            w: 2,
        };
        assert!(assign_by_intent(&single, 0).unwrap().irrelevant.is_empty());
    }
}
