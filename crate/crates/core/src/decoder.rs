//! Two-way attention mask decoder driven by foreground/background prompts.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;

use crate::fusion::{sinusoidal_positions, ImageFeatureMap, RgbImage};
use crate::graph::{Graph, Var};
use crate::nn::{AttentionLayer, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::prompt::PromptPair;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub prompt_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Inner width of the cross-attention blocks.
    pub cross_dim: usize,
    pub mlp_dim: usize,
    /// Channels after the first (×2) and second (×4) upsampling steps.
    pub up_channels: (usize, usize),
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            prompt_dim: 64,
            layers: 2,
            heads: 4,
            cross_dim: 32,
            mlp_dim: 128,
            up_channels: (32, 16),
        }
    }
}

const UP1: usize = 2;
const UP2: usize = 4;

/// Total upsampling factor from the feature grid to pixels.
pub const UPSAMPLE: usize = UP1 * UP2;

#[derive(Clone, Debug)]
struct TwoWayLayer {
    self_attn: AttentionLayer,
    norm1: LayerNorm,
    token_to_image: AttentionLayer,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: AttentionLayer,
    norm4: LayerNorm,
}

/// Parameters of the mask decoder.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    mask_token: ParamId,
    fg_type: ParamId,
    bg_type: ParamId,
    prompt_in: Option<Linear>,
    layers: Vec<TwoWayLayer>,
    final_attn: AttentionLayer,
    final_norm: LayerNorm,
    up1: Linear,
    up1_norm: LayerNorm,
    up2: Linear,
    rgb_skip: Linear,
    hyper: Mlp,
}

pub type DecoderParams = MaskDecoder;

impl MaskDecoder {
    pub fn new<R: RngCore + ?Sized>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Self {
        let gr = ParamGroup::Decoder;
        let d = config.dim;
        let attn = |s: &mut ParamStore, name: &str, inner: usize, r: &mut R| {
            AttentionLayer::new(s, name, gr, d, inner, config.heads, true, true, 1.0, r)
        };
        let layers = (0..config.layers)
            .map(|i| TwoWayLayer {
                self_attn: attn(store, &format!("decoder.layer{i}.self_attn"), d, rng),
                norm1: LayerNorm::new(store, &format!("decoder.layer{i}.norm1"), gr, d),
                token_to_image: attn(store, &format!("decoder.layer{i}.t2i"), config.cross_dim, rng),
                norm2: LayerNorm::new(store, &format!("decoder.layer{i}.norm2"), gr, d),
                mlp: Mlp::new(store, &format!("decoder.layer{i}.mlp"), gr, &[d, config.mlp_dim, d], 1.0, rng),
                norm3: LayerNorm::new(store, &format!("decoder.layer{i}.norm3"), gr, d),
                image_to_token: attn(store, &format!("decoder.layer{i}.i2t"), config.cross_dim, rng),
                norm4: LayerNorm::new(store, &format!("decoder.layer{i}.norm4"), gr, d),
            })
            .collect();
        let token = |s: &mut ParamStore, name: &str, r: &mut R| s.add(name, gr, Matrix::randn(1, d, 1.0, r));
        let mask_token = token(store, "decoder.mask_token", rng);
        let fg_type = token(store, "decoder.fg_type", rng);
        let bg_type = token(store, "decoder.bg_type", rng);
        let prompt_in = (config.prompt_dim != d)
            .then(|| Linear::new(store, "decoder.prompt_in", gr, config.prompt_dim, d, false, 1.0, rng));
        let (c1, c2) = config.up_channels;
        Self {
            config,
            mask_token,
            fg_type,
            bg_type,
            prompt_in,
            layers,
            final_attn: attn(store, "decoder.final_attn", config.cross_dim, rng),
            final_norm: LayerNorm::new(store, "decoder.final_norm", gr, d),
            up1: Linear::new(store, "decoder.up1", gr, d, UP1 * UP1 * c1, true, 1.0, rng),
            up1_norm: LayerNorm::new(store, "decoder.up1_norm", gr, c1),
            up2: Linear::new(store, "decoder.up2", gr, c1, UP2 * UP2 * c2, true, 1.0, rng),
            rgb_skip: Linear::new(store, "decoder.rgb_skip", gr, 3, c2, true, 1.0, rng),
            hyper: Mlp::new(store, "decoder.hyper", gr, &[d, d, c2], 1.0, rng),
        }
    }

    /// Records the decoder. `features` is `(h·w) × dim`, `fg` is `1 × d_p`,
    /// `bg` is `m × d_p` (or absent), `pixels` is `(H·W) × 3`. Returns
    /// `(H·W) × 1` logits in row-major pixel order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        features: Var,
        h: usize,
        w: usize,
        fg: Var,
        bg: Option<Var>,
        pixels: &Matrix,
    ) -> Result<Var> {
        let d = self.config.dim;
        if g.shape(features) != (h * w, d) {
            return Err(Error::Shape(format!(
                "decoder expects {}x{d} features, got {:?}",
                h * w,
                g.shape(features)
            )));
        }
        if pixels.shape() != (h * w * UPSAMPLE * UPSAMPLE, 3) {
            return Err(Error::Shape(format!(
                "decoder expects {}x{} pixels for a {h}x{w} grid",
                h * UPSAMPLE,
                w * UPSAMPLE
            )));
        }
        let (nf, pf) = g.shape(fg);
        if nf == 0 {
            return Err(Error::Argument("at least one foreground prompt is required".into()));
        }
        if pf != self.config.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt dim {pf} vs decoder {}",
                self.config.prompt_dim
            )));
        }

        let fg = self.project_prompt(g, fg)?;
        let fg_type = g.param(self.fg_type);
        let mut parts = Vec::with_capacity(3);
        parts.push(g.param(self.mask_token));
        parts.push(g.add_row(fg, fg_type)?);
        if let Some(bg) = bg {
            if g.shape(bg).1 != self.config.prompt_dim {
                return Err(Error::Shape("background prompt dim".into()));
            }
            if g.shape(bg).0 > 0 {
                let bg = self.project_prompt(g, bg)?;
                let bg_type = g.param(self.bg_type);
                parts.push(g.add_row(bg, bg_type)?);
            }
        }
        let token_pe = g.concat_rows(&parts)?;
        let image_pe = g.input(sinusoidal_positions(h, w, d));

        let mut queries = token_pe;
        let mut keys = features;
        for layer in &self.layers {
            let (a, _) = layer.self_attn.forward(g, queries, queries, queries)?;
            let x = g.add(queries, a)?;
            queries = layer.norm1.forward(g, x)?;

            let q = g.add(queries, token_pe)?;
            let k = g.add(keys, image_pe)?;
            let (a, _) = layer.token_to_image.forward(g, q, k, keys)?;
            let x = g.add(queries, a)?;
            queries = layer.norm2.forward(g, x)?;

            let m = layer.mlp.forward(g, queries)?;
            let x = g.add(queries, m)?;
            queries = layer.norm3.forward(g, x)?;

            let q = g.add(queries, token_pe)?;
            let k = g.add(keys, image_pe)?;
            let (a, _) = layer.image_to_token.forward(g, k, q, queries)?;
            let x = g.add(keys, a)?;
            keys = layer.norm4.forward(g, x)?;
        }
        let q = g.add(queries, token_pe)?;
        let k = g.add(keys, image_pe)?;
        let (a, _) = self.final_attn.forward(g, q, k, keys)?;
        let x = g.add(queries, a)?;
        queries = self.final_norm.forward(g, x)?;

        let (c1, c2) = self.config.up_channels;
        let up = self.up1.forward(g, keys)?;
        let up = pixel_shuffle(g, up, h, w, UP1, c1)?;
        let up = self.up1_norm.forward(g, up)?;
        let up = g.gelu(up);
        let up = self.up2.forward(g, up)?;
        let up = pixel_shuffle(g, up, h * UP1, w * UP1, UP2, c2)?;
        let rgb = g.input(pixels.clone());
        let skip = self.rgb_skip.forward(g, rgb)?;
        let up = g.add(up, skip)?;
        let pix = g.gelu(up);

        let mask_token = g.slice_rows(queries, 0, 1)?;
        let hyper = self.hyper.forward(g, mask_token)?;
        g.matmul_t(pix, hyper)
    }

    fn project_prompt(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        match &self.prompt_in {
            Some(l) => l.forward(g, p),
            None => Ok(p),
        }
    }
}

/// Rearranges `(h·w) × (f·f·c)` into `(f·h · f·w) × c`; column block
/// `dy·f + dx` of token `(y, x)` lands on pixel `(f·y + dy, f·x + dx)`.
fn pixel_shuffle(g: &mut Graph<'_>, x: Var, h: usize, w: usize, f: usize, c: usize) -> Result<Var> {
    let cols = f * f * c;
    let (oh, ow) = (h * f, w * f);
    let mut index = Vec::with_capacity(oh * ow * c);
    for py in 0..oh {
        for px in 0..ow {
            let t = (py / f) * w + px / f;
            let block = (py % f) * f + px % f;
            index.extend((0..c).map(|ch| t * cols + block * c + ch));
        }
    }
    g.gather(x, index, oh * ow, c)
}

/// Real-valued mask scores at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub values: Matrix,
}

impl MaskLogits {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("mask logits".into()));
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Strictly `{0, 1}` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask values for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: alloc::vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| u8::from(f(i / width, i % width))).collect();
        Self { height, width, data }
    }

    /// Accepts exactly `0.0` and `1.0`.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for &v in m.data() {
            if v == 0.0 || v == 1.0 {
                data.push(v as u8);
            } else {
                return Err(Error::Validation(format!("mask value {v} is not binary")));
            }
        }
        Ok(Self {
            height: m.rows(),
            width: m.cols(),
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.height, self.width, |y, x| f64::from(self.data[y * self.width + x]))
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn decode_mask(
    f: &ImageFeatureMap,
    prompts: &PromptPair,
    image: &RgbImage,
    params: &MaskDecoder,
    store: &ParamStore,
) -> Result<MaskLogits> {
    if (image.height, image.width) != (f.h * UPSAMPLE, f.w * UPSAMPLE) {
        return Err(Error::Shape(format!(
            "image {}x{} does not match a {}x{} feature grid",
            image.height, image.width, f.h, f.w
        )));
    }
    let mut g = Graph::with_params(store);
    let feats = g.input(f.values.clone());
    let fg = g.input(prompts.foreground.clone());
    let bg = (prompts.background.rows() > 0).then(|| g.input(prompts.background.clone()));
    let out = params.forward(&mut g, feats, f.h, f.w, fg, bg, &image.pixels)?;
    let values = Matrix::new(image.height, image.width, g.value(out).data().to_vec())?;
    MaskLogits::new(values)
}

/// `1` where `logits > t`.
pub fn threshold(logits: &MaskLogits, t: f64) -> BinaryMask {
    let v = &logits.values;
    BinaryMask::from_fn(v.rows(), v.cols(), |y, x| v.get(y, x) > t)
}

/// Squared-denominator soft dice on sigmoid probabilities, `ε = 1e-6`.
pub fn dice_loss(logits: &MaskLogits, gt: &BinaryMask) -> Result<f64> {
    if logits.values.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs mask {:?}",
            logits.values.shape(),
            gt.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(logits.values.clone());
    let l = g.dice_loss(x, &gt.as_f64(), DICE_EPS)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        let l = MaskLogits::new(Matrix::new(2, 2, alloc::vec![-1.0, 2.0, 0.5, -0.2]).unwrap()).unwrap();
        assert_eq!(threshold(&l, 0.0).data(), &[0, 1, 1, 0]);
        let neg = MaskLogits::new(Matrix::filled(3, 3, -1.0)).unwrap();
        assert!(threshold(&neg, 0.0).is_empty());
        let pos = MaskLogits::new(Matrix::filled(3, 3, 1.0)).unwrap();
        assert_eq!(threshold(&pos, 0.0).count(), 9);
    }

    #[test]
    fn dice_hard_examples() {
        let big = 60.0;
        let gt = BinaryMask::new(2, 2, alloc::vec![1, 1, 0, 0]).unwrap();
        let same = MaskLogits::new(Matrix::new(2, 2, alloc::vec![big, big, -big, -big]).unwrap()).unwrap();
        assert!(dice_loss(&same, &gt).unwrap() < 1e-5);
        let disjoint = MaskLogits::new(Matrix::new(2, 2, alloc::vec![-big, -big, big, big]).unwrap()).unwrap();
        assert!((dice_loss(&disjoint, &gt).unwrap() - 1.0).abs() < 1e-5);
        let half = MaskLogits::new(Matrix::new(2, 2, alloc::vec![big, -big, -big, -big]).unwrap()).unwrap();
        assert!((dice_loss(&half, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert!(matches!(
            dice_loss(&half, &BinaryMask::zeros(1, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_binary_values_are_rejected() {
        assert!(matches!(BinaryMask::new(1, 2, alloc::vec![0, 2]), Err(Error::Validation(_))));
        let m = Matrix::new(1, 2, alloc::vec![0.0, 0.5]).unwrap();
        assert!(matches!(BinaryMask::from_matrix(&m), Err(Error::Validation(_))));
    }

    fn setup(seed: u64) -> (ParamStore, MaskDecoder, ImageFeatureMap, RgbImage, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let config = DecoderConfig {
            dim: 8,
            prompt_dim: 8,
            heads: 2,
            cross_dim: 4,
            mlp_dim: 8,
            up_channels: (4, 3),
            ..DecoderConfig::default()
        };
        let dec = MaskDecoder::new(&mut store, config, &mut rng);
        let f = ImageFeatureMap::new(Matrix::randn(4, 8, 1.0, &mut rng), 2, 2, (16, 16)).unwrap();
        let img = RgbImage {
            pixels: Matrix::from_fn(256, 3, |r, c| ((r * 3 + c) % 7) as f64 / 7.0),
            height: 16,
            width: 16,
        };
        (store, dec, f, img, rng)
    }

    #[test]
    fn output_matches_image_size_and_is_deterministic() {
        let (store, dec, f, img, mut rng) = setup(5);
        let prompts = PromptPair {
            foreground: Matrix::randn(1, 8, 1.0, &mut rng),
            background: Matrix::randn(6, 8, 1.0, &mut rng),
        };
        let a = decode_mask(&f, &prompts, &img, &dec, &store).unwrap();
        let b = decode_mask(&f, &prompts, &img, &dec, &store).unwrap();
        assert_eq!((a.height(), a.width()), (16, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn background_order_does_not_matter() {
        let (store, dec, f, img, mut rng) = setup(6);
        let fg = Matrix::randn(1, 8, 1.0, &mut rng);
        let bg = Matrix::randn(5, 8, 1.0, &mut rng);
        let order = [3, 0, 4, 1, 2];
        let rows: Vec<&[f64]> = order.iter().map(|&i| bg.row(i)).collect();
        let permuted = Matrix::new(5, 8, rows.concat()).unwrap();
        let a = decode_mask(&f, &PromptPair { foreground: fg.clone(), background: bg }, &img, &dec, &store).unwrap();
        let b = decode_mask(&f, &PromptPair { foreground: fg, background: permuted }, &img, &dec, &store).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-6);
    }

    #[test]
    fn missing_foreground_is_an_argument_error() {
        let (store, dec, f, img, mut rng) = setup(7);
        let prompts = PromptPair {
            foreground: Matrix::zeros(0, 8),
            background: Matrix::randn(2, 8, 1.0, &mut rng),
        };
        assert!(matches!(
            decode_mask(&f, &prompts, &img, &dec, &store),
            Err(Error::Argument(_))
        ));
    }
}
