//! Parameterized layers recorded on a [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;

use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{math, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights ~ `N(0, gain² / in_dim)`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / math::sqrt(in_dim as f64);
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Matrix::randn(in_dim, out_dim, std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Matrix::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Row-wise layer norm with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), group, Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(y, gamma)?;
        g.add_row(y, beta)
    }
}

/// Stack of linear layers with GELU between them (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    group,
                    w[0],
                    w[1],
                    true,
                    gain,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

/// Columns `start..end` of `a`.
pub fn slice_cols(g: &mut Graph<'_>, a: Var, start: usize, end: usize) -> Result<Var> {
    let (rows, cols) = g.shape(a);
    let width = end - start;
    let index = (0..rows)
        .flat_map(|r| (start..end).map(move |c| r * cols + c))
        .collect();
    g.gather(a, index, rows, width)
}

/// Scaled dot-product attention split into `heads` column groups.
///
/// Returns the concatenated head outputs and, per head, the softmax weight
/// matrix (`queries × keys`).
pub fn attend(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let dk = g.shape(q).1;
    let dv = g.shape(v).1;
    if heads == 1 {
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / math::sqrt(dk as f64));
        let w = g.softmax_rows(scores);
        let out = g.matmul(w, v)?;
        return Ok((out, alloc::vec![w]));
    }
    let (hk, hv) = (dk / heads, dv / heads);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_cols(g, q, h * hk, (h + 1) * hk)?;
        let kh = slice_cols(g, k, h * hk, (h + 1) * hk)?;
        let vh = slice_cols(g, v, h * hv, (h + 1) * hv)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, 1.0 / math::sqrt(hk as f64));
        let w = g.softmax_rows(scores);
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    Ok((g.concat_cols(&outs)?, weights))
}

/// Attention block with separate query/key/value projections and an optional
/// output projection.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Option<Linear>,
    pub heads: usize,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: RngCore + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        inner: usize,
        heads: usize,
        with_out: bool,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mk = |s: &mut ParamStore, part: &str, i: usize, o: usize, r: &mut R| {
            let n: String = format!("{name}.{part}");
            Linear::new(s, &n, group, i, o, bias, gain, r)
        };
        let q = mk(store, "q", dim, inner, rng);
        let k = mk(store, "k", dim, inner, rng);
        let v = mk(store, "v", dim, if with_out { inner } else { dim }, rng);
        let out = with_out.then(|| mk(store, "out", inner, dim, rng));
        Self { q, k, v, out, heads }
    }

    /// `q_in` supplies queries; `k_in` keys; `v_in` values.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, k_in)?;
        let v = self.v.forward(g, v_in)?;
        let (o, w) = attend(g, q, k, v, self.heads)?;
        let o = match &self.out {
            Some(out) => out.forward(g, o)?,
            None => o,
        };
        Ok((o, w))
    }
}
