//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Every forward computation in the model is recorded on a [`Graph`]; the
//! plain (non-differentiated) APIs simply build a throwaway graph and read the
//! result. Gradients are exact for every op below and are checked against
//! central finite differences in the test-suite.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{math, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel index for [`Graph::gather`]: the output entry is zero.
pub const ZERO_INDEX: usize = usize::MAX;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    MeanSoftplus(Var),
    Dice {
        logits: Var,
        target: Vec<f64>,
        eps: f64,
    },
    SoftmaxNll {
        logits: Var,
        target: usize,
        include: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph without parameter access; only [`Graph::input`] leaves.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store.expect("graph was built without a parameter store")
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store().get(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Add a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(shape_err!("add_row {:?} + {:?}", am.shape(), rm.shape()));
        }
        let r = rm.data();
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + r[j]);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Scale row `i` of `a` by `col[i]` (`col` is `r × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(col));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(shape_err!("mul_col {:?} * {:?}", am.shape(), cm.shape()));
        }
        let c = cm.data();
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) * c[i]);
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    /// Scale column `j` of `a` by `row[j]` (`row` is `1 × c`).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(shape_err!("mul_row {:?} * {:?}", am.shape(), rm.shape()));
        }
        let r = rm.data();
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) * r[j]);
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (mean, rstd) = row_stats(x.row(r), eps);
            for (o, v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = (v - mean) * rstd;
            }
        }
        self.push(out, Op::LayerNorm(a, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for p in parts {
            let m = self.value(*p);
            if m.rows() != rows {
                return Err(shape_err!("concat_cols: {} vs {} rows", m.rows(), rows));
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// `out.data[i] = src.data[index[i]]`, or zero for [`ZERO_INDEX`].
    /// Covers reshapes, slicing, permutations and zero padding.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(shape_err!(
                "gather: {} indices for {}x{}",
                index.len(),
                rows,
                cols
            ));
        }
        let s = self.value(src).data();
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            if i == ZERO_INDEX {
                data.push(0.0);
            } else if i < s.len() {
                data.push(s[i]);
            } else {
                return Err(shape_err!("gather index {} out of {}", i, s.len()));
            }
        }
        let v = Matrix::new(rows, cols, data)?;
        Ok(self.push(v, Op::Gather(src, index)))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        let index = (start * cols..end * cols).collect();
        self.gather(a, index, end - start, cols)
    }

    /// Column `c` of `a` as an `r × 1` matrix.
    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let index = (0..rows).map(|r| r * cols + c).collect();
        self.gather(a, index, rows, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let index = (0..cols)
            .flat_map(|c| (0..rows).map(move |r| r * cols + c))
            .collect();
        self.gather(a, index, cols, rows)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::row_vector(vec![self.value(a).sum()]);
        self.push(v, Op::SumAll(a))
    }

    /// Mean of `ln(1 + e^x)` over all entries: binary cross-entropy of
    /// `sigmoid(a)` against an all-zero target.
    pub fn mean_softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len().max(1) as f64;
        let v = x.data().iter().map(|&v| math::softplus(v)).sum::<f64>() / n;
        self.push(Matrix::row_vector(vec![v]), Op::MeanSoftplus(a))
    }

    /// Squared-denominator dice loss on `sigmoid(logits)` against a binary target.
    pub fn dice_loss(&mut self, logits: Var, target: &[f64], eps: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != target.len() {
            return Err(shape_err!(
                "dice: {} logits vs {} target pixels",
                x.len(),
                target.len()
            ));
        }
        let (inter, denom) = dice_terms(x.data(), target);
        let loss = 1.0 - (2.0 * inter + eps) / (denom + eps);
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::Dice {
                logits,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    /// `-log softmax(logits)[target]` over the included entries of a `1 × n` row.
    pub fn softmax_nll(&mut self, logits: Var, target: usize, include: &[bool]) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != 1 || x.cols() != include.len() || target >= include.len() {
            return Err(shape_err!(
                "softmax_nll: logits {:?}, {} include flags, target {}",
                x.shape(),
                include.len(),
                target
            ));
        }
        if !include[target] {
            return Err(crate::Error::Argument(alloc::format!(
                "target {target} is not among the included entries"
            )));
        }
        let loss = log_sum_exp(x.data(), include) - x.data()[target];
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::SoftmaxNll {
                logits,
                target,
                include: include.to_vec(),
            },
        ))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(
            self.nodes[root.0].value.rows(),
            self.nodes[root.0].value.cols(),
            1.0,
        ));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b)).expect("shape");
                let gb = val(*a).t_matmul(g).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.matmul(val(*b)).expect("shape");
                let gb = g.t_matmul(val(*a)).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), |x, y| x * y).expect("shape");
                let gb = g.zip_map(val(*a), |x, y| x * y).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulCol(a, col) => {
                let c = val(*col).data();
                let am = val(*a);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |r, j| g.get(r, j) * c[r]);
                let gc = Matrix::from_fn(g.rows(), 1, |r, _| {
                    g.row(r).iter().zip(am.row(r)).map(|(x, y)| x * y).sum()
                });
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::MulRow(a, row) => {
                let rv = val(*row).data();
                let am = val(*a);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |r, j| g.get(r, j) * rv[j]);
                let gr = column_sums(&g.zip_map(am, |x, y| x * y).expect("shape"));
                accumulate(grads, *a, ga);
                accumulate(grads, *row, gr);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gy), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gy - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g
                    .zip_map(val(*a), |gy, x| gy * math::gelu_grad(x))
                    .expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let n = x.cols() as f64;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (_, rstd) = row_stats(x.row(r), *eps);
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = rstd * (gv - mean_g - yv * mean_gy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    let gp = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                    offset += cols;
                    accumulate(grads, *p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    accumulate(grads, *p, g.slice_rows(offset, offset + rows));
                    offset += rows;
                }
            }
            Op::Gather(src, index) => {
                let (rows, cols) = val(*src).shape();
                let mut gs = Matrix::zeros(rows, cols);
                let d = gs.data_mut();
                for (gv, &ix) in g.data().iter().zip(index) {
                    if ix != ZERO_INDEX {
                        d[ix] += gv;
                    }
                }
                accumulate(grads, *src, gs);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = val(*a).shape();
                let inv = 1.0 / rows as f64;
                let ga = Matrix::from_fn(rows, cols, |_, c| g.get(0, c) * inv);
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (rows, cols) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(rows, cols, g.get(0, 0)));
            }
            Op::MeanSoftplus(a) => {
                let x = val(*a);
                let scale = g.get(0, 0) / x.len().max(1) as f64;
                accumulate(grads, *a, x.map(|v| scale * math::sigmoid(v)));
            }
            Op::Dice {
                logits,
                target,
                eps,
            } => {
                let x = val(*logits);
                let (inter, denom) = dice_terms(x.data(), target);
                let num = 2.0 * inter + eps;
                let den = denom + eps;
                let upstream = g.get(0, 0);
                let data = x
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&xv, &t)| {
                        let p = math::sigmoid(xv);
                        let dp = -(2.0 * t * den - num * 2.0 * p) / (den * den);
                        upstream * dp * p * (1.0 - p)
                    })
                    .collect();
                let ga = Matrix::new(x.rows(), x.cols(), data).expect("shape");
                accumulate(grads, *logits, ga);
            }
            Op::SoftmaxNll {
                logits,
                target,
                include,
            } => {
                let x = val(*logits);
                let probs = masked_softmax(x.data(), include);
                let upstream = g.get(0, 0);
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let hot = if j == *target { 1.0 } else { 0.0 };
                        if include[j] {
                            upstream * (p - hot)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *logits, Matrix::new(1, x.cols(), data).expect("shape"));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / math::sqrt(var + eps))
}

fn dice_terms(logits: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&x, &t) in logits.iter().zip(target) {
        let p = math::sigmoid(x);
        inter += p * t;
        denom += p * p + t * t;
    }
    (inter, denom)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - m);
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// `log Σ exp(x_i)` over the entries flagged in `include`, max-shifted.
pub fn log_sum_exp(x: &[f64], include: &[bool]) -> f64 {
    let m = x
        .iter()
        .zip(include)
        .filter(|(_, &i)| i)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x
        .iter()
        .zip(include)
        .filter(|(_, &i)| i)
        .map(|(v, _)| math::exp(v - m))
        .sum();
    m + math::ln(s)
}

/// Softmax over the entries flagged in `include`; excluded entries get 0.
pub fn masked_softmax(x: &[f64], include: &[bool]) -> Vec<f64> {
    let m = x
        .iter()
        .zip(include)
        .filter(|(_, &i)| i)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x
        .iter()
        .zip(include)
        .map(|(v, &i)| if i { math::exp(v - m) } else { 0.0 })
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf, summed over repeated uses.
    pub fn param_grads(&self, graph: &Graph<'_>) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = Vec::new();
        for (i, node) in graph.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                match out.iter_mut().find(|(pid, _)| pid == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((*id, g.clone())),
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::randn(rows, cols, 1.0, &mut rng)
    }

    fn check(x: &Matrix, build: impl Fn(&mut Graph<'_>, Var) -> Var) {
        let f = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.input(m.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&mut g, v);
        let analytic = g.backward(out).wrt(v).unwrap().clone();
        let numeric = numeric_grad(x, f);
        let scale = numeric.data().iter().fold(1e-8_f64, |a, b| a.max(b.abs()));
        let err = analytic.max_abs_diff(&numeric) / scale;
        assert!(err < 1e-6, "relative gradient error {err}");
    }

    #[test]
    fn elementary_ops_have_exact_gradients() {
        let x = sample(3, 4, 1);
        let w = sample(4, 5, 2);
        let row = sample(1, 4, 3);
        check(&x, |g, v| {
            let w = g.input(w.clone());
            let y = g.matmul(v, w).unwrap();
            let y = g.gelu(y);
            let s = g.sum_all(y);
            s
        });
        check(&x, |g, v| {
            let r = g.input(row.clone());
            let y = g.add_row(v, r).unwrap();
            let y = g.mul_row(y, r).unwrap();
            let y = g.softmax_rows(y);
            let z = g.mul(y, v).unwrap();
            g.sum_all(z)
        });
        check(&x, |g, v| {
            let y = g.layer_norm(v, 1e-5);
            let z = g.mul(y, v).unwrap();
            g.sum_all(z)
        });
        check(&x, |g, v| {
            let t = g.transpose(v).unwrap();
            let y = g.matmul_t(t, t).unwrap();
            let c = g.column(v, 2).unwrap();
            let z = g.mul_col(v, c).unwrap();
            let zz = g.concat_rows(&[z, v]).unwrap();
            let m = g.mean_rows(zz);
            let s1 = g.sum_all(y);
            let s2 = g.sum_all(m);
            let s = g.sub(s1, s2).unwrap();
            g.scale(s, 0.5)
        });
    }

    #[test]
    fn loss_ops_have_exact_gradients() {
        let x = sample(1, 6, 4);
        let target = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        check(&x, |g, v| g.dice_loss(v, &target, 1e-6).unwrap());
        let include = [true, false, true, true, true, false];
        check(&x, |g, v| g.softmax_nll(v, 2, &include).unwrap());
    }

    #[test]
    fn nll_ignores_excluded_entries() {
        let mut g = Graph::new();
        let x = g.input(Matrix::row_vector(vec![0.0, 100.0, 0.0]));
        let l = g.softmax_nll(x, 0, &[true, false, true]).unwrap();
        assert!((g.scalar(l) - core::f64::consts::LN_2).abs() < 1e-12);
    }
}
