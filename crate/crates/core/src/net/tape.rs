//! Reverse-mode differentiation over 2-D matrices.
//!
//! Every forward op appends a node holding its value and whatever it needs
//! for the backward pass. `backward` walks the tape once in reverse; nodes
//! whose inputs never require gradients are skipped.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::{cst, Mat, Scalar};
use crate::net::params::{ParamStore, Role};
use crate::objectives;
use crate::patchseq::ZERO_SLOT;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Axpy(usize, usize, T),
    Scale(usize, T),
    Gather { src: usize, idx: Arc<[u32]> },
    ConcatRows(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    ColumnAffine { x: usize, scale: Vec<T> },
    Gelu(usize),
    Attention { qkv: usize, heads: usize, probs: Vec<T> },
    Softmax(usize),
    CrossEntropy { probs: usize, labels: Rc<[i32]>, count: usize },
    Entropy(usize),
    MaskedMse { recon: usize, target: Rc<Mat<T>>, masked: Rc<[bool]>, count: usize },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-column batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into running averages.
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter; repeated calls return the same node.
    /// Only trainable parameters receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var(i));
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, p.role == Role::Trainable);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(Error::Shape(format!("matmul {}x{} @ {}x{}", va.rows, va.cols, vb.rows, vb.cols)));
        }
        let out = va.matmul(vb);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows != vb.rows || va.cols != vb.cols {
            return Err(Error::Shape(format!("add {}x{} + {}x{}", va.rows, va.cols, vb.rows, vb.cols)));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), ng))
    }

    /// `a + w * b` for same-shape operands.
    pub fn axpy(&mut self, a: Var, b: Var, w: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows != vb.rows || va.cols != vb.cols {
            return Err(Error::Shape("axpy shapes differ".into()));
        }
        let out = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| x + w * y).collect(),
        };
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::Axpy(a.0, b.0, w), ng))
    }

    /// `w * x`.
    pub fn scale(&mut self, x: Var, w: T) -> Var {
        let vx = self.value(x);
        let out = Mat {
            rows: vx.rows,
            cols: vx.cols,
            data: vx.data.iter().map(|&v| w * v).collect(),
        };
        let ng = self.ng(x.0);
        self.push(out, Op::Scale(x.0, w), ng)
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows != 1 || vb.cols != vx.cols {
            return Err(Error::Shape(format!("bias {}x{} for {} columns", vb.rows, vb.cols, vx.cols)));
        }
        let mut out = vx.clone();
        for row in out.data.chunks_mut(vx.cols) {
            for (o, &b) in row.iter_mut().zip(&vb.data) {
                *o = *o + b;
            }
        }
        let ng = self.ng(x.0) || self.ng(bias.0);
        Ok(self.push(out, Op::AddRow(x.0, bias.0), ng))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Builds a `rows x cols` matrix whose flat element `i` is
    /// `src.data[idx[i]]`, or zero for [`ZERO_SLOT`].
    pub fn gather(&mut self, src: Var, idx: Arc<[u32]>, rows: usize, cols: usize) -> Result<Var> {
        if idx.len() != rows * cols {
            return Err(Error::Shape(format!("gather map {} for {rows}x{cols}", idx.len())));
        }
        let vs = self.value(src);
        let n = vs.data.len();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i == ZERO_SLOT {
                data.push(T::zero());
            } else if (i as usize) < n {
                data.push(vs.data[i as usize]);
            } else {
                return Err(Error::Shape(format!("gather index {i} beyond {n}")));
            }
        }
        let ng = self.ng(src.0);
        Ok(self.push(Mat::from_vec(rows, cols, data), Op::Gather { src: src.0, idx }, ng))
    }

    /// Selects whole rows.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let cols = self.value(src).cols;
        let idx: Vec<u32> = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| (r * cols + c) as u32))
            .collect();
        self.gather(src, idx.into(), rows.len(), cols)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows > 0 && va.cols != vb.cols {
            return Err(Error::Shape(format!("concat {} vs {} columns", va.cols, vb.cols)));
        }
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let out = Mat::from_vec(va.rows + vb.rows, va.cols, data);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(out, Op::ConcatRows(a.0, b.0), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows, vx.cols);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Shape("layer norm affine width".into()));
        }
        let eps = cst::<T>(NORM_EPS);
        let n = cst::<T>(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Column-wise normalization using this batch's statistics (training mode).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows, vx.cols);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Shape("batch norm affine width".into()));
        }
        if rows < 2 {
            return Err(Error::Shape("batch norm needs at least two positions".into()));
        }
        let eps = cst::<T>(NORM_EPS);
        let n = cst::<T>(rows as f64);
        let mut mean = vec![T::zero(); cols];
        let mut var = vec![T::zero(); cols];
        for row in vx.data.chunks(cols) {
            for c in 0..cols {
                mean[c] = mean[c] + row[c];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        for row in vx.data.chunks(cols) {
            for c in 0..cols {
                let d = row[c] - mean[c];
                var[c] = var[c] + d * d;
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / n).collect();
        let rstd: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let h = (vx.data[r * cols + c] - mean[c]) * rstd[c];
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v / cst((rows - 1) as f64)).collect(),
        };
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let v = self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Batch norm in evaluation mode: fixed statistics, learned affine.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let cols = self.value(x).cols;
        if mean.len() != cols || var.len() != cols {
            return Err(Error::Shape("running statistics width".into()));
        }
        let eps = cst::<T>(NORM_EPS);
        let g = self.value(gamma).data.clone();
        let scale: Vec<T> = (0..cols).map(|c| g[c] / (var[c] + eps).sqrt()).collect();
        let shift: Vec<T> = (0..cols).map(|c| -mean[c] * scale[c]).collect();
        let vx = self.value(x);
        let mut out = vx.clone();
        for row in out.data.chunks_mut(cols) {
            for c in 0..cols {
                row[c] = row[c] * scale[c] + shift[c];
            }
        }
        // The gamma dependence of `scale` is not tracked; evaluation only.
        let ng = self.ng(x.0);
        let scaled = self.push(out, Op::ColumnAffine { x: x.0, scale }, ng);
        self.add_row(scaled, beta)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Mat {
            rows: vx.rows,
            cols: vx.cols,
            data: vx.data.iter().map(|&v| gelu(v)).collect(),
        };
        let ng = self.ng(x.0);
        self.push(out, Op::Gelu(x.0), ng)
    }

    /// Multi-head scaled dot-product self-attention on a packed `n x 3d`
    /// `[q | k | v]` matrix; returns the `n x d` concatenated head outputs.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        if heads == 0 || v.cols % (3 * heads) != 0 {
            return Err(Error::Shape(format!("qkv width {} for {heads} heads", v.cols)));
        }
        let (n, d) = (v.rows, v.cols / 3);
        let dh = d / heads;
        let scale = T::one() / cst::<T>(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = Mat::zeros(n, d);
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let qi = &v.data[i * 3 * d + qo..i * 3 * d + qo + dh];
                let row = &mut p[i * n..(i + 1) * n];
                for j in 0..n {
                    let kj = &v.data[j * 3 * d + ko..j * 3 * d + ko + dh];
                    row[j] = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(row);
                for j in 0..n {
                    let w = row[j];
                    let vj = &v.data[j * 3 * d + vo..j * 3 * d + vo + dh];
                    let o = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc = *oc + w * vc;
                    }
                }
            }
        }
        let ng = self.ng(qkv.0);
        Ok(self.push(out, Op::Attention { qkv: qkv.0, heads, probs }, ng))
    }

    /// Attention probabilities of the given attention node, `heads x n x n`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols;
        for row in out.data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(x.0);
        self.push(out, Op::Softmax(x.0), ng)
    }

    /// Mean cross-entropy over non-IGNORE labels of a probability map.
    pub fn cross_entropy(&mut self, probs: Var, labels: Rc<[i32]>) -> Result<(Var, usize)> {
        let (v, count) = objectives::ce_value(self.value(probs), &labels)?;
        let ng = self.ng(probs.0);
        let out = self.push(Mat::from_vec(1, 1, vec![v]), Op::CrossEntropy { probs: probs.0, labels, count }, ng);
        Ok((out, count))
    }

    /// Pixel-mean normalized entropy of a probability map.
    pub fn entropy(&mut self, probs: Var) -> Result<Var> {
        let v = objectives::entropy_value(self.value(probs))?;
        let ng = self.ng(probs.0);
        Ok(self.push(Mat::from_vec(1, 1, vec![v]), Op::Entropy(probs.0), ng))
    }

    /// Mean over flagged rows of squared error divided by column count.
    pub fn masked_mse(&mut self, recon: Var, target: Rc<Mat<T>>, masked: Rc<[bool]>) -> Result<(Var, usize)> {
        let (v, count) = objectives::mse_value(self.value(recon), &target, &masked)?;
        let ng = self.ng(recon.0);
        let out = self.push(
            Mat::from_vec(1, 1, vec![v]),
            Op::MaskedMse {
                recon: recon.0,
                target,
                masked,
                count,
            },
            ng,
        );
        Ok((out, count))
    }

    /// Gradients of the scalar `root` with respect to every bound trainable
    /// parameter.
    pub fn backward(&self, root: Var) -> BTreeMap<String, Mat<T>> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Mat::filled(rv.rows, rv.cols, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.params
            .iter()
            .filter_map(|(name, &i)| grads[i].take().map(|g| (name.clone(), g)))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Mat<T>>], i: usize, g: Mat<T>) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(vb));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, va.t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Axpy(a, b, w) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let mut gb = g.clone();
                    gb.data.iter_mut().for_each(|v| *v = *v * *w);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, w) => {
                let mut gx = g.clone();
                gx.data.iter_mut().for_each(|v| *v = *v * *w);
                self.accumulate(grads, *x, gx);
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::Gather { src, idx } => {
                let vs = &self.nodes[*src].value;
                let mut gs = Mat::zeros(vs.rows, vs.cols);
                for (k, &j) in idx.iter().enumerate() {
                    if j != ZERO_SLOT {
                        gs.data[j as usize] = gs.data[j as usize] + g.data[k];
                    }
                }
                self.accumulate(grads, *src, gs);
            }
            Op::ConcatRows(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let split = va.data.len();
                self.accumulate(grads, *a, Mat::from_vec(va.rows, va.cols, g.data[..split].to_vec()));
                self.accumulate(grads, *b, Mat::from_vec(vb.rows, vb.cols, g.data[split..].to_vec()));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols;
                let gv = &self.nodes[*gamma].value.data;
                let n = cst::<T>(cols as f64);
                if self.ng(*x) {
                    let mut gx = Mat::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[c];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            gx.data[r * cols + c] = rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.affine_grads(g, xhat, *gamma, *beta, grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (g.rows, g.cols);
                let gv = &self.nodes[*gamma].value.data;
                let n = cst::<T>(rows as f64);
                if self.ng(*x) {
                    let mut m1 = vec![T::zero(); cols];
                    let mut m2 = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let dh = g.data[r * cols + c] * gv[c];
                            m1[c] = m1[c] + dh;
                            m2[c] = m2[c] + dh * xhat[r * cols + c];
                        }
                    }
                    let mut gx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let dh = g.data[r * cols + c] * gv[c];
                            gx.data[r * cols + c] =
                                rstd[c] * (dh - m1[c] / n - xhat[r * cols + c] * m2[c] / n);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.affine_grads(g, xhat, *gamma, *beta, grads);
            }
            Op::ColumnAffine { x, scale } => {
                let mut gx = g.clone();
                for row in gx.data.chunks_mut(g.cols) {
                    for (v, &s) in row.iter_mut().zip(scale) {
                        *v = *v * s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[*x].value;
                let gx = Mat {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&vx.data).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect(),
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { qkv, heads, probs } => {
                let v = &self.nodes[*qkv].value;
                let (n, d) = (v.rows, v.cols / 3);
                let dh = d / heads;
                let scale = T::one() / cst::<T>(dh as f64).sqrt();
                let mut gq = Mat::zeros(n, 3 * d);
                let stride = 3 * d;
                let mut dp = vec![T::zero(); n];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    for i in 0..n {
                        let go = &g.data[i * d + h * dh..i * d + (h + 1) * dh];
                        // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
                        for j in 0..n {
                            let vj = &v.data[j * stride + vo..j * stride + vo + dh];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            let w = p[i * n + j];
                            for c in 0..dh {
                                let k = j * stride + vo + c;
                                gq.data[k] = gq.data[k] + w * go[c];
                            }
                        }
                        let dot: T = (0..n).map(|j| dp[j] * p[i * n + j]).sum();
                        for j in 0..n {
                            let ds = p[i * n + j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            for c in 0..dh {
                                let qi = v.data[i * stride + qo + c];
                                let kj = v.data[j * stride + ko + c];
                                gq.data[i * stride + qo + c] = gq.data[i * stride + qo + c] + ds * kj;
                                gq.data[j * stride + ko + c] = gq.data[j * stride + ko + c] + ds * qi;
                            }
                        }
                    }
                }
                self.accumulate(grads, *qkv, gq);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols;
                let mut gx = Mat::zeros(y.rows, cols);
                for r in 0..y.rows {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx.data[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { probs, labels, count } => {
                let gp = objectives::ce_grad(&self.nodes[*probs].value, labels, *count, g.data[0]);
                self.accumulate(grads, *probs, gp);
            }
            Op::Entropy(probs) => {
                let gp = objectives::entropy_grad(&self.nodes[*probs].value, g.data[0]);
                self.accumulate(grads, *probs, gp);
            }
            Op::MaskedMse {
                recon,
                target,
                masked,
                count,
            } => {
                let gr = objectives::mse_grad(&self.nodes[*recon].value, target, masked, *count, g.data[0]);
                self.accumulate(grads, *recon, gr);
            }
        }
    }

    fn affine_grads(&self, g: &Mat<T>, xhat: &[T], gamma: usize, beta: usize, grads: &mut [Option<Mat<T>>]) {
        let cols = g.cols;
        if self.ng(gamma) {
            let mut gg = Mat::zeros(1, cols);
            for (k, (&gv, &h)) in g.data.iter().zip(xhat).enumerate() {
                let c = k % cols;
                gg.data[c] = gg.data[c] + gv * h;
            }
            self.accumulate(grads, gamma, gg);
        }
        if self.ng(beta) {
            self.accumulate(grads, beta, column_sums(g));
        }
    }
}

fn column_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut s = Mat::zeros(1, g.cols);
    for row in g.data.chunks(g.cols) {
        for (a, &b) in s.data.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    s
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_A: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let k = cst::<T>(SQRT_2_OVER_PI) * (x + cst::<T>(GELU_A) * x * x * x);
    cst::<T>(0.5) * x * (T::one() + k.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let a = cst::<T>(GELU_A);
    let s = cst::<T>(SQRT_2_OVER_PI);
    let t = (s * (x + a * x * x * x)).tanh();
    let half = cst::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + cst::<T>(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(build)/d(param) for every coordinate.
    fn check(store: &ParamStore<f64>, build: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) {
        let mut tape = Tape::new();
        let root = build(&mut tape, store);
        let grads = tape.backward(root);
        for (name, p) in store.iter() {
            if p.role != Role::Trainable {
                assert!(!grads.contains_key(name));
                continue;
            }
            let g = &grads[name];
            for k in 0..p.value.len() {
                let h = 1e-6;
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().value.data[k] += h;
                let mut minus = store.clone();
                minus.get_mut(name).unwrap().value.data[k] -= h;
                let fp = {
                    let mut t = Tape::new();
                    let r = build(&mut t, &plus);
                    t.scalar(r)
                };
                let fm = {
                    let mut t = Tape::new();
                    let r = build(&mut t, &minus);
                    t.scalar(r)
                };
                let fd = (fp - fm) / (2.0 * h);
                let a = g.data[k];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "{name}[{k}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn block_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("x", rand_mat(&mut rng, 5, 6), Role::Trainable);
        store.insert("w", rand_mat(&mut rng, 6, 18), Role::Trainable);
        store.insert("b", rand_mat(&mut rng, 1, 18), Role::Trainable);
        store.insert("g", rand_mat(&mut rng, 1, 6), Role::Trainable);
        store.insert("beta", rand_mat(&mut rng, 1, 6), Role::Frozen);
        store.insert("w2", rand_mat(&mut rng, 6, 3), Role::Trainable);
        check(&store, |t, s| {
            let x = t.param(s, "x").unwrap();
            let g = t.param(s, "g").unwrap();
            let beta = t.param(s, "beta").unwrap();
            let n = t.layer_norm(x, g, beta).unwrap();
            let w = t.param(s, "w").unwrap();
            let b = t.param(s, "b").unwrap();
            let qkv = t.linear(n, w, b).unwrap();
            let a = t.attention(qkv, 2).unwrap();
            let a = t.gelu(a);
            let r = t.add(a, x).unwrap();
            let (bn, _) = t.batch_norm(r, g, beta).unwrap();
            let w2 = t.param(s, "w2").unwrap();
            let logits = t.matmul(bn, w2).unwrap();
            let p = t.softmax_rows(logits);
            let (ce, _) = t.cross_entropy(p, vec![0, 2, IGNORE_T, 1, 1].into()).unwrap();
            let e = t.entropy(p).unwrap();
            t.axpy(ce, e, 0.7).unwrap()
        });
    }

    const IGNORE_T: i32 = crate::raster::IGNORE;

    #[test]
    fn gather_concat_mse_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("a", rand_mat(&mut rng, 3, 4), Role::Trainable);
        store.insert("c", rand_mat(&mut rng, 2, 4), Role::Trainable);
        let target = Rc::new(rand_mat(&mut rng, 4, 5));
        check(&store, move |t, s| {
            let a = t.param(s, "a").unwrap();
            let c = t.param(s, "c").unwrap();
            let cat = t.concat_rows(a, c).unwrap();
            let idx: Vec<u32> = (0..20).map(|i| if i % 7 == 3 { ZERO_SLOT } else { (i * 3 % 20) as u32 }).collect();
            let gth = t.gather(cat, idx.into(), 4, 5).unwrap();
            let (m, _) = t
                .masked_mse(gth, target.clone(), vec![true, false, true, true].into())
                .unwrap();
            m
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let qkv = t.constant(rand_mat(&mut rng, 7, 24));
        let a = t.attention(qkv, 4).unwrap();
        let p = t.attention_probs(a).unwrap();
        for row in p.chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
