use std::sync::Arc;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Variance epsilon used by [`Tape::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows(Vec<(Var, Vec<usize>)>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    SqErr {
        pred: Var,
        target: Arc<Tensor>,
        row_weights: Option<Vec<f64>>,
        norm: f64,
    },
    WeightedSum {
        x: Var,
        weights: Arc<Tensor>,
    },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in creation order, which is a topological order of the
/// graph, so the backward pass is a single reverse sweep that visits each node
/// once. Gradients of leaves persist across [`Tape::backward`] calls and
/// accumulate until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_shared(Arc::new(value), requires_grad, op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf backed by a shared buffer; avoids copying large parameters.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_shared(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, s))
    }

    /// Adds `bias` (shape `[c]` or `[1, c]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c || self.value(bias).rows() != 1 {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (vx, vb) = (self.value(x), self.value(bias));
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        if v.data().iter().any(|d| d.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN in input".into(),
            });
        }
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `[d]`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(Error::Dimension {
                    op: "layernorm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Gelu(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Writes the rows of each part to the listed destination rows of an
    /// `n_rows`-row output. The parts' index lists must partition `0..n_rows`.
    pub fn scatter_rows(&mut self, n_rows: usize, parts: &[(Var, &[usize])]) -> Result<Var> {
        let cols = match parts.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::contract("scatter_rows needs at least one part")),
        };
        let mut seen = vec![false; n_rows];
        let mut out = vec![0.0; n_rows * cols];
        for (v, idx) in parts {
            let t = self.value(*v);
            if t.rank() != 2 || t.cols() != cols || t.rows() != idx.len() {
                return Err(Error::contract(format!(
                    "scatter part of shape {:?} does not match {} indices of width {cols}",
                    t.shape(),
                    idx.len()
                )));
            }
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= n_rows {
                    return Err(Error::contract(format!("scatter index {dst} out of range {n_rows}")));
                }
                if std::mem::replace(&mut seen[dst], true) {
                    return Err(Error::contract(format!("scatter index {dst} written twice")));
                }
                out[dst * cols..(dst + 1) * cols].copy_from_slice(t.row(r));
            }
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!("scatter leaves row {gap} unwritten")));
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        let rec = parts.iter().map(|(v, idx)| (*v, idx.to_vec())).collect();
        Ok(self.push(Tensor::from_parts(vec![n_rows, cols], out), rg, Op::ScatterRows(rec)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).matrix_dims("slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::contract(format!("column slice {start}..{} of width {c}", start + width)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![r, width], out), rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (r, _) = self.value(first).matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).matrix_dims("concat_cols")?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![r, total], out), rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// `Σ_r w_r Σ_c (pred − target)² / norm`, with `w_r = 1` when no row
    /// weights are given.
    pub fn sq_err(
        &mut self,
        pred: Var,
        target: impl Into<Arc<Tensor>>,
        row_weights: Option<Vec<f64>>,
        norm: f64,
    ) -> Result<Var> {
        let target = target.into();
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Dimension {
                op: "sq_err",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if let Some(w) = &row_weights {
            if w.len() != p.rows() {
                return Err(Error::contract(format!("{} row weights for {} rows", w.len(), p.rows())));
            }
        }
        let c = p.cols();
        let mut total = 0.0;
        for r in 0..p.rows() {
            let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
            if w == 0.0 {
                continue;
            }
            let row: f64 = p.row(r).iter().zip(&target.data()[r * c..(r + 1) * c]).map(|(a, b)| (a - b) * (a - b)).sum();
            total += w * row;
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            rg,
            Op::SqErr {
                pred,
                target,
                row_weights,
                norm,
            },
        ))
    }

    /// `Σ x ⊙ weights`, a scalar. Pulling back a fixed cotangent through a
    /// graph is `backward(weighted_sum(out, cotangent))`.
    pub fn weighted_sum(&mut self, x: Var, weights: impl Into<Arc<Tensor>>) -> Result<Var> {
        let weights = weights.into();
        if self.shape(x) != weights.shape() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::WeightedSum { x, weights }))
    }

    /// Propagates `d loss / d node` to every leaf that requires a gradient,
    /// adding into the leaf's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut local: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut cx = Ctx {
                nodes,
                local: &mut local,
            };
            match &node.op {
                Op::Leaf => match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (va, vb) = (cx.value(*a), cx.value(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if let Some(ga) = cx.slot(*a) {
                        kernels::gemm_nt(g.data(), vb.data(), ga.data_mut(), m, n, k);
                    }
                    if let Some(gb) = cx.slot(*b) {
                        kernels::gemm_tn(va.data(), g.data(), gb.data_mut(), k, m, n);
                    }
                }
                Op::Add(a, b) => {
                    cx.add_into(*a, g.data(), 1.0);
                    cx.add_into(*b, g.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    cx.add_into(*a, g.data(), 1.0);
                    cx.add_into(*b, g.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (cx.value(*a), cx.value(*b));
                    let ga: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    cx.add_into(*a, &ga, 1.0);
                    cx.add_into(*b, &gb, 1.0);
                }
                Op::Scale(a, s) => cx.add_into(*a, g.data(), *s),
                Op::AddBias(x, b) => {
                    cx.add_into(*x, g.data(), 1.0);
                    if let Some(gb) = cx.slot(*b) {
                        let c = gb.len();
                        for row in g.data().chunks_exact(c) {
                            for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
                Op::Transpose(x) => {
                    if cx.wants(*x) {
                        let gt = g.transpose()?;
                        cx.add_into(*x, gt.data(), 1.0);
                    }
                }
                Op::Reshape(x) => cx.add_into(*x, g.data(), 1.0),
                Op::Softmax { x, axis } => {
                    if let Some(gx) = cx.slot(*x) {
                        let y = node.value.as_ref();
                        let (outer, n, inner) = split_axis(y.shape(), *axis)?;
                        let (yd, gd, out) = (y.data(), g.data(), gx.data_mut());
                        for o in 0..outer {
                            for ii in 0..inner {
                                let at = |j: usize| (o * n + j) * inner + ii;
                                let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                                for j in 0..n {
                                    out[at(j)] += yd[at(j)] * (gd[at(j)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = cx.value(*gamma).data().to_vec();
                    let d = gam.len();
                    if let Some(gg) = cx.slot(*gamma) {
                        let acc = gg.data_mut();
                        for (grow, hrow) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                acc[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    if let Some(gb) = cx.slot(*beta) {
                        let acc = gb.data_mut();
                        for grow in g.data().chunks_exact(d) {
                            for j in 0..d {
                                acc[j] += grow[j];
                            }
                        }
                    }
                    if let Some(gx) = cx.slot(*x) {
                        let out = gx.data_mut();
                        for (r, (grow, hrow)) in g.data().chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                            let mut mean_g = 0.0;
                            let mut mean_gh = 0.0;
                            for j in 0..d {
                                let gh = grow[j] * gam[j];
                                mean_g += gh;
                                mean_gh += gh * hrow[j];
                            }
                            mean_g /= d as f64;
                            mean_gh /= d as f64;
                            for j in 0..d {
                                let gh = grow[j] * gam[j];
                                out[r * d + j] += rstd[r] * (gh - mean_g - hrow[j] * mean_gh);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if let Some(gx) = cx.slot(*x) {
                        let xv = nodes[x.0].value.data();
                        for ((acc, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            *acc += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    if let Some(gx) = cx.slot(*x) {
                        let c = gx.cols();
                        let out = gx.data_mut();
                        for (r, &src) in idx.iter().enumerate() {
                            for j in 0..c {
                                out[src * c + j] += g.data()[r * c + j];
                            }
                        }
                    }
                }
                Op::ScatterRows(parts) => {
                    for (v, idx) in parts {
                        if let Some(gv) = cx.slot(*v) {
                            let c = gv.cols();
                            let out = gv.data_mut();
                            for (r, &dst) in idx.iter().enumerate() {
                                for j in 0..c {
                                    out[r * c + j] += g.data()[dst * c + j];
                                }
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if let Some(gx) = cx.slot(*x) {
                        let c = gx.cols();
                        let w = g.cols();
                        let out = gx.data_mut();
                        for (r, grow) in g.data().chunks_exact(w).enumerate() {
                            for j in 0..w {
                                out[r * c + start + j] += grow[j];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = cx.value(p).cols();
                        if let Some(gp) = cx.slot(p) {
                            let out = gp.data_mut();
                            for (r, grow) in g.data().chunks_exact(total).enumerate() {
                                for j in 0..w {
                                    out[r * w + j] += grow[offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    if let Some(gx) = cx.slot(*x) {
                        for v in gx.data_mut() {
                            *v += s;
                        }
                    }
                }
                Op::SqErr {
                    pred,
                    target,
                    row_weights,
                    norm,
                } => {
                    let s = g.data()[0];
                    if let Some(gp) = cx.slot(*pred) {
                        let pv = nodes[pred.0].value.data();
                        let c = gp.cols();
                        for (r, row) in gp.data_mut().chunks_exact_mut(c).enumerate() {
                            let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
                            if w == 0.0 {
                                continue;
                            }
                            let f = s * 2.0 * w / norm;
                            for j in 0..c {
                                let k = r * c + j;
                                row[j] += f * (pv[k] - target.data()[k]);
                            }
                        }
                    }
                }
                Op::WeightedSum { x, weights } => cx.add_into(*x, weights.data(), g.data()[0]),
            }
        }
        Ok(())
    }
}

struct Ctx<'a> {
    nodes: &'a [Node],
    local: &'a mut [Option<Tensor>],
}

impl<'a> Ctx<'a> {
    fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Tensor> {
        if !self.wants(v) {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(self.local[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec())))
    }

    fn add_into(&mut self, v: Var, g: &[f64], scale: f64) {
        if let Some(acc) = self.slot(v) {
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        // y = (x·x) + x·x reuses the same product node twice.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, xx).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_on_middle_axis_normalizes_that_axis() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s).data();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let x = tape.constant(t(&[1, 4], &[5.0; 4]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layernorm(x, g, b).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn scatter_rejects_overlap_and_gap() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 2]));
        let b = tape.constant(Tensor::zeros([1, 2]));
        assert!(tape.scatter_rows(2, &[(a, &[0]), (b, &[0])]).is_err());
        assert!(tape.scatter_rows(3, &[(a, &[0]), (b, &[2])]).is_err());
        assert!(tape.scatter_rows(2, &[(a, &[1]), (b, &[0])]).is_ok());
    }
}
