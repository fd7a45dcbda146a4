//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node. Forward values are computed eagerly with the
//! same [`Matrix`] routines used elsewhere in the crate, which keeps taped
//! and untaped forward passes bitwise identical. [`Tape::backward`] walks
//! the nodes once in reverse and accumulates gradients.
//!
//! ```
//! use modkb::tensor::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[1.0, -2.0]]));
//! let x = tape.constant(Matrix::from_rows(&[[3.0], [4.0]]));
//! let y = tape.matmul(w, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w), Matrix::from_rows(&[[3.0, 4.0]]));
//! ```

use super::matrix::{Matrix, MASKED};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CausalMask(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; a zero matrix when `v` did
    /// not influence the loss or was not trainable.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(m)
        } else {
            self.constant(m)
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b), &[a, b]))
    }

    /// `a + bias` with the `1 x cols` row `bias` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s)?;
        Ok(self.push(value, Op::Scale(a, s), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value = self
            .value(x)
            .layer_norm(self.value(gain), self.value(bias), eps)?;
        let (xhat, inv_std) = self.value(x).layer_norm_parts(eps);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn causal_mask_fill(&mut self, a: Var) -> Var {
        let value = self.value(a).causal_mask_fill();
        self.push(value, Op::CausalMask(a), &[a])
    }

    /// Row lookup; with an embedding table as `src` this is embedding lookup.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(src).gather_rows(idx)?;
        Ok(self.push(value, Op::GatherRows(src, idx.to_vec()), &[src]))
    }

    pub fn gather_cols(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(src).gather_cols(idx)?;
        Ok(self.push(value, Op::GatherCols(src, idx.to_vec()), &[src]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a), &[a])
    }

    /// Sum of all elements as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_rows(&[[self.value(a).sum()]]);
        self.push(value, Op::Sum(a), &[a])
    }

    /// Mean cross-entropy of logits rows against `targets`, as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = self.value(logits).cross_entropy(targets)?;
        Ok(self.push(
            Matrix::from_rows(&[[loss]]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// One reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            // Interior gradients are not reported, only leaves keep theirs.
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.hadamard(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.hadamard(self.value(*a))?);
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_rows());
                }
            }
            Op::Scale(a, s) => {
                let data = g.data().iter().map(|x| x * s).collect();
                accumulate(&mut grads[a.0], Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Relu(a) => {
                // Derivative at exactly zero is taken as zero.
                let x = self.value(*a);
                let mut ga = g.clone();
                for (d, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], g.hadamard(xhat)?.sum_rows());
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], g.sum_rows());
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain);
                    let n = xhat.cols() as f64;
                    let mut gx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gain_v.data()).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for ((o, &d), &xv) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                            *o = k * (n * d - sum_d - xv * sum_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::CausalMask(a) => {
                let mut ga = g.clone();
                for (d, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    if y == MASKED {
                        *d = 0.0;
                    }
                }
                // Only entries above the diagonal were overwritten; an input
                // that already equalled MASKED gets no gradient either way.
                accumulate(&mut grads[a.0], ga);
            }
            Op::GatherRows(src, idx) => {
                let s = self.value(*src);
                let mut gs = Matrix::zeros(s.rows(), s.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[src.0], gs);
            }
            Op::GatherCols(src, idx) => {
                let s = self.value(*src);
                let mut gs = Matrix::zeros(s.rows(), s.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let or = gs.row_mut(r);
                    for (c, &i) in idx.iter().enumerate() {
                        or[i] += gr[c];
                    }
                }
                accumulate(&mut grads[src.0], gs);
            }
            Op::SliceRows(a, start) => {
                let s = self.value(*a);
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SliceCols(a, start) => {
                let s = self.value(*a);
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.slice_rows(offset, offset + rows)?);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.slice_cols(offset, offset + cols)?);
                    }
                    offset += cols;
                }
            }
            Op::MeanRows(a) => {
                let s = self.value(*a);
                let inv = if s.rows() > 0 { 1.0 / s.rows() as f64 } else { 0.0 };
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(&mut grads[a.0], Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                accumulate(&mut grads[logits.0], gl);
            }
        }
        Ok(())
    }
}
