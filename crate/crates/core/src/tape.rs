//! Reverse-mode differentiation over [`Tensor2D`] operations.
//!
//! A [`Tape`] records every op issued through the [`Graph`] interface in
//! execution order. [`Tape::backward`] walks it in reverse and returns the
//! gradient of a scalar node with respect to every recorded node.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::graph::{cross_entropy_value, gather_bias_value, gather_rows_value, Graph};
use crate::numerics::{self, layer_norm_parts, softmax_in_place, Tensor2D, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normed: Tensor2D,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    GatherRows { table: usize, ids: Vec<usize> },
    GatherBias { table: usize, index: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor2D>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2D> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a borrowed tensor (typically a parameter) as a leaf.
    pub fn leaf(&mut self, t: &'a Tensor2D) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    fn push(&mut self, value: Cow<'a, Tensor2D>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor2D {
        &self.nodes[i].value
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.val(root.0);
        if root_val.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor2D::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller; interior
                    // gradients are dropped once propagated.
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = numerics::matmul_t(&g, self.val(*b))?;
                    let db = numerics::t_matmul(self.val(*a), &g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulT(a, b) => {
                    let da = numerics::matmul(&g, self.val(*b))?;
                    let db = numerics::t_matmul(&g, self.val(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_rows())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f))?,
                Op::Gelu(a) => {
                    let x = self.val(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        *dv *= numerics::gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let (dx, dgain, dbias) = layer_norm_backward(&g, normed, inv_std, self.val(*gain));
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = d.row_mut(r);
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (dv, &yv) in dr.iter_mut().zip(yr) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::GatherRows { table, ids } => {
                    let t = self.val(*table);
                    let mut d = Tensor2D::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    accumulate(&mut grads, *table, d)?;
                }
                Op::GatherBias { table, index } => {
                    let t = self.val(*table);
                    let mut d = Tensor2D::zeros(1, t.cols());
                    for (&k, &gv) in index.iter().zip(g.data()) {
                        d.data_mut()[k] += gv;
                    }
                    accumulate(&mut grads, *table, d)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.val(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(start, rows)?)?;
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.val(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(start, cols)?)?;
                        start += cols;
                    }
                }
                Op::SliceCols { src, start } => {
                    let s = self.val(*src);
                    let mut d = Tensor2D::zeros(s.rows(), s.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *src, d)?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let upstream = g.data()[0];
                    let mut d = self.val(*logits).clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(r);
                        softmax_in_place(row);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= upstream;
                        }
                    }
                    accumulate(&mut grads, *logits, d)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], i: usize, g: Tensor2D) -> Result<()> {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn layer_norm_backward(
    dy: &Tensor2D,
    normed: &Tensor2D,
    inv_std: &[f64],
    gain: &Tensor2D,
) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Tensor2D::zeros(rows, cols);
    let mut dgain = Tensor2D::zeros(1, cols);
    let mut dbias = Tensor2D::zeros(1, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = normed.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..cols {
            dgain.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * gain.data()[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= n;
        mean_dx /= n;
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

impl<'a> Graph for Tape<'a> {
    type Var = Var;

    fn value<'b>(&'b self, v: &'b Var) -> &'b Tensor2D {
        self.val(v.0)
    }

    fn constant(&mut self, t: Tensor2D) -> Var {
        self.push(Cow::Owned(t), Op::Leaf)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = numerics::matmul(self.val(a.0), self.val(b.0))?;
        Ok(self.push(Cow::Owned(v), Op::MatMul(a.0, b.0)))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = numerics::matmul_t(self.val(a.0), self.val(b.0))?;
        Ok(self.push(Cow::Owned(v), Op::MatMulT(a.0, b.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(a.0).add(self.val(b.0))?;
        Ok(self.push(Cow::Owned(v), Op::Add(a.0, b.0)))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let v = self.val(a.0).add_row(self.val(row.0))?;
        Ok(self.push(Cow::Owned(v), Op::AddRow(a.0, row.0)))
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let v = self.val(a.0).scale(factor);
        self.push(Cow::Owned(v), Op::Scale(a.0, factor))
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let v = self.val(a.0).map(numerics::gelu);
        self.push(Cow::Owned(v), Op::Gelu(a.0))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (out, normed, inv_std) =
            layer_norm_parts(self.val(x.0), self.val(gain.0), self.val(bias.0), LAYER_NORM_EPS)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normed,
                inv_std,
            },
        ))
    }

    fn softmax_rows(&mut self, a: &Var) -> Var {
        let v = numerics::softmax_rows(self.val(a.0));
        self.push(Cow::Owned(v), Op::Softmax(a.0))
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let v = gather_rows_value(self.val(table.0), ids)?;
        Ok(self.push(
            Cow::Owned(v),
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    fn gather_bias(&mut self, table: &Var, index: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let v = gather_bias_value(self.val(table.0), index, rows, cols)?;
        Ok(self.push(
            Cow::Owned(v),
            Op::GatherBias {
                table: table.0,
                index: index.to_vec(),
            },
        ))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2D> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Tensor2D::concat_rows(&refs)?;
        Ok(self.push(Cow::Owned(v), Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2D> = parts.iter().map(|p| self.val(p.0)).collect();
        let v = Tensor2D::concat_cols(&refs)?;
        Ok(self.push(Cow::Owned(v), Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(a.0).slice_cols(start, len)?;
        Ok(self.push(Cow::Owned(v), Op::SliceCols { src: a.0, start }))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let v = cross_entropy_value(self.val(logits.0), targets)?;
        Ok(self.push(
            Cow::Owned(v),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }
}
