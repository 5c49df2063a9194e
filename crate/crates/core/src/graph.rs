//! The op vocabulary model code is written against.
//!
//! Every forward computation in the model is generic over [`Graph`]. Inference
//! runs it on [`Eval`], which just computes values; training runs the same code
//! on [`crate::tape::Tape`], which also records what it needs for the reverse
//! pass. One forward definition therefore serves both paths.

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor2D, LAYER_NORM_EPS};

pub trait Graph {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor2D;
    fn constant(&mut self, t: Tensor2D) -> Self::Var;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a · bᵀ`
    fn matmul_t(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Broadcast-add a `1 × cols` row.
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, factor: f64) -> Self::Var;
    fn gelu(&mut self, a: &Self::Var) -> Self::Var;
    fn layer_norm(&mut self, x: &Self::Var, gain: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn softmax_rows(&mut self, a: &Self::Var) -> Self::Var;
    /// Row lookup: `out[i] = table[ids[i]]`.
    fn gather_rows(&mut self, table: &Self::Var, ids: &[usize]) -> Result<Self::Var>;
    /// Scalar lookup from a `1 × buckets` table: `out[i][j] = table[index[i*cols + j]]`.
    fn gather_bias(&mut self, table: &Self::Var, index: &[usize], rows: usize, cols: usize) -> Result<Self::Var>;
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn slice_cols(&mut self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    /// Summed token cross-entropy as a `1 × 1` value.
    fn cross_entropy(&mut self, logits: &Self::Var, targets: &[usize]) -> Result<Self::Var>;
}

/// Plain evaluation: variables are the tensors themselves.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

pub(crate) fn gather_rows_value(table: &Tensor2D, ids: &[usize]) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                len: table.rows(),
            });
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub(crate) fn gather_bias_value(table: &Tensor2D, index: &[usize], rows: usize, cols: usize) -> Result<Tensor2D> {
    if index.len() != rows * cols || table.rows() != 1 {
        return Err(Error::Shape {
            op: "gather_bias",
            left: table.shape(),
            right: (rows, cols),
        });
    }
    let mut data = Vec::with_capacity(index.len());
    for &i in index {
        if i >= table.cols() {
            return Err(Error::Index {
                what: "relative bias bucket",
                index: i,
                len: table.cols(),
            });
        }
        data.push(table.data()[i]);
    }
    Tensor2D::from_vec(rows, cols, data)
}

pub(crate) fn cross_entropy_value(logits: &Tensor2D, targets: &[usize]) -> Result<Tensor2D> {
    Ok(Tensor2D::row_vector(&[numerics::cross_entropy(logits, targets)?]))
}

impl Graph for Eval {
    type Var = Tensor2D;

    fn value<'a>(&'a self, v: &'a Tensor2D) -> &'a Tensor2D {
        v
    }

    fn constant(&mut self, t: Tensor2D) -> Tensor2D {
        t
    }

    fn matmul(&mut self, a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
        numerics::matmul(a, b)
    }

    fn matmul_t(&mut self, a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
        numerics::matmul_t(a, b)
    }

    fn add(&mut self, a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
        a.add(b)
    }

    fn add_row(&mut self, a: &Tensor2D, row: &Tensor2D) -> Result<Tensor2D> {
        a.add_row(row)
    }

    fn scale(&mut self, a: &Tensor2D, factor: f64) -> Tensor2D {
        a.scale(factor)
    }

    fn gelu(&mut self, a: &Tensor2D) -> Tensor2D {
        a.map(numerics::gelu)
    }

    fn layer_norm(&mut self, x: &Tensor2D, gain: &Tensor2D, bias: &Tensor2D) -> Result<Tensor2D> {
        numerics::layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    fn softmax_rows(&mut self, a: &Tensor2D) -> Tensor2D {
        numerics::softmax_rows(a)
    }

    fn gather_rows(&mut self, table: &Tensor2D, ids: &[usize]) -> Result<Tensor2D> {
        gather_rows_value(table, ids)
    }

    fn gather_bias(&mut self, table: &Tensor2D, index: &[usize], rows: usize, cols: usize) -> Result<Tensor2D> {
        gather_bias_value(table, index, rows, cols)
    }

    fn concat_rows(&mut self, parts: &[Tensor2D]) -> Result<Tensor2D> {
        let refs: Vec<&Tensor2D> = parts.iter().collect();
        Tensor2D::concat_rows(&refs)
    }

    fn concat_cols(&mut self, parts: &[Tensor2D]) -> Result<Tensor2D> {
        let refs: Vec<&Tensor2D> = parts.iter().collect();
        Tensor2D::concat_cols(&refs)
    }

    fn slice_cols(&mut self, a: &Tensor2D, start: usize, len: usize) -> Result<Tensor2D> {
        a.slice_cols(start, len)
    }

    fn cross_entropy(&mut self, logits: &Tensor2D, targets: &[usize]) -> Result<Tensor2D> {
        cross_entropy_value(logits, targets)
    }
}
