//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass, in
//! evaluation order. [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints. Tapes are cheap to build and are meant to be dropped
//! after a single backward pass.

use super::matrix::{concat_rows, matmul, relu, softmax_cols, Matrix};
use super::NumError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Transpose(NodeId),
    SoftmaxCols(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    ConcatRows(NodeId, NodeId),
    Row(NodeId, usize),
    MulRowBroadcast(NodeId, NodeId),
    AddColBroadcast(NodeId, NodeId),
    Sum(NodeId),
    /// Per-row concordance of the operand against a fixed target matrix.
    ConcordanceRows(NodeId, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Ordered record of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Param, value)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, NumError> {
        self.record(Op::Scale(a, factor))
    }

    /// Adds a scalar to every entry.
    pub fn offset(&mut self, a: NodeId, shift: f64) -> Result<NodeId, NumError> {
        self.record(Op::Offset(a, shift))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::Transpose(a))
    }

    pub fn softmax_cols(&mut self, a: NodeId, temperature: f64) -> Result<NodeId, NumError> {
        self.record(Op::SoftmaxCols(a, temperature))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::Tanh(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::ConcatRows(a, b))
    }

    /// Selects row `index` as a `1 x cols` matrix.
    pub fn row(&mut self, a: NodeId, index: usize) -> Result<NodeId, NumError> {
        self.record(Op::Row(a, index))
    }

    /// `x ⊗ g` with the `1 x L` row `g` replicated down every row of `x`.
    pub fn mul_row_broadcast(&mut self, x: NodeId, g: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::MulRowBroadcast(x, g))
    }

    /// `x + b` with the `d x 1` column `b` added to every column of `x`.
    pub fn add_col_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::AddColBroadcast(x, b))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.record(Op::Sum(a))
    }

    /// Concordance correlation of each row of `pred` against the matching row
    /// of `target`, as a `1 x rows` node. Rows whose moment denominator
    /// vanishes score 0 and pass no gradient.
    pub fn concordance_rows(&mut self, pred: NodeId, target: Matrix) -> Result<NodeId, NumError> {
        self.record(Op::ConcordanceRows(pred, target))
    }

    /// Values of every ReLU operand on the tape, in recording order.
    pub fn relu_inputs(&self) -> Vec<&Matrix> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .collect()
    }

    /// Re-evaluates every recorded node from the leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>, NumError> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Param | Op::Constant => node.value.clone(),
                ref op => eval(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode accumulation from the scalar node `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, NumError> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(NumError::NotScalar {
                rows: out_shape.0,
                cols: out_shape.1,
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=output.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param | Op::Constant => {
                    adj[idx] = Some(upstream);
                }
                Op::MatMul(a, b) => {
                    let da = matmul(&upstream, &self.value(*b).transpose())?;
                    let db = matmul(&self.value(*a).transpose(), &upstream)?;
                    accumulate(&mut adj, *a, da)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, upstream.clone())?;
                    accumulate(&mut adj, *b, upstream)?;
                }
                Op::Mul(a, b) => {
                    let da = upstream.mul(self.value(*b))?;
                    let db = upstream.mul(self.value(*a))?;
                    accumulate(&mut adj, *a, da)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut adj, *a, upstream.scale(*factor))?;
                }
                Op::Offset(a, _) => {
                    accumulate(&mut adj, *a, upstream)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, upstream.transpose())?;
                }
                Op::SoftmaxCols(a, temperature) => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut grad = vec![0.0; rows * cols];
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| y.get(r, c) * upstream.get(r, c)).sum();
                        for r in 0..rows {
                            grad[r * cols + c] =
                                y.get(r, c) * (upstream.get(r, c) - dot) / temperature;
                        }
                    }
                    accumulate(&mut adj, *a, Matrix::new(rows, cols, grad)?)?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, *a, upstream.mul(&mask)?)?;
                }
                Op::Tanh(a) => {
                    let local = node.value.map(|t| 1.0 - t * t);
                    accumulate(&mut adj, *a, upstream.mul(&local)?)?;
                }
                Op::ConcatRows(a, b) => {
                    let top = self.value(*a).rows();
                    let cols = upstream.cols();
                    let data = upstream.data();
                    let da = Matrix::new(top, cols, data[..top * cols].to_vec())?;
                    let db = Matrix::new(upstream.rows() - top, cols, data[top * cols..].to_vec())?;
                    accumulate(&mut adj, *a, da)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Row(a, index) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut data = vec![0.0; rows * cols];
                    data[index * cols..(index + 1) * cols].copy_from_slice(upstream.data());
                    accumulate(&mut adj, *a, Matrix::new(rows, cols, data)?)?;
                }
                Op::MulRowBroadcast(x, g) => {
                    let xv = self.value(*x);
                    let gv = self.value(*g);
                    let dx = upstream.mul_row_broadcast(gv)?;
                    let (rows, cols) = xv.shape();
                    let dg: Vec<f64> = (0..cols)
                        .map(|c| (0..rows).map(|r| upstream.get(r, c) * xv.get(r, c)).sum())
                        .collect();
                    accumulate(&mut adj, *x, dx)?;
                    accumulate(&mut adj, *g, Matrix::new(1, cols, dg)?)?;
                }
                Op::AddColBroadcast(x, b) => {
                    let db: Vec<f64> = (0..upstream.rows())
                        .map(|r| upstream.row(r).iter().sum())
                        .collect();
                    let rows = upstream.rows();
                    accumulate(&mut adj, *x, upstream)?;
                    accumulate(&mut adj, *b, Matrix::new(rows, 1, db)?)?;
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(rows, cols, upstream.get(0, 0)))?;
                }
                Op::ConcordanceRows(pred, target) => {
                    let p = self.value(*pred);
                    let (rows, cols) = p.shape();
                    let mut grad = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let row_grad = concordance_grad(p.row(r), target.row(r));
                        grad.extend(row_grad.into_iter().map(|g| g * upstream.get(0, r)));
                    }
                    accumulate(&mut adj, *pred, Matrix::new(rows, cols, grad)?)?;
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(node, g)| match node.op {
                Op::Param => Some(g.unwrap_or_else(|| {
                    let (r, c) = node.value.shape();
                    Matrix::zeros(r, c)
                })),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId, NumError> {
        let value = eval(&op, |id| &self.nodes[id.0].value)?;
        Ok(self.push(op, value))
    }
}

/// Gradients of a scalar with respect to every parameter leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a parameter node. Parameters the output does not depend
    /// on get a zero matrix of the parameter's shape.
    ///
    /// # Panics
    /// If `id` is not a parameter leaf.
    pub fn wrt(&self, id: NodeId) -> &Matrix {
        self.grads[id.0]
            .as_ref()
            .expect("gradient requested for a node that is not a parameter")
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, grad: Matrix) -> Result<(), NumError> {
    adj[id.0] = Some(match adj[id.0].take() {
        Some(prev) => prev.add(&grad)?,
        None => grad,
    });
    Ok(())
}

fn eval<'a>(op: &Op, get: impl Fn(NodeId) -> &'a Matrix) -> Result<Matrix, NumError> {
    Ok(match *op {
        Op::Param | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => matmul(get(a), get(b))?,
        Op::Add(a, b) => get(a).add(get(b))?,
        Op::Mul(a, b) => get(a).mul(get(b))?,
        Op::Scale(a, factor) => get(a).scale(factor),
        Op::Offset(a, shift) => get(a).map(|v| v + shift),
        Op::Transpose(a) => get(a).transpose(),
        Op::SoftmaxCols(a, t) => softmax_cols(get(a), t)?,
        Op::Relu(a) => relu(get(a)),
        Op::Tanh(a) => get(a).tanh(),
        Op::ConcatRows(a, b) => concat_rows(get(a), get(b))?,
        Op::Row(a, index) => {
            let m = get(a);
            if index >= m.rows() {
                return Err(NumError::RowOutOfRange {
                    index,
                    rows: m.rows(),
                });
            }
            Matrix::new(1, m.cols(), m.row(index).to_vec())?
        }
        Op::MulRowBroadcast(x, g) => get(x).mul_row_broadcast(get(g))?,
        Op::AddColBroadcast(x, b) => get(x).add_col_broadcast(get(b))?,
        Op::Sum(a) => Matrix::filled(1, 1, get(a).sum()),
        Op::ConcordanceRows(pred, ref target) => {
            let p = get(pred);
            if p.shape() != target.shape() {
                return Err(NumError::shape("concordance_rows", p, target));
            }
            if p.cols() < 2 {
                return Err(NumError::TooShort { len: p.cols() });
            }
            let values = (0..p.rows())
                .map(|r| concordance(p.row(r), target.row(r)).0)
                .collect();
            Matrix::new(1, p.rows(), values)?
        }
    })
}

/// Denominators below this are treated as degenerate.
pub(crate) const DEGENERATE_DENOMINATOR: f64 = 1e-15;

struct Moments {
    mean_x: f64,
    mean_y: f64,
    cov: f64,
    var_x: f64,
    var_y: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut cov, mut var_x, mut var_y) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    Moments {
        mean_x,
        mean_y,
        cov: cov / n,
        var_x: var_x / n,
        var_y: var_y / n,
    }
}

/// Returns `(ccc, degenerate)`.
fn concordance(x: &[f64], y: &[f64]) -> (f64, bool) {
    let m = moments(x, y);
    let shift = m.mean_x - m.mean_y;
    let den = m.var_x + m.var_y + shift * shift;
    if den < DEGENERATE_DENOMINATOR {
        (0.0, true)
    } else {
        (2.0 * m.cov / den, false)
    }
}

fn concordance_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = moments(x, y);
    let shift = m.mean_x - m.mean_y;
    let den = m.var_x + m.var_y + shift * shift;
    if den < DEGENERATE_DENOMINATOR {
        return vec![0.0; x.len()];
    }
    let num = 2.0 * m.cov;
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let d_num = 2.0 * (yi - m.mean_y) / n;
            let d_den = 2.0 * (xi - m.mean_x) / n + 2.0 * shift / n;
            (d_num * den - num * d_den) / (den * den)
        })
        .collect()
}
