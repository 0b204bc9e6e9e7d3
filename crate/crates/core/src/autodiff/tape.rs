//! Matrix-valued reverse-mode differentiation tape.
//!
//! Every primitive records its inputs (by node id) and its forward value. Nodes
//! only reference earlier nodes, so the recording order is a topological order
//! and the backward sweep is a single reverse pass. The tape is meant to be
//! rebuilt for every loss evaluation.
//!
//! Shape errors in the primitives are programming errors and panic, the same
//! way slice indexing does. Model-level entry points (`Mlp::forward`, the
//! estimators) validate shapes up front and return [`Error`]s instead.

use std::rc::Rc;

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Probabilities and densities are clamped to this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    RowDot(Var, Var),
    NormalizeRows(Var),
    LogSumExpRows(Var, Option<Rc<[bool]>>),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    PairwiseDistPow(Var, Var, f64),
    RowDistPow(Var, Var, f64),
    HConcat(Var, Var),
    StopGradient(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Records primitive operations and their values for a later backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    floored_logs: usize,
}

/// Gradient of a scalar with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient slot of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn pow_abs(u: f64, p: f64) -> f64 {
    let a = u.abs();
    if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else if p == 3.0 {
        a * a * a
    } else {
        a.powf(p)
    }
}

/// Derivative of `|u|^p` with respect to `u`.
#[inline]
fn pow_abs_grad(u: f64, p: f64) -> f64 {
    if p == 1.0 {
        if u > 0.0 {
            1.0
        } else if u < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else if p == 2.0 {
        2.0 * u
    } else if p == 3.0 {
        3.0 * u * u.abs()
    } else if u == 0.0 {
        0.0
    } else {
        p * u.abs().powf(p - 1.0) * u.signum()
    }
}

fn row_logsumexp(row: &[f64], mask: Option<&[bool]>) -> f64 {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + s.ln()
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let lse = row_logsumexp(x.row(i), None);
        out.row_mut(i).iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
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

    /// Number of log evaluations whose argument was clamped to [`LOG_FLOOR`].
    pub fn floored_logs(&self) -> usize {
        self.floored_logs
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { trainable: true })
    }

    fn push(&mut self, op: Op) -> Var {
        if let Op::Ln(a) = &op {
            self.floored_logs += self.nodes[a.0]
                .value
                .as_slice()
                .iter()
                .filter(|&&v| v < LOG_FLOOR)
                .count();
        }
        let value = self.eval(&op);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient bookkeeping of interest.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { trainable: false },
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { trainable: true },
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dims");
        self.push(Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_t inner dims");
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row shapes");
        self.push(Op::AddRow(a, row))
    }

    /// Adds a `k x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col), (self.shape(a).0, 1), "add_col shapes");
        self.push(Op::AddCol(a, col))
    }

    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col), (self.shape(a).0, 1), "sub_col shapes");
        self.push(Op::SubCol(a, col))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col), (self.shape(a).0, 1), "mul_col shapes");
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    /// Natural log with arguments clamped below at [`LOG_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        self.push(Op::Ln(a))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `k x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        self.push(Op::RowSums(a))
    }

    /// Per-column sums, `1 x n`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        self.push(Op::ColSums(a))
    }

    /// Per-row inner products of two equally shaped matrices, `k x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shapes");
        self.push(Op::RowDot(a, b))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        self.push(Op::NormalizeRows(a))
    }

    /// Per-row log-sum-exp, `k x 1`. Masked-out entries (`false`) are skipped;
    /// the mask is row-major with the shape of `a`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Var {
        if let Some(m) = &mask {
            assert_eq!(m.len(), self.value(a).len(), "mask length");
        }
        self.push(Op::LogSumExpRows(a, mask))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::LogSoftmaxRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::SoftmaxRows(a))
    }

    /// `out[i][j] = sum_c |a[i][c] - b[j][c]|^p`.
    pub fn pairwise_dist_pow(&mut self, a: Var, b: Var, p: f64) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "pairwise dims");
        assert!(p > 0.0, "distance power must be positive");
        self.push(Op::PairwiseDistPow(a, b, p))
    }

    /// `out[i] = sum_c |a[i][c] - b[i][c]|^p`.
    pub fn row_dist_pow(&mut self, a: Var, b: Var, p: f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dist shapes");
        assert!(p > 0.0, "distance power must be positive");
        self.push(Op::RowDistPow(a, b, p))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn hconcat(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "hconcat rows");
        self.push(Op::HConcat(a, b))
    }

    /// Identity in the forward pass; blocks all gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        self.push(Op::StopGradient(a))
    }

    fn eval(&self, op: &Op) -> Matrix {
        let v = |x: &Var| &self.nodes[x.0].value;
        match op {
            Op::Leaf { .. } => unreachable!("leaves carry their own value"),
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::MatMulT(a, b) => v(a).matmul_t(v(b)),
            Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            Op::AddRow(a, r) => {
                let (row, mut out) = (v(r), v(a).clone());
                for i in 0..out.rows() {
                    for (o, x) in out.row_mut(i).iter_mut().zip(row.as_slice()) {
                        *o += x;
                    }
                }
                out
            }
            Op::AddCol(a, c) | Op::SubCol(a, c) | Op::MulCol(a, c) => {
                let (col, mut out) = (v(c), v(a).clone());
                for i in 0..out.rows() {
                    let s = col.as_slice()[i];
                    let row = out.row_mut(i);
                    match op {
                        Op::AddCol(..) => row.iter_mut().for_each(|o| *o += s),
                        Op::SubCol(..) => row.iter_mut().for_each(|o| *o -= s),
                        _ => row.iter_mut().for_each(|o| *o *= s),
                    }
                }
                out
            }
            Op::Scale(a, c) => v(a).scale(*c),
            Op::Offset(a, c) => v(a).map(|x| x + c),
            Op::LeakyRelu(a, s) => v(a).map(|x| if x > 0.0 { x } else { s * x }),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Ln(a) => v(a).map(|x| x.max(LOG_FLOOR).ln()),
            Op::Sum(a) => Matrix::scalar(v(a).sum()),
            Op::RowSums(a) => Matrix::column_vector(v(a).row_iter().map(|r| r.iter().sum()).collect()),
            Op::ColSums(a) => {
                let m = v(a);
                let mut out = vec![0.0; m.cols()];
                for r in m.row_iter() {
                    for (o, x) in out.iter_mut().zip(r) {
                        *o += x;
                    }
                }
                Matrix::row_vector(out)
            }
            Op::RowDot(a, b) => {
                let (x, y) = (v(a), v(b));
                Matrix::column_vector((0..x.rows()).map(|i| dot(x.row(i), y.row(i))).collect())
            }
            Op::NormalizeRows(a) => {
                let mut out = v(a).clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    let n = dot(row, row).sqrt();
                    row.iter_mut().for_each(|x| *x /= n);
                }
                out
            }
            Op::LogSumExpRows(a, mask) => {
                let m = v(a);
                let c = m.cols();
                Matrix::column_vector(
                    (0..m.rows())
                        .map(|i| row_logsumexp(m.row(i), mask.as_deref().map(|mk| &mk[i * c..(i + 1) * c])))
                        .collect(),
                )
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = v(a).clone();
                for i in 0..out.rows() {
                    let lse = row_logsumexp(out.row(i), None);
                    out.row_mut(i).iter_mut().for_each(|x| *x -= lse);
                }
                out
            }
            Op::SoftmaxRows(a) => softmax_rows(v(a)),
            Op::PairwiseDistPow(a, b, p) => {
                let (x, y) = (v(a), v(b));
                Matrix::from_fn(x.rows(), y.rows(), |i, j| {
                    x.row(i)
                        .iter()
                        .zip(y.row(j))
                        .map(|(s, t)| pow_abs(s - t, *p))
                        .sum()
                })
            }
            Op::RowDistPow(a, b, p) => {
                let (x, y) = (v(a), v(b));
                Matrix::column_vector(
                    (0..x.rows())
                        .map(|i| {
                            x.row(i)
                                .iter()
                                .zip(y.row(i))
                                .map(|(s, t)| pow_abs(s - t, *p))
                                .sum()
                        })
                        .collect(),
                )
            }
            Op::HConcat(a, b) => {
                let (x, y) = (v(a), v(b));
                let mut data = Vec::with_capacity(x.len() + y.len());
                for i in 0..x.rows() {
                    data.extend_from_slice(x.row(i));
                    data.extend_from_slice(y.row(i));
                }
                Matrix::from_vec(x.rows(), x.cols() + y.cols(), data).expect("hconcat shape")
            }
            Op::StopGradient(a) => v(a).clone(),
        }
    }

    /// Recomputes every non-leaf node from its inputs and checks the cached
    /// values bit for bit.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            if !self.eval(&node.op).bit_eq(&node.value) {
                return Err(Error::ReplayMismatch(i));
            }
        }
        Ok(())
    }

    /// Backward sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// [`Tape::backward`] preceded by a full replay check.
    pub fn backward_verified(&self, loss: Var) -> Result<Gradients> {
        self.verify_replay()?;
        self.backward(loss)
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |x: &Var| &self.nodes[x.0].value;
        let mut acc = |x: &Var, d: Matrix| match &mut grads[x.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf { .. } | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                acc(a, g.matmul_t(val(b)));
                acc(b, val(a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                acc(a, g.matmul(val(b)));
                acc(b, g.t_matmul(val(a)));
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(a, g.zip_map(val(b), |x, y| x * y));
                acc(b, g.zip_map(val(a), |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                acc(a, g.clone());
                acc(r, g.column_sums());
            }
            Op::AddCol(a, c) => {
                acc(a, g.clone());
                acc(c, Matrix::column_vector(g.row_iter().map(|r| r.iter().sum()).collect()));
            }
            Op::SubCol(a, c) => {
                acc(a, g.clone());
                acc(c, Matrix::column_vector(g.row_iter().map(|r| -r.iter().sum::<f64>()).collect()));
            }
            Op::MulCol(a, c) => {
                let (x, col) = (val(a), val(c));
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let s = col.as_slice()[i];
                    da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                acc(a, da);
                acc(c, Matrix::column_vector((0..x.rows()).map(|i| dot(g.row(i), x.row(i))).collect()));
            }
            Op::Scale(a, c) => acc(a, g.scale(*c)),
            Op::Offset(a, _) => acc(a, g.clone()),
            Op::LeakyRelu(a, s) => acc(a, g.zip_map(val(a), |d, x| if x > 0.0 { d } else { s * d })),
            Op::Tanh(a) => acc(a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Exp(a) => acc(a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Ln(a) => acc(a, g.zip_map(val(a), |d, x| d / x.max(LOG_FLOOR))),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::filled(r, c, g.item()));
            }
            Op::RowSums(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::from_fn(r, c, |i, _| g.as_slice()[i]));
            }
            Op::ColSums(a) => {
                let (r, c) = val(a).shape();
                acc(a, Matrix::from_fn(r, c, |_, j| g.as_slice()[j]));
            }
            Op::RowDot(a, b) => {
                let (x, y) = (val(a), val(b));
                let gs = g.as_slice();
                acc(a, Matrix::from_fn(x.rows(), x.cols(), |i, j| gs[i] * y[(i, j)]));
                acc(b, Matrix::from_fn(x.rows(), x.cols(), |i, j| gs[i] * x[(i, j)]));
            }
            Op::NormalizeRows(a) => {
                let (x, y) = (val(a), &node.value);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = dot(x.row(i), x.row(i)).sqrt();
                    let yg = dot(y.row(i), g.row(i));
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = (g[(i, j)] - y[(i, j)] * yg) / n;
                    }
                }
                acc(a, dx);
            }
            Op::LogSumExpRows(a, mask) => {
                let (x, lse) = (val(a), &node.value);
                let c = x.cols();
                let dx = Matrix::from_fn(x.rows(), c, |i, j| {
                    let keep = mask.as_ref().is_none_or(|m| m[i * c + j]);
                    if keep {
                        g.as_slice()[i] * (x[(i, j)] - lse.as_slice()[i]).exp()
                    } else {
                        0.0
                    }
                });
                acc(a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let gs: f64 = g.row(i).iter().sum();
                    for (d, &ly) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d -= ly.exp() * gs;
                    }
                }
                acc(a, dx);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yg = dot(y.row(i), g.row(i));
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = y[(i, j)] * (g[(i, j)] - yg);
                    }
                }
                acc(a, dx);
            }
            Op::PairwiseDistPow(a, b, p) => {
                let (x, y) = (val(a), val(b));
                let d = x.cols();
                let mut dx = Matrix::zeros(x.rows(), d);
                let mut dy = Matrix::zeros(y.rows(), d);
                for i in 0..x.rows() {
                    let xi = x.row(i);
                    for j in 0..y.rows() {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        let yj = y.row(j);
                        for c in 0..d {
                            let t = gij * pow_abs_grad(xi[c] - yj[c], *p);
                            dx[(i, c)] += t;
                            dy[(j, c)] -= t;
                        }
                    }
                }
                acc(a, dx);
                acc(b, dy);
            }
            Op::RowDistPow(a, b, p) => {
                let (x, y) = (val(a), val(b));
                let gs = g.as_slice();
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, c| gs[i] * pow_abs_grad(x[(i, c)] - y[(i, c)], *p));
                acc(b, dx.scale(-1.0));
                acc(a, dx);
            }
            Op::HConcat(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                acc(a, Matrix::from_fn(g.rows(), ca, |i, j| g[(i, j)]));
                acc(b, Matrix::from_fn(g.rows(), cb, |i, j| g[(i, ca + j)]));
            }
        }
    }
}
