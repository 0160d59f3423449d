//! Minimal define-then-run reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records a fixed computation graph: leaf inputs (parameters,
//! data, masks) and the handful of primitives the calibration and
//! projection networks need. [`Tape::forward`] evaluates the graph for a
//! set of feeds; [`Tape::backward`] then propagates adjoints from a scalar
//! node back to every node. The same graph is re-fed batch after batch.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::matrix::Matrix;

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a `1 x c` row to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Softplus(NodeId),
    Square(NodeId),
    NormalizeRows(NodeId),
    /// Row softmax restricted to entries where the mask is 1.
    SoftmaxRows(NodeId, Option<NodeId>),
    LogSoftmaxRows(NodeId, Option<NodeId>),
    ConcatCols(NodeId, NodeId),
    /// Row-wise inner product, `r x 1`.
    RowDot(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::RowDot(..) => "row_dot",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

/// Recorded computation graph plus the activations of its last forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Option<Matrix>>,
    forwarded: bool,
}

/// Adjoints produced by [`Tape::backward`], one per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.values.push(None);
        self.forwarded = false;
        NodeId(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Leaf node whose value is supplied at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::NormalizeRows(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<NodeId>) -> NodeId {
        self.push(Op::SoftmaxRows(a, mask))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId, mask: Option<NodeId>) -> NodeId {
        self.push(Op::LogSoftmaxRows(a, mask))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::RowDot(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Linear layer `x * w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Evaluates every node. All input nodes must be fed.
    pub fn forward(&mut self, feeds: &[(NodeId, &Matrix)]) -> Result<()> {
        self.forwarded = false;
        let fed: HashMap<NodeId, &Matrix> = feeds.iter().copied().collect();
        for idx in 0..self.ops.len() {
            let value = match &self.ops[idx] {
                Op::Input(name) => match fed.get(&NodeId(idx)) {
                    Some(m) => {
                        if !m.is_finite() {
                            return Err(Error::InvalidInput(format!("input `{name}` is not finite")));
                        }
                        (*m).clone()
                    }
                    None => return Err(Error::MissingInput(name.clone())),
                },
                op => self.eval(op)?,
            };
            self.values[idx] = Some(value);
        }
        self.forwarded = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Matrix {
        self.values[id.0]
            .as_ref()
            .expect("operands evaluate before their consumers")
    }

    fn eval(&self, op: &Op) -> Result<Matrix> {
        let name = op.name();
        Ok(match *op {
            Op::Input(_) => unreachable!("inputs are fed"),
            Op::MatMul(a, b) => self.val(a).matmul(self.val(b))?,
            Op::MatMulT(a, b) => self.val(a).matmul_t(self.val(b))?,
            Op::Add(a, b) => self.val(a).add(self.val(b))?,
            Op::Sub(a, b) => self.val(a).sub(self.val(b))?,
            Op::Mul(a, b) => self.val(a).hadamard(self.val(b))?,
            Op::AddRow(a, b) => {
                let (x, row) = (self.val(a), self.val(b));
                if row.rows() != 1 || row.cols() != x.cols() {
                    return Err(Error::shape(name, format!("{:?} + row {:?}", x.shape(), row.shape())));
                }
                let mut out = x.clone();
                for r in 0..out.rows() {
                    out.row_mut(r).iter_mut().zip(row.data()).for_each(|(o, b)| *o += b);
                }
                out
            }
            Op::Scale(a, s) => self.val(a).scale(s),
            Op::Softplus(a) => self.val(a).map(softplus),
            Op::Square(a) => self.val(a).map(|v| v * v),
            Op::NormalizeRows(a) => {
                let x = self.val(a);
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let n = crate::tensor::norm(x.row(r));
                    if n == 0.0 {
                        return Err(Error::DegenerateInput(format!("zero row {r} in normalize_rows")));
                    }
                    out.row_mut(r).iter_mut().for_each(|v| *v /= n);
                }
                out
            }
            Op::SoftmaxRows(a, mask) => {
                let mask = self.mask_for(name, a, mask)?;
                let mut out = self.val(a).clone();
                for r in 0..out.rows() {
                    softmax_row(out.row_mut(r), mask.map(|m| m.row(r)), false);
                }
                out
            }
            Op::LogSoftmaxRows(a, mask) => {
                let mask = self.mask_for(name, a, mask)?;
                let mut out = self.val(a).clone();
                for r in 0..out.rows() {
                    softmax_row(out.row_mut(r), mask.map(|m| m.row(r)), true);
                }
                out
            }
            Op::ConcatCols(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                if x.rows() != y.rows() {
                    return Err(Error::shape(name, format!("{:?} | {:?}", x.shape(), y.shape())));
                }
                let cols = x.cols() + y.cols();
                let mut data = Vec::with_capacity(x.rows() * cols);
                for r in 0..x.rows() {
                    data.extend_from_slice(x.row(r));
                    data.extend_from_slice(y.row(r));
                }
                Matrix::from_raw(x.rows(), cols, data)
            }
            Op::RowDot(a, b) => {
                let (x, y) = (self.val(a), self.val(b));
                if x.shape() != y.shape() {
                    return Err(Error::shape(name, format!("{:?} . {:?}", x.shape(), y.shape())));
                }
                let data = (0..x.rows()).map(|r| crate::tensor::dot(x.row(r), y.row(r))).collect();
                Matrix::from_raw(x.rows(), 1, data)
            }
            Op::Sum(a) => Matrix::from_raw(1, 1, vec![self.val(a).data().iter().sum()]),
            Op::Mean(a) => {
                let x = self.val(a);
                let n = x.data().len();
                if n == 0 {
                    return Err(Error::shape(name, "mean of an empty matrix"));
                }
                Matrix::from_raw(1, 1, vec![x.data().iter().sum::<f64>() / n as f64])
            }
        })
    }

    fn mask_for(&self, name: &'static str, a: NodeId, mask: Option<NodeId>) -> Result<Option<&Matrix>> {
        match mask {
            None => Ok(None),
            Some(m) => {
                let mv = self.val(m);
                if mv.shape() != self.val(a).shape() {
                    return Err(Error::shape(
                        name,
                        format!("mask {:?} vs {:?}", mv.shape(), self.val(a).shape()),
                    ));
                }
                Ok(Some(mv))
            }
        }
    }

    /// Value of a node after the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Matrix> {
        if !self.forwarded {
            return Err(Error::Order("value requested before forward".into()));
        }
        Ok(self.val(id))
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if v.shape() != (1, 1) {
            return Err(Error::shape("scalar", format!("{:?} is not 1x1", v.shape())));
        }
        Ok(v.get(0, 0))
    }

    /// Reverse pass from a scalar node. Masks receive zero adjoints.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.forwarded {
            return Err(Error::Order("backward called before forward".into()));
        }
        let lv = self.val(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss node is {:?}, not scalar", lv.shape()),
            ));
        }
        let mut grads: Vec<Matrix> = self
            .values
            .iter()
            .map(|v| {
                let v = v.as_ref().expect("forwarded");
                Matrix::zeros(v.rows(), v.cols())
            })
            .collect();
        grads[loss.0] = Matrix::from_raw(1, 1, vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = std::mem::replace(&mut grads[idx], Matrix::zeros(0, 0));
            if g.data().iter().all(|v| *v == 0.0) {
                grads[idx] = g;
                continue;
            }
            let y = self.val(NodeId(idx));
            match self.ops[idx] {
                Op::Input(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.val(b))?;
                    let gb = self.val(a).t_matmul(&g)?;
                    grads[a.0].add_assign(&ga);
                    grads[b.0].add_assign(&gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let ga = g.matmul(self.val(b))?;
                    let gb = g.t_matmul(self.val(a))?;
                    grads[a.0].add_assign(&ga);
                    grads[b.0].add_assign(&gb);
                }
                Op::Add(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].add_assign(&g);
                }
                Op::Sub(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].axpy(-1.0, &g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.val(b))?;
                    let gb = g.hadamard(self.val(a))?;
                    grads[a.0].add_assign(&ga);
                    grads[b.0].add_assign(&gb);
                }
                Op::AddRow(a, b) => {
                    grads[a.0].add_assign(&g);
                    let gb = grads[b.0].data_mut();
                    for r in 0..g.rows() {
                        gb.iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                    }
                }
                Op::Scale(a, s) => grads[a.0].axpy(s, &g),
                Op::Softplus(a) => {
                    let x = self.val(a);
                    let ga = g.zip_map(x, |gv, xv| gv * sigmoid(xv));
                    grads[a.0].add_assign(&ga);
                }
                Op::Square(a) => {
                    let x = self.val(a);
                    let ga = g.zip_map(x, |gv, xv| 2.0 * gv * xv);
                    grads[a.0].add_assign(&ga);
                }
                Op::NormalizeRows(a) => {
                    let x = self.val(a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = crate::tensor::norm(x.row(r));
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = crate::tensor::dot(yr, gr);
                        ga.row_mut(r)
                            .iter_mut()
                            .zip(yr.iter().zip(gr))
                            .for_each(|(o, (yv, gv))| *o = (gv - yv * proj) / n);
                    }
                    grads[a.0].add_assign(&ga);
                }
                Op::SoftmaxRows(a, mask) => {
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = crate::tensor::dot(yr, gr);
                        let mrow = mask.map(|m| self.val(m).row(r));
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            if mrow.is_some_and(|m| m[c] == 0.0) {
                                continue;
                            }
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    grads[a.0].add_assign(&ga);
                }
                Op::LogSoftmaxRows(a, mask) => {
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mrow = mask.map(|m| self.val(m).row(r));
                        let live = |c: usize| mrow.is_none_or(|m| m[c] != 0.0);
                        let gsum: f64 = (0..yr.len()).filter(|c| live(*c)).map(|c| gr[c]).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            if live(c) {
                                *o = gr[c] - yr[c].exp() * gsum;
                            }
                        }
                    }
                    grads[a.0].add_assign(&ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.val(a).cols();
                    let gav = grads[a.0].data_mut();
                    for r in 0..g.rows() {
                        gav[r * ca..(r + 1) * ca]
                            .iter_mut()
                            .zip(&g.row(r)[..ca])
                            .for_each(|(o, v)| *o += v);
                    }
                    let cb = self.val(b).cols();
                    let gbv = grads[b.0].data_mut();
                    for r in 0..g.rows() {
                        gbv[r * cb..(r + 1) * cb]
                            .iter_mut()
                            .zip(&g.row(r)[ca..])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                Op::RowDot(a, b) => {
                    let (x, z) = (self.val(a), self.val(b));
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    let mut gb = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let s = g.get(r, 0);
                        ga.row_mut(r).iter_mut().zip(z.row(r)).for_each(|(o, v)| *o = s * v);
                        gb.row_mut(r).iter_mut().zip(x.row(r)).for_each(|(o, v)| *o = s * v);
                    }
                    grads[a.0].add_assign(&ga);
                    grads[b.0].add_assign(&gb);
                }
                Op::Sum(a) => {
                    let s = g.get(0, 0);
                    grads[a.0].data_mut().iter_mut().for_each(|o| *o += s);
                }
                Op::Mean(a) => {
                    let n = self.val(a).data().len() as f64;
                    let s = g.get(0, 0) / n;
                    grads[a.0].data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            grads[idx] = g;
        }
        Ok(Gradients { grads })
    }
}

impl Matrix {
    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self.data().iter().zip(other.data()).map(|(a, b)| f(*a, *b)).collect();
        Matrix::from_raw(self.rows(), self.cols(), data)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place (log-)softmax over the entries whose mask is nonzero. Masked
/// entries are set to 0; a fully masked row becomes all zeros.
fn softmax_row(row: &mut [f64], mask: Option<&[f64]>, log: bool) {
    let live = |c: usize| mask.is_none_or(|m| m[c] != 0.0);
    let max = (0..row.len())
        .filter(|c| live(*c))
        .map(|c| row[c])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let total: f64 = (0..row.len()).filter(|c| live(*c)).map(|c| (row[c] - max).exp()).sum();
    let log_total = total.ln();
    for (c, v) in row.iter_mut().enumerate() {
        *v = match (live(c), log) {
            (false, _) => 0.0,
            (true, true) => *v - max - log_total,
            (true, false) => (*v - max).exp() / total,
        };
    }
}

/// Central finite-difference check of `loss` with respect to `params`.
///
/// Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
/// The tape is left holding the forward pass at the unperturbed point.
pub fn grad_check(
    tape: &mut Tape,
    loss: NodeId,
    feeds: &[(NodeId, &Matrix)],
    params: &[NodeId],
    h: f64,
) -> Result<f64> {
    tape.forward(feeds)?;
    let grads = tape.backward(loss)?;
    let mut owned: Vec<(NodeId, Matrix)> = feeds.iter().map(|(id, m)| (*id, (*m).clone())).collect();
    let mut worst: f64 = 0.0;
    for p in params {
        let slot = owned
            .iter()
            .position(|(id, _)| id == p)
            .ok_or_else(|| Error::MissingInput(format!("parameter node {}", p.0)))?;
        let n = owned[slot].1.data().len();
        for e in 0..n {
            let orig = owned[slot].1.data()[e];
            owned[slot].1.data_mut()[e] = orig + h;
            let plus = eval_scalar(tape, loss, &owned)?;
            owned[slot].1.data_mut()[e] = orig - h;
            let minus = eval_scalar(tape, loss, &owned)?;
            owned[slot].1.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(*p).data()[e];
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    tape.forward(feeds)?;
    Ok(worst)
}

fn eval_scalar(tape: &mut Tape, loss: NodeId, feeds: &[(NodeId, Matrix)]) -> Result<f64> {
    let refs: Vec<(NodeId, &Matrix)> = feeds.iter().map(|(id, m)| (*id, m)).collect();
    tape.forward(&refs)?;
    tape.scalar(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut t = Tape::new();
        let x = t.input("x");
        let w = t.input("w");
        let y = t.matmul(x, w);
        let xv = m(1, 3, &[1.0, -2.0, 0.5]);
        let wv = Matrix::identity(3);
        t.forward(&[(x, &xv), (w, &wv)]).unwrap();
        assert_eq!(t.value(y).unwrap(), &xv);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.input("x");
        let y = t.softmax_rows(x, None);
        t.forward(&[(x, &m(1, 2, &[0.0, 0.0]))]).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_excludes_entries() {
        let mut t = Tape::new();
        let x = t.input("x");
        let mask = t.input("mask");
        let y = t.softmax_rows(x, Some(mask));
        let xv = m(2, 3, &[0.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
        let mv = m(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        t.forward(&[(x, &xv), (mask, &mv)]).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut t = Tape::new();
        let x = t.input("x");
        let sq = t.square(x);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let xv = m(1, 3, &[1.5, -2.0, 3.0]);
        t.forward(&[(x, &xv)]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x), &xv);
    }

    #[test]
    fn inner_product_gradient_is_other_operand() {
        let mut t = Tape::new();
        let a = t.input("a");
        let x = t.input("x");
        let d = t.row_dot(a, x);
        let loss = t.sum(d);
        let av = m(1, 3, &[0.3, -1.0, 2.0]);
        let xv = m(1, 3, &[4.0, 5.0, 6.0]);
        t.forward(&[(a, &av), (x, &xv)]).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x), &av);
    }

    #[test]
    fn backward_before_forward_is_order_error() {
        let mut t = Tape::new();
        let x = t.input("x");
        let s = t.sum(x);
        assert!(matches!(t.backward(s), Err(Error::Order(_))));
    }

    #[test]
    fn missing_feed_and_shape_errors() {
        let mut t = Tape::new();
        let a = t.input("a");
        let b = t.input("b");
        t.matmul(a, b);
        assert!(matches!(
            t.forward(&[(a, &Matrix::zeros(2, 2))]),
            Err(Error::MissingInput(_))
        ));
        let r = t.forward(&[(a, &Matrix::zeros(2, 2)), (b, &Matrix::zeros(3, 1))]);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut t = Tape::new();
        let x = t.input("x");
        let sq = t.square(x);
        let loss = t.sum(sq);
        let xv = m(2, 2, &[0.3, -1.2, 2.0, 0.7]);
        let err = grad_check(&mut t, loss, &[(x, &xv)], &[x], 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut t = Tape::new();
        let x = t.input("x");
        let w = t.input("w");
        let b = t.input("b");
        let mask = t.input("mask");
        let other = t.input("other");
        let h = t.linear(x, w, b);
        let h = t.softplus(h);
        let n = t.normalize_rows(h);
        let logits = t.matmul_t(n, other);
        let scaled = t.scale(logits, 3.0);
        let cat = t.concat_cols(scaled, n);
        let ls = t.log_softmax_rows(cat, Some(mask));
        let sm = t.softmax_rows(cat, None);
        let prod = t.mul(ls, sm);
        let diff = t.sub(prod, sm);
        let rd = t.row_dot(diff, cat);
        let sq = t.square(rd);
        let a = t.mean(sq);
        let c = t.sum(ls);
        let total = t.add(a, c);

        let xv = m(2, 3, &[0.4, -0.3, 1.1, -0.8, 0.2, 0.5]);
        let wv = m(3, 2, &[0.7, -0.2, 0.1, 0.9, -0.5, 0.3]);
        let bv = m(1, 2, &[0.05, -0.1]);
        let ov = m(2, 2, &[0.3, 0.8, -0.6, 0.1]);
        let mv = m(2, 4, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
        let feeds = [(x, &xv), (w, &wv), (b, &bv), (mask, &mv), (other, &ov)];
        let err = grad_check(&mut t, total, &feeds, &[x, w, b, other], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let build = || {
            let mut t = Tape::new();
            let x = t.input("x");
            let y = t.softplus(x);
            let z = t.normalize_rows(y);
            (t, x, z)
        };
        let xv = m(1, 4, &[0.1, 0.7, -3.0, 2.2]);
        let (mut t1, x1, z1) = build();
        let (mut t2, x2, z2) = build();
        t1.forward(&[(x1, &xv)]).unwrap();
        t2.forward(&[(x2, &xv)]).unwrap();
        let a: Vec<u64> = t1.value(z1).unwrap().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t2.value(z2).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
