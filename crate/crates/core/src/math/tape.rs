//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation appends one node holding its forward value, so node ids are
//! already a topological order. [`Tape::backward`] walks the ids in reverse and
//! applies each node's vector-Jacobian product exactly once.

use crate::error::{Error, Result};

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogSumExpRows(NodeId),
    BroadcastCols(NodeId),
    SelectCols(NodeId, Vec<usize>),
    RowSum(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when the node does not influence the output.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of the node's shape when absent.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            Matrix::zeros(r, c)
        })
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Input treated as a constant; no adjoint is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row_bias(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::Input("log of a non-positive entry".into()));
        }
        let v = x.map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    /// Row-wise `log Σ_j exp(a_ij)` as a `rows × 1` column, max-shifted.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let values = x.row_iter().map(logsumexp).collect();
        let v = Matrix::from_raw(x.rows(), 1, values);
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Repeats a `rows × 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.cols() != 1 {
            return Err(Error::shape(format!(
                "broadcast_cols expects a column, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        let v = Matrix::from_fn(x.rows(), cols, |i, _| x.get(i, 0));
        Ok(self.push(v, Op::BroadcastCols(a)))
    }

    /// Gathers the listed columns, in order.
    pub fn select_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&j| j >= x.cols()) {
            return Err(Error::shape(format!(
                "column {bad} out of range for {} columns",
                x.cols()
            )));
        }
        let v = Matrix::from_fn(x.rows(), idx.len(), |i, k| x.get(i, idx[k]));
        Ok(self.push(v, Op::SelectCols(a, idx.to_vec())))
    }

    /// Per-row sum as a `rows × 1` column.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let values = x.row_iter().map(|r| r.iter().sum()).collect();
        let v = Matrix::from_raw(x.rows(), 1, values);
        self.push(v, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got {r}x{c}"
            )));
        }
        self.backward_with_seed(loss, Matrix::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream adjoint for `output`.
    /// Used when the loss gradient with respect to `output` is known in
    /// closed form.
    pub fn backward_with_seed(&self, output: NodeId, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(format!(
                "seed {:?} for node of shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b))?;
                let gb = self.value(*a).t_matmul(g)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *bias, g.sum_cols())?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(self.value(*b))?;
                let gb = g.hadamard(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Relu(a) => {
                let mask = node.value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.hadamard(&mask)?)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(&node.value)?)?,
            Op::Log(a) => {
                let inv = self.value(*a).map(f64::recip);
                self.accumulate(grads, *a, g.hadamard(&inv)?)?;
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    g.get(i, 0) * (x.get(i, j) - node.value.get(i, 0)).exp()
                });
                self.accumulate(grads, *a, ga)?;
            }
            Op::BroadcastCols(a) => {
                let ga = Matrix::from_raw(g.rows(), 1, g.row_iter().map(|r| r.iter().sum()).collect());
                self.accumulate(grads, *a, ga)?;
            }
            Op::SelectCols(a, idx) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    for (k, &j) in idx.iter().enumerate() {
                        let v = ga.get(i, j) + g.get(i, k);
                        ga.set(i, j, v);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let ga = Matrix::from_fn(x.rows(), x.cols(), |i, _| g.get(i, 0));
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
        if matches!(self.nodes[id.0].op, Op::Constant) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(existing) => existing.axpy(1.0, &delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Central finite differences of a scalar function, one entry at a time.
pub fn central_difference(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_function_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(1.7));
        let y = t.sum(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(1.0));
    }

    #[test]
    fn square_at_three_is_six() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let x = t.leaf(Matrix::scalar(5.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), Some(2.0));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        assert!(t.log(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = exp(x) + exp(x) * x at x = 0.5
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(0.5));
        let e = t.exp(x);
        let ex = t.mul(e, x).unwrap();
        let s = t.add(e, ex).unwrap();
        let g = t.backward(s).unwrap();
        let expect = 0.5f64.exp() * (2.0 + 0.5);
        assert!((g.get(x).unwrap().item().unwrap() - expect).abs() < 1e-14);
    }
}
