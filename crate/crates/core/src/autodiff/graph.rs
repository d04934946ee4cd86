use crate::error::AutodiffError;
use crate::tensor::Tensor;

use super::linalg;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    MatMul { ta: bool, tb: bool },
    /// `[n, d] + [d]` broadcast over rows.
    AddRow,
    /// `[n, d] * [d]` broadcast over rows.
    MulRow,
    /// `[n, d] -> [d]`
    SumRows,
    /// `[d] -> [n, d]`
    BroadcastRows,
    /// `[n, c] -> [n]`
    RowSum,
    /// `[n] -> [n, c]`
    BroadcastCols,
    Sum,
    /// one element -> any shape
    Expand,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    Square,
    Affine { scale: f64 },
    Clamp { lo: f64, hi: f64 },
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul { .. } => "matmul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows => "broadcast_rows",
            Op::RowSum => "row_sum",
            Op::BroadcastCols => "broadcast_cols",
            Op::Sum => "sum",
            Op::Expand => "expand",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Square => "square",
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
            Op::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation graph. Node inputs always precede the node.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type OpResult = Result<NodeId, AutodiffError>;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> OpResult {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(id))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
            .expect("Tensor invariant guarantees finite values")
    }

    /// A non-differentiable input; [`Graph::grad`] never propagates into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Vec::new(), value)
            .expect("Tensor invariant guarantees finite values")
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, a: NodeId) -> Result<(usize, usize), AutodiffError> {
        self.value(a).dims2().ok_or_else(|| AutodiffError::BadRank {
            op,
            expected: "a rank-2 tensor",
            shape: self.shape(a).to_vec(),
        })
    }

    fn dims1(&self, op: &'static str, a: NodeId) -> Result<usize, AutodiffError> {
        match self.shape(a) {
            [d] => Ok(*d),
            s => Err(AutodiffError::BadRank {
                op,
                expected: "a rank-1 tensor",
                shape: s.to_vec(),
            }),
        }
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> OpResult {
        self.same_shape(op.name(), a, b)?;
        let value = self.value(a).zip_map(self.value(b), f);
        self.push(op, vec![a, b], value)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> OpResult {
        let value = self.value(a).map(f);
        self.push(op, vec![a], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> OpResult {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `ta`/`tb` select a transposed read.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> OpResult {
        let ad = self.dims2("matmul", a)?;
        let bd = self.dims2("matmul", b)?;
        let inner_a = if ta { ad.0 } else { ad.1 };
        let inner_b = if tb { bd.1 } else { bd.0 };
        if inner_a != inner_b {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (m, n, data) = linalg::matmul(
            self.value(a).data(),
            ad,
            ta,
            self.value(b).data(),
            bd,
            tb,
        );
        let value = Tensor::from_parts(vec![m, n], data);
        self.push(Op::MatMul { ta, tb }, vec![a, b], value)
    }

    /// Adds the vector `row` (shape `[d]`) to every row of `x` (shape `[n, d]`).
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> OpResult {
        self.row_op(Op::AddRow, x, row, |a, b| a + b)
    }

    /// Multiplies every row of `x` elementwise by `row`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> OpResult {
        self.row_op(Op::MulRow, x, row, |a, b| a * b)
    }

    fn row_op(&mut self, op: Op, x: NodeId, row: NodeId, f: impl Fn(f64, f64) -> f64) -> OpResult {
        let (_, d) = self.dims2(op.name(), x)?;
        let dv = self.dims1(op.name(), row)?;
        if d != dv {
            return Err(AutodiffError::ShapeMismatch {
                op: op.name(),
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks_exact(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(op, vec![x, row], value)
    }

    /// Column sums: `[n, d] -> [d]`.
    pub fn sum_rows(&mut self, x: NodeId) -> OpResult {
        let (_, d) = self.dims2("sum_rows", x)?;
        let mut out = vec![0.0; d];
        for chunk in self.value(x).data().chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        self.push(Op::SumRows, vec![x], Tensor::from_parts(vec![d], out))
    }

    /// Repeats a `[d]` vector into `n` rows.
    pub fn broadcast_rows(&mut self, v: NodeId, n: usize) -> OpResult {
        let d = self.dims1("broadcast_rows", v)?;
        let src = self.value(v).data();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        self.push(Op::BroadcastRows, vec![v], Tensor::from_parts(vec![n, d], data))
    }

    /// Per-row sums: `[n, c] -> [n]`.
    pub fn row_sum(&mut self, x: NodeId) -> OpResult {
        let (n, c) = self.dims2("row_sum", x)?;
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .map(|r| r.iter().sum())
            .collect();
        self.push(Op::RowSum, vec![x], Tensor::from_parts(vec![n], data))
    }

    /// Repeats each entry of an `[n]` vector across `c` columns.
    pub fn broadcast_cols(&mut self, v: NodeId, c: usize) -> OpResult {
        let n = self.dims1("broadcast_cols", v)?;
        let data = self
            .value(v)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat(x).take(c))
            .collect();
        self.push(Op::BroadcastCols, vec![v], Tensor::from_parts(vec![n, c], data))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> OpResult {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> OpResult {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, s: NodeId, shape: &[usize]) -> OpResult {
        let v = self.value(s);
        if v.len() != 1 {
            return Err(AutodiffError::BadRank {
                op: "expand",
                expected: "a one-element tensor",
                shape: v.shape().to_vec(),
            });
        }
        let value = Tensor::filled(shape, v.item());
        self.push(Op::Expand, vec![s], value)
    }

    /// Multiplies `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> OpResult {
        let shape = self.shape(x).to_vec();
        let e = self.expand(s, &shape)?;
        self.mul(x, e)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> OpResult {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> OpResult {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    /// Row-wise softmax of `[n, c]` logits.
    pub fn softmax(&mut self, z: NodeId) -> OpResult {
        let (_, c) = self.dims2("softmax", z)?;
        let zv = self.value(z);
        let mut data = Vec::with_capacity(zv.len());
        for row in zv.data().chunks_exact(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let total: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::from_parts(zv.shape().to_vec(), data);
        self.push(Op::Softmax, vec![z], value)
    }

    /// Row-wise log-softmax of `[n, c]` logits.
    pub fn log_softmax(&mut self, z: NodeId) -> OpResult {
        let (_, c) = self.dims2("log_softmax", z)?;
        let zv = self.value(z);
        let mut data = Vec::with_capacity(zv.len());
        for row in zv.data().chunks_exact(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_parts(zv.shape().to_vec(), data);
        self.push(Op::LogSoftmax, vec![z], value)
    }

    pub fn square(&mut self, x: NodeId) -> OpResult {
        self.unary(Op::Square, x, |v| v * v)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> OpResult {
        self.unary(Op::Affine { scale }, x, move |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> OpResult {
        self.affine(x, c, 0.0)
    }

    /// Elementwise clamp to `[lo, hi]`. The derivative is 1 strictly inside
    /// the interval and 0 elsewhere, including at the endpoints.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> OpResult {
        self.unary(Op::Clamp { lo, hi }, x, move |v| v.clamp(lo, hi))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> OpResult {
        let value = self.value(x).reshape(shape).map_err(|_| AutodiffError::ShapeMismatch {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.push(Op::Reshape, vec![x], value)
    }

    /// Mean cross-entropy of `[n, c]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> OpResult {
        let (n, c) = self.dims2("softmax_cross_entropy", logits)?;
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut onehot = vec![0.0; n * c];
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(AutodiffError::LabelOutOfRange { label, classes: c });
            }
            onehot[i * c + label] = 1.0;
        }
        let target = self.constant(Tensor::from_parts(vec![n, c], onehot));
        self.soft_cross_entropy(logits, target)
    }

    /// Mean over rows of `-Σ_j p_ij log softmax(z)_ij`, with `p` a node of
    /// row-stochastic targets (differentiable if it depends on a leaf).
    pub fn soft_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> OpResult {
        let (n, _) = self.dims2("soft_cross_entropy", logits)?;
        self.same_shape("soft_cross_entropy", logits, targets)?;
        let log_p = self.log_softmax(logits)?;
        let weighted = self.mul(targets, log_p)?;
        let total = self.sum(weighted)?;
        self.scale(total, -1.0 / n as f64)
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    ///
    /// The adjoint computation is recorded as nodes of this graph, so the
    /// returned ids can be used in further computation and differentiated
    /// again. Nodes that `loss` does not depend on receive exact zeros.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let end = loss.0 + 1;
        // Which nodes depend on some `wrt` node; only those carry adjoints.
        let mut reach = vec![false; end];
        for w in wrt.iter().filter(|w| w.0 < end) {
            reach[w.0] = true;
        }
        for i in 0..end {
            if !reach[i] && !matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                reach[i] = self.nodes[i].inputs.iter().any(|j| reach[j.0]);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        let seed = Tensor::filled(self.shape(loss), 1.0);
        adjoint[loss.0] = Some(self.constant(seed));

        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !reach[i] {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            for (slot, input) in inputs.iter().enumerate() {
                if !reach[input.0] {
                    continue;
                }
                let contribution = self.vjp(NodeId(i), slot, g)?;
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, contribution)?,
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.shape(w)))),
            })
            .collect()
    }

    /// Vector-Jacobian product of `node` with respect to its `slot`-th input,
    /// given the adjoint `g` of the node's output.
    fn vjp(&mut self, node: NodeId, slot: usize, g: NodeId) -> OpResult {
        let Node { op, inputs, .. } = self.nodes[node.0].clone();
        let x = inputs[slot];
        match op {
            Op::Leaf | Op::Constant => unreachable!("inputs-free node has no vjp"),
            Op::Add => Ok(g),
            Op::Sub => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.scale(g, -1.0)
                }
            }
            Op::Mul => self.mul(g, inputs[1 - slot]),
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                match (slot, ta, tb) {
                    (0, false, _) => self.matmul_t(g, b, false, !tb),
                    (0, true, _) => self.matmul_t(b, g, tb, true),
                    (1, _, false) => self.matmul_t(a, g, !ta, false),
                    (1, _, true) => self.matmul_t(g, a, true, ta),
                    _ => unreachable!(),
                }
            }
            Op::AddRow => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.sum_rows(g)
                }
            }
            Op::MulRow => {
                if slot == 0 {
                    self.mul_row(g, inputs[1])
                } else {
                    let p = self.mul(g, inputs[0])?;
                    self.sum_rows(p)
                }
            }
            Op::SumRows => {
                let n = self.shape(x)[0];
                self.broadcast_rows(g, n)
            }
            Op::BroadcastRows => self.sum_rows(g),
            Op::RowSum => {
                let c = self.shape(x)[1];
                self.broadcast_cols(g, c)
            }
            Op::BroadcastCols => self.row_sum(g),
            Op::Sum => {
                let shape = self.shape(x).to_vec();
                self.expand(g, &shape)
            }
            Op::Expand => {
                let s = self.sum(g)?;
                if self.shape(x).is_empty() {
                    Ok(s)
                } else {
                    let shape = self.shape(x).to_vec();
                    self.reshape(s, &shape)
                }
            }
            Op::Sigmoid => {
                let one_minus = self.affine(node, -1.0, 1.0)?;
                let d = self.mul(node, one_minus)?;
                self.mul(g, d)
            }
            Op::Tanh => {
                let sq = self.square(node)?;
                let d = self.affine(sq, -1.0, 1.0)?;
                self.mul(g, d)
            }
            Op::Softmax => {
                let c = self.shape(node)[1];
                let gs = self.mul(g, node)?;
                let rs = self.row_sum(gs)?;
                let rb = self.broadcast_cols(rs, c)?;
                let diff = self.sub(g, rb)?;
                self.mul(node, diff)
            }
            Op::LogSoftmax => {
                let c = self.shape(node)[1];
                let s = self.softmax(x)?;
                let rs = self.row_sum(g)?;
                let rb = self.broadcast_cols(rs, c)?;
                let sr = self.mul(s, rb)?;
                self.sub(g, sr)
            }
            Op::Square => {
                let two_x = self.scale(x, 2.0)?;
                self.mul(g, two_x)
            }
            Op::Affine { scale, .. } => self.scale(g, scale),
            Op::Clamp { lo, hi } => {
                let mask = self.value(x).map(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                self.mul(g, m)
            }
            Op::Reshape => {
                let shape = self.shape(x).to_vec();
                self.reshape(g, &shape)
            }
        }
    }
}
