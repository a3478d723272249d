//! Reverse-mode autodiff on a tape of tensor operations.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! forward value and the ids of its parents, so insertion order is already a
//! topological order. [`Graph::backward`] runs one reverse sweep from a
//! scalar loss and returns per-node adjoints; nodes the loss does not reach
//! keep a zero gradient.
//!
//! The op set is exactly what the pipeline needs: affine layers, pointwise
//! nonlinearities, row-wise log-softmax, per-row gathers for selected-token
//! log-probs, and the min/clamp pair used by the clipped surrogate. Forward
//! kernels are shared with the plain (non-taped) path in
//! [`super::tensor`], so both produce bitwise-identical values.
//!
//! Subgradient conventions at kinks:
//! - `relu` at 0 propagates 0;
//! - `clamp` propagates 1 on the closed interval `[lo, hi]`, 0 outside;
//! - `min_elem` routes the adjoint to its first argument on ties.

use super::tensor::{
    add_row_broadcast, ew_binary, log_softmax_rows, matmul, matmul_at, matmul_bt, sigmoid,
    softmax_rows, Tensor,
};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    LogSoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Col(NodeId, usize),
    HCat(Vec<NodeId>),
    Reshape(NodeId),
    RowSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Adjoints from one backward sweep, indexed by [`NodeId`].
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj[id].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.adj
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|x| x.is_finite()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward's loss w.r.t. node `id`, zero-filled if
    /// the loss does not depend on it.
    pub fn grad_of(&self, grads: &Gradients, id: NodeId) -> Tensor {
        grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()))
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// Matrix plus a row vector broadcast over rows (bias add).
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let v = add_row_broadcast(&self.nodes[m].value, &self.nodes[row].value);
        self.push(v, Op::AddRow(m, row))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y, "add");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y, "sub");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y, "mul");
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise minimum; adjoint goes to `a` where the values tie.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ew_binary(&self.nodes[a].value, &self.nodes[b].value, f64::min, "min_elem");
        self.push(v, Op::MinElem(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let v = self.nodes[a].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(&self.nodes[a].value);
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// `out[i] = a[i, idx[i]]` as a rank-1 tensor.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(t.rank() == 2, "gather_rows: rank {}", t.rank());
        assert!(
            idx.len() == t.rows(),
            "gather_rows: {} indices for {} rows",
            idx.len(),
            t.rows()
        );
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < t.cols(), "gather_rows: col {j} out of {}", t.cols());
                t.get2(i, j)
            })
            .collect();
        self.push(Tensor::vector(data), Op::GatherRows(a, idx.to_vec()))
    }

    /// Column `j` of a rank-2 tensor as a rank-1 tensor.
    pub fn col(&mut self, a: NodeId, j: usize) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(t.rank() == 2 && j < t.cols(), "col: invalid column {j}");
        let data: Vec<f64> = (0..t.rows()).map(|i| t.get2(i, j)).collect();
        self.push(Tensor::vector(data), Op::Col(a, j))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn hcat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "hcat: no parts");
        let rows = self.nodes[parts[0]].value.rows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                let t = &self.nodes[p].value;
                assert!(t.rank() == 2 && t.rows() == rows, "hcat: row mismatch");
                t.cols()
            })
            .sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            let c = t.cols();
            for i in 0..rows {
                data[i * total + off..i * total + off + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let v = Tensor::from_vec(&[rows, total], data).expect("hcat shape");
        self.push(v, Op::HCat(parts.to_vec()))
    }

    /// Same data, new shape (row-major order preserved).
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a]
            .value
            .reshaped(shape)
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Per-row sum of a rank-2 tensor, as a rank-1 tensor.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        assert!(t.rank() == 2, "row_sum: rank {}", t.rank());
        let c = t.cols();
        let data: Vec<f64> = (0..t.rows())
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Tensor::vector(data), Op::RowSum(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a].value;
        let s: f64 = t.data().iter().sum();
        let n = t.numel() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll(a))
    }

    /// Identity forward, zero gradient: cuts the tape at `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::Detach)
    }

    /// Reverse sweep from a scalar `loss` node. Accumulates adjoints for
    /// every node the loss depends on; returns them indexed by node id.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = &self.nodes[loss].value;
        if lt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Tensor::from_vec(lt.shape(), vec![1.0]).expect("scalar seed"));

        for id in (0..=loss).rev() {
            let Some(d) = adj[id].take() else { continue };
            self.accumulate_parents(id, &d, &mut adj);
            adj[id] = Some(d);
        }
        Ok(Gradients { adj })
    }

    fn add_to(adj: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor) {
        match &mut adj[id] {
            Some(t) => {
                t.assert_same_shape(&delta, "adjoint accumulate");
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, id: NodeId, d: &Tensor, adj: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul_bt(d, &self.nodes[*b].value);
                let db = matmul_at(&self.nodes[*a].value, d);
                Self::add_to(adj, *a, da);
                Self::add_to(adj, *b, db);
            }
            Op::AddRow(m, row) => {
                Self::add_to(adj, *m, d.clone());
                let c = d.cols();
                let mut dr = vec![0.0; c];
                for i in 0..d.rows() {
                    for j in 0..c {
                        dr[j] += d.get2(i, j);
                    }
                }
                Self::add_to(adj, *row, Tensor::vector(dr));
            }
            Op::Add(a, b) => {
                Self::add_to(adj, *a, d.clone());
                Self::add_to(adj, *b, d.clone());
            }
            Op::Sub(a, b) => {
                Self::add_to(adj, *a, d.clone());
                Self::add_to(adj, *b, d.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = ew_binary(d, &self.nodes[*b].value, |x, y| x * y, "mul bwd");
                let db = ew_binary(d, &self.nodes[*a].value, |x, y| x * y, "mul bwd");
                Self::add_to(adj, *a, da);
                Self::add_to(adj, *b, db);
            }
            Op::MinElem(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let mut da = Tensor::zeros(va.shape());
                let mut db = Tensor::zeros(vb.shape());
                for i in 0..d.numel() {
                    if va.data()[i] <= vb.data()[i] {
                        da.data_mut()[i] = d.data()[i];
                    } else {
                        db.data_mut()[i] = d.data()[i];
                    }
                }
                Self::add_to(adj, *a, da);
                Self::add_to(adj, *b, db);
            }
            Op::Scale(a, k) => Self::add_to(adj, *a, d.map(|x| x * k)),
            Op::AddScalar(a) => Self::add_to(adj, *a, d.clone()),
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let da = ew_binary(d, y, |g, t| g * (1.0 - t * t), "tanh bwd");
                Self::add_to(adj, *a, da);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let da = ew_binary(d, x, |g, v| if v > 0.0 { g } else { 0.0 }, "relu bwd");
                Self::add_to(adj, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let da = ew_binary(d, y, |g, s| g * s * (1.0 - s), "sigmoid bwd");
                Self::add_to(adj, *a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let da = ew_binary(d, y, |g, e| g * e, "exp bwd");
                Self::add_to(adj, *a, da);
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                let da = ew_binary(d, x, |g, v| 2.0 * g * v, "square bwd");
                Self::add_to(adj, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                let da = ew_binary(
                    d,
                    x,
                    |g, v| if v >= *lo && v <= *hi { g } else { 0.0 },
                    "clamp bwd",
                );
                Self::add_to(adj, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let p = softmax_rows(&self.nodes[*a].value);
                let (r, c) = (d.rows(), d.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let dsum: f64 = (0..c).map(|j| d.get2(i, j)).sum();
                    for j in 0..c {
                        da.set2(i, j, d.get2(i, j) - p.get2(i, j) * dsum);
                    }
                }
                Self::add_to(adj, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let t = &self.nodes[*a].value;
                let mut da = Tensor::zeros(t.shape());
                for (i, &j) in idx.iter().enumerate() {
                    let cur = da.get2(i, j);
                    da.set2(i, j, cur + d.data()[i]);
                }
                Self::add_to(adj, *a, da);
            }
            Op::Col(a, j) => {
                let t = &self.nodes[*a].value;
                let mut da = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    da.set2(i, *j, d.data()[i]);
                }
                Self::add_to(adj, *a, da);
            }
            Op::HCat(parts) => {
                let total = d.cols();
                let mut off = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let c = t.cols();
                    let mut dp = Tensor::zeros(t.shape());
                    for i in 0..d.rows() {
                        dp.data_mut()[i * c..(i + 1) * c]
                            .copy_from_slice(&d.data()[i * total + off..i * total + off + c]);
                    }
                    Self::add_to(adj, p, dp);
                    off += c;
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let da = Tensor::from_vec(&shape, d.data().to_vec()).expect("reshape bwd");
                Self::add_to(adj, *a, da);
            }
            Op::RowSum(a) => {
                let t = &self.nodes[*a].value;
                let c = t.cols();
                let mut da = Tensor::zeros(t.shape());
                for i in 0..t.rows() {
                    for j in 0..c {
                        da.set2(i, j, d.data()[i]);
                    }
                }
                Self::add_to(adj, *a, da);
            }
            Op::SumAll(a) => {
                let t = &self.nodes[*a].value;
                let g = d.item();
                Self::add_to(adj, *a, t.map(|_| g));
            }
            Op::MeanAll(a) => {
                let t = &self.nodes[*a].value;
                let g = d.item() / t.numel() as f64;
                Self::add_to(adj, *a, t.map(|_| g));
            }
            Op::Detach => {}
        }
    }
}
