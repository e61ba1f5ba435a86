//! Computation graphs over [`Tensor`]s with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of primitive nodes. Node ids are
//! assigned in insertion order and every node may only reference earlier
//! nodes, so insertion order is always a valid topological order. Leaves
//! are either named inputs/parameters (resolved from [`Bindings`] at
//! evaluation time) or constants baked into the graph.
//!
//! Masks (attention validity, recurrence pass-through) are data known when
//! the graph is built, so they live inside the ops rather than being bound.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Named tensors supplied to [`Graph::evaluate`].
pub type Bindings<R = f64> = BTreeMap<String, Tensor<R>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op<R> {
    Input(String),
    /// Trainable leaf.
    Param(String),
    Const(Tensor<R>),
    /// Elementwise binary ops. The right operand may also be a scalar or
    /// match the trailing axes of the left operand (row broadcast).
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    MatMul {
        transpose_rhs: bool,
    },
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Scale(R),
    Offset(R),
    /// Softmax over the last axis; masked-out columns get probability 0.
    Softmax(Option<Vec<bool>>),
    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)` over the last axis.
    Normalize(R),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    ReduceSum,
    ReduceMean,
    /// Sum over axis 0 of a matrix.
    SumRows,
    Reshape(Vec<usize>),
    /// Inverted dropout with a mask drawn from a seeded counter-based stream.
    Dropout {
        rate: R,
        seed: u64,
    },
}

impl<R> Op<R> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Maximum => "max",
            Op::MatMul { .. } => "matmul",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Softmax(_) => "softmax",
            Op::Normalize(_) => "normalize",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::ReduceSum => "reduce-sum",
            Op::ReduceMean => "reduce-mean",
            Op::SumRows => "sum-rows",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<R> {
    pub op: Op<R>,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Graph<R = f64> {
    nodes: Vec<Node<R>>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn nodes(&self) -> &[Node<R>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<R> {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op<R>, inputs: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        assert!(inputs.iter().all(|i| i.0 < id.0), "inputs must precede node");
        self.nodes.push(Node { op, inputs });
        id
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, Vec::new());
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Free (non-trainable) input. Repeated names resolve to the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable parameter. Repeated names resolve to the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn constant(&mut self, t: Tensor<R>) -> NodeId {
        self.push(Op::Const(t), Vec::new())
    }

    pub fn scalar(&mut self, v: R) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Names the node as a graph output, reported by [`Evaluation::outputs`].
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Names of all trainable parameters referenced by the graph.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(s) => Some(s.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn apply(&mut self, op: Op<R>, inputs: &[NodeId]) -> NodeId {
        self.push(op, inputs.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div, vec![a, b])
    }
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Maximum, vec![a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { transpose_rhs: false }, vec![a, b])
    }
    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { transpose_rhs: true }, vec![a, b])
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![a])
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu, vec![a])
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp, vec![a])
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log, vec![a])
    }
    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        self.push(Op::Scale(c), vec![a])
    }
    pub fn offset(&mut self, a: NodeId, c: R) -> NodeId {
        self.push(Op::Offset(c), vec![a])
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(None), vec![a])
    }
    pub fn softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> NodeId {
        self.push(Op::Softmax(Some(mask.to_vec())), vec![a])
    }
    pub fn normalize(&mut self, a: NodeId, eps: R) -> NodeId {
        self.push(Op::Normalize(eps), vec![a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(axis), parts.to_vec())
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { axis, start, end }, vec![a])
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceSum, vec![a])
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMean, vec![a])
    }
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumRows, vec![a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }
    pub fn dropout(&mut self, a: NodeId, rate: R, seed: u64) -> NodeId {
        self.push(Op::Dropout { rate, seed }, vec![a])
    }

    /// Forward pass. Bindings are only read.
    pub fn evaluate(&self, bindings: &Bindings<R>) -> Result<Evaluation<R>> {
        self.evaluate_upto(bindings, self.nodes.len())
    }

    fn evaluate_upto(&self, bindings: &Bindings<R>, end: usize) -> Result<Evaluation<R>> {
        let mut values: Vec<Tensor<R>> = Vec::with_capacity(end);
        for (idx, node) in self.nodes[..end].iter().enumerate() {
            let v = forward(idx, node, &values, bindings)?;
            values.push(v);
        }
        Ok(Evaluation {
            values,
            outputs: self.outputs.clone(),
        })
    }

    /// Evaluates the graph and back-propagates from the scalar `loss` node.
    /// Every named leaf (input or parameter) receives a gradient; leaves the
    /// loss does not depend on get zeros.
    pub fn backprop(&self, bindings: &Bindings<R>, loss: NodeId) -> Result<Backprop<R>> {
        let end = loss.0 + 1;
        let eval = self.evaluate_upto(bindings, end)?;
        let loss_val = &eval.values[loss.0];
        if loss_val.len() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: loss_val.shape().to_vec(),
            });
        }

        // Which nodes depend on a named leaf (and so need gradients).
        let mut live = vec![false; end];
        for (i, node) in self.nodes[..end].iter().enumerate() {
            live[i] = match node.op {
                Op::Input(_) | Op::Param(_) => true,
                Op::Const(_) => false,
                _ => node.inputs.iter().any(|x| live[x.0]),
            };
        }

        let mut grads: Vec<Option<Tensor<R>>> = vec![None; end];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), R::one()));
        for idx in (0..end).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.inputs.is_empty() {
                grads[idx] = Some(g);
                continue;
            }
            let input_vals: Vec<&Tensor<R>> =
                node.inputs.iter().map(|i| &eval.values[i.0]).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| live[i.0]).collect();
            let in_grads = backward(node, &input_vals, &eval.values[idx], &g, &needs);
            for ((inp, gi), need) in node.inputs.iter().zip(in_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        let mut gradients = BTreeMap::new();
        for (name, &id) in &self.leaves {
            let g = if id.0 < end {
                grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(eval.values[id.0].shape()))
            } else {
                match bindings.get(name) {
                    Some(t) => Tensor::zeros(t.shape()),
                    None => continue,
                }
            };
            gradients.insert(name.clone(), g);
        }
        Ok(Backprop {
            loss: loss_val.item(),
            gradients,
        })
    }
}

/// Values of every node after a forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation<R = f64> {
    values: Vec<Tensor<R>>,
    outputs: BTreeMap<String, NodeId>,
}

impl<R: Real> Evaluation<R> {
    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.values[id.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor<R>> {
        self.outputs.get(name).map(|id| &self.values[id.0])
    }

    /// All marked outputs by name.
    pub fn outputs(&self) -> BTreeMap<String, Tensor<R>> {
        self.outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.values[id.0].clone()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backprop<R = f64> {
    pub loss: R,
    pub gradients: BTreeMap<String, Tensor<R>>,
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Trailing,
}

fn bcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b.iter().product::<usize>() == 1 && b.len() <= a.len() {
        Some(Bcast::Scalar)
    } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Some(Bcast::Trailing)
    } else {
        None
    }
}

fn mismatch(idx: usize, node: &Node<impl Real>, detail: String) -> Error {
    Error::ShapeMismatch {
        node: idx,
        op: node.op.name(),
        detail,
    }
}

fn binary<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    let bl = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % bl]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Sums a full-size gradient back onto the broadcast operand's shape.
fn unbroadcast<R: Real>(g: Vec<R>, shape: &[usize]) -> Tensor<R> {
    let n: usize = shape.iter().product();
    if n == g.len() {
        return Tensor::new(shape.to_vec(), g).expect("same size");
    }
    let mut out = vec![R::zero(); n];
    for (i, v) in g.into_iter().enumerate() {
        out[i % n] = out[i % n] + v;
    }
    Tensor::new(shape.to_vec(), out).expect("broadcast shape")
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn dropout_keep<R: Real>(len: usize, rate: R, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = rate.to_f64().unwrap_or(0.0);
    (0..len).map(|_| rng.random::<f64>() >= rate).collect()
}

fn forward<R: Real>(
    idx: usize,
    node: &Node<R>,
    values: &[Tensor<R>],
    bindings: &Bindings<R>,
) -> Result<Tensor<R>> {
    let arg = |k: usize| &values[node.inputs[k].0];
    let out = match &node.op {
        Op::Input(name) | Op::Param(name) => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnboundInput(name.clone()))?,
        Op::Const(t) => t.clone(),
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum => {
            let (a, b) = (arg(0), arg(1));
            if bcast_kind(a.shape(), b.shape()).is_none() {
                return Err(mismatch(
                    idx,
                    node,
                    format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()),
                ));
            }
            match node.op {
                Op::Add => binary(a, b, |x, y| x + y),
                Op::Sub => binary(a, b, |x, y| x - y),
                Op::Mul => binary(a, b, |x, y| x * y),
                Op::Div => binary(a, b, |x, y| x / y),
                _ => binary(a, b, |x, y| x.max(y)),
            }
        }
        Op::MatMul { transpose_rhs } => {
            let (a, b) = (arg(0), arg(1));
            if a.rank() != 2 || b.rank() != 2 {
                return Err(mismatch(
                    idx,
                    node,
                    format!("matmul needs matrices, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (bk, n) = if *transpose_rhs {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != bk {
                return Err(mismatch(
                    idx,
                    node,
                    format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let data = gemm(
                a.data(),
                m,
                k,
                false,
                b.data(),
                b.shape()[0],
                b.shape()[1],
                *transpose_rhs,
            );
            Tensor::new(vec![m, n], data)?
        }
        Op::Tanh => arg(0).map(|x| x.tanh()),
        Op::Sigmoid => arg(0).map(sigmoid),
        Op::Relu => arg(0).map(|x| if x > R::zero() { x } else { R::zero() }),
        Op::Exp => arg(0).map(|x| x.exp()),
        Op::Log => arg(0).map(|x| x.ln()),
        Op::Scale(c) => arg(0).map(|x| x * *c),
        Op::Offset(c) => arg(0).map(|x| x + *c),
        Op::Softmax(mask) => {
            let a = arg(0);
            let n = a.cols();
            if let Some(m) = mask {
                if m.len() != n {
                    return Err(mismatch(
                        idx,
                        node,
                        format!("mask length {} for width {}", m.len(), n),
                    ));
                }
                if !m.iter().any(|&v| v) {
                    return Err(mismatch(idx, node, "mask has no valid position".into()));
                }
            }
            let valid = |j: usize| mask.as_ref().is_none_or(|m| m[j]);
            let mut out = vec![R::zero(); a.len()];
            for (r, row) in a.data().chunks(n.max(1)).enumerate() {
                let mut mx = R::neg_infinity();
                for (j, &x) in row.iter().enumerate() {
                    if valid(j) {
                        mx = mx.max(x);
                    }
                }
                let mut s = R::zero();
                for (j, &x) in row.iter().enumerate() {
                    if valid(j) {
                        let e = (x - mx).exp();
                        out[r * n + j] = e;
                        s = s + e;
                    }
                }
                for v in &mut out[r * n..(r + 1) * n] {
                    *v = *v / s;
                }
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Op::Normalize(eps) => {
            let a = arg(0);
            let n = a.cols();
            let nr = R::from_usize(n).unwrap_or_else(R::one);
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(n.max(1)) {
                let mean = row.iter().fold(R::zero(), |s, &x| s + x) / nr;
                let var = row
                    .iter()
                    .fold(R::zero(), |s, &x| s + (x - mean) * (x - mean))
                    / nr;
                let inv = R::one() / (var + *eps).sqrt();
                out.extend(row.iter().map(|&x| (x - mean) * inv));
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        Op::Concat(axis) => {
            let first = arg(0);
            let rank = first.rank();
            if *axis >= rank {
                return Err(mismatch(idx, node, format!("axis {} for rank {}", axis, rank)));
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = 0;
            for k in 0..node.inputs.len() {
                let s = arg(k).shape();
                let ok = s.len() == rank
                    && s.iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(d, (x, y))| d == *axis || x == y);
                if !ok {
                    return Err(mismatch(
                        idx,
                        node,
                        format!("cannot concat {:?} with {:?} on axis {}", s, first.shape(), axis),
                    ));
                }
                shape[*axis] += s[*axis];
            }
            let outer: usize = shape[..*axis].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for k in 0..node.inputs.len() {
                    let t = arg(k);
                    let chunk = t.len() / outer.max(1);
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        }
        Op::Slice { axis, start, end } => {
            let a = arg(0);
            if *axis >= a.rank() || start > end || *end > a.shape()[*axis] {
                return Err(mismatch(
                    idx,
                    node,
                    format!("slice {}..{} on axis {} of {:?}", start, end, axis, a.shape()),
                ));
            }
            let (outer, len, inner) = axis_split(a.shape(), *axis);
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, data)?
        }
        Op::ReduceSum => Tensor::scalar(arg(0).sum()),
        Op::ReduceMean => {
            let a = arg(0);
            if a.is_empty() {
                return Err(mismatch(idx, node, "mean of empty tensor".into()));
            }
            Tensor::scalar(a.sum() / R::from_usize(a.len()).unwrap_or_else(R::one))
        }
        Op::SumRows => {
            let a = arg(0);
            if a.rank() != 2 {
                return Err(mismatch(idx, node, format!("expected matrix, got {:?}", a.shape())));
            }
            let n = a.cols();
            let mut out = vec![R::zero(); n];
            for row in a.data().chunks(n.max(1)) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = *o + x;
                }
            }
            Tensor::vector(out)
        }
        Op::Reshape(shape) => arg(0)
            .clone()
            .reshaped(shape)
            .map_err(|e| mismatch(idx, node, e.to_string()))?,
        Op::Dropout { rate, seed } => {
            let a = arg(0);
            let keep = dropout_keep(a.len(), *rate, *seed);
            let scale = R::one() / (R::one() - *rate);
            let data = a
                .data()
                .iter()
                .zip(keep)
                .map(|(&x, k)| if k { x * scale } else { R::zero() })
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
    };
    Ok(out)
}

/// Vector-Jacobian products for one node. Entries are `None` where the
/// caller said no gradient is needed.
fn backward<R: Real>(
    node: &Node<R>,
    inputs: &[&Tensor<R>],
    out: &Tensor<R>,
    g: &Tensor<R>,
    needs: &[bool],
) -> Vec<Option<Tensor<R>>> {
    let gd = g.data();
    let same = |t: &Tensor<R>, data: Vec<R>| Tensor::new(t.shape().to_vec(), data).expect("shape");
    let unary = |f: &dyn Fn(usize) -> R| -> Vec<Option<Tensor<R>>> {
        let data = (0..gd.len()).map(f).collect();
        vec![Some(same(inputs[0], data))]
    };
    match &node.op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => Vec::new(),
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum => {
            let (a, b) = (inputs[0], inputs[1]);
            let bl = b.len();
            let bv = |i: usize| b.data()[i % bl];
            let av = |i: usize| a.data()[i];
            let n = gd.len();
            let (ga, gb): (Vec<R>, Vec<R>) = match node.op {
                Op::Add => (gd.to_vec(), gd.to_vec()),
                Op::Sub => (gd.to_vec(), gd.iter().map(|&x| -x).collect()),
                Op::Mul => (
                    (0..n).map(|i| gd[i] * bv(i)).collect(),
                    (0..n).map(|i| gd[i] * av(i)).collect(),
                ),
                Op::Div => (
                    (0..n).map(|i| gd[i] / bv(i)).collect(),
                    (0..n)
                        .map(|i| -gd[i] * av(i) / (bv(i) * bv(i)))
                        .collect(),
                ),
                _ => (
                    (0..n)
                        .map(|i| if av(i) >= bv(i) { gd[i] } else { R::zero() })
                        .collect(),
                    (0..n)
                        .map(|i| if av(i) >= bv(i) { R::zero() } else { gd[i] })
                        .collect(),
                ),
            };
            vec![
                needs[0].then(|| same(a, ga)),
                needs[1].then(|| unbroadcast(gb, b.shape())),
            ]
        }
        Op::MatMul { transpose_rhs } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (br, bc) = (b.shape()[0], b.shape()[1]);
            let n = g.shape()[1];
            let ga = needs[0].then(|| {
                // C = A B  -> dA = G B^T ;  C = A B^T -> dA = G B
                same(a, gemm(gd, m, n, false, b.data(), br, bc, !*transpose_rhs))
            });
            let gb = needs[1].then(|| {
                if *transpose_rhs {
                    // dB = G^T A
                    same(b, gemm(gd, m, n, true, a.data(), m, k, false))
                } else {
                    // dB = A^T G
                    same(b, gemm(a.data(), m, k, true, gd, m, n, false))
                }
            });
            vec![ga, gb]
        }
        Op::Tanh => unary(&|i| {
            let y = out.data()[i];
            gd[i] * (R::one() - y * y)
        }),
        Op::Sigmoid => unary(&|i| {
            let y = out.data()[i];
            gd[i] * y * (R::one() - y)
        }),
        Op::Relu => unary(&|i| {
            if inputs[0].data()[i] > R::zero() {
                gd[i]
            } else {
                R::zero()
            }
        }),
        Op::Exp => unary(&|i| gd[i] * out.data()[i]),
        Op::Log => unary(&|i| gd[i] / inputs[0].data()[i]),
        Op::Scale(c) => unary(&|i| gd[i] * *c),
        Op::Offset(_) => vec![Some(g.clone())],
        Op::Dropout { rate, seed } => {
            let keep = dropout_keep(gd.len(), *rate, *seed);
            let scale = R::one() / (R::one() - *rate);
            unary(&|i| if keep[i] { gd[i] * scale } else { R::zero() })
        }
        Op::Softmax(_) => {
            let n = out.cols().max(1);
            let y = out.data();
            let mut dx = vec![R::zero(); y.len()];
            for r in 0..y.len() / n {
                let row = r * n..(r + 1) * n;
                let dot = y[row.clone()]
                    .iter()
                    .zip(&gd[row.clone()])
                    .fold(R::zero(), |s, (&a, &b)| s + a * b);
                for j in row {
                    dx[j] = y[j] * (gd[j] - dot);
                }
            }
            vec![Some(same(inputs[0], dx))]
        }
        Op::Normalize(eps) => {
            let x = inputs[0];
            let n = x.cols().max(1);
            let nr = R::from_usize(n).unwrap_or_else(R::one);
            let y = out.data();
            let mut dx = vec![R::zero(); y.len()];
            for r in 0..y.len() / n {
                let row = r * n..(r + 1) * n;
                let xs = &x.data()[row.clone()];
                let mean = xs.iter().fold(R::zero(), |s, &v| s + v) / nr;
                let var = xs
                    .iter()
                    .fold(R::zero(), |s, &v| s + (v - mean) * (v - mean))
                    / nr;
                let inv = R::one() / (var + *eps).sqrt();
                let gm = gd[row.clone()].iter().fold(R::zero(), |s, &v| s + v) / nr;
                let gy = y[row.clone()]
                    .iter()
                    .zip(&gd[row.clone()])
                    .fold(R::zero(), |s, (&a, &b)| s + a * b)
                    / nr;
                for j in row {
                    dx[j] = inv * (gd[j] - gm - y[j] * gy);
                }
            }
            vec![Some(same(x, dx))]
        }
        Op::Concat(axis) => {
            let outer: usize = g.shape()[..*axis].iter().product();
            let mut offset = 0;
            let total = gd.len() / outer.max(1);
            let mut res = Vec::with_capacity(inputs.len());
            for (k, t) in inputs.iter().enumerate() {
                let chunk = t.len() / outer.max(1);
                if needs[k] {
                    let mut data = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = o * total + offset;
                        data.extend_from_slice(&gd[base..base + chunk]);
                    }
                    res.push(Some(same(t, data)));
                } else {
                    res.push(None);
                }
                offset += chunk;
            }
            res
        }
        Op::Slice { axis, start, end } => {
            let a = inputs[0];
            let (outer, len, inner) = axis_split(a.shape(), *axis);
            let mut dx = vec![R::zero(); a.len()];
            let w = (end - start) * inner;
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                dx[base..base + w].copy_from_slice(&gd[o * w..(o + 1) * w]);
            }
            vec![Some(same(a, dx))]
        }
        Op::ReduceSum => vec![Some(Tensor::full(inputs[0].shape(), gd[0]))],
        Op::ReduceMean => {
            let n = R::from_usize(inputs[0].len()).unwrap_or_else(R::one);
            vec![Some(Tensor::full(inputs[0].shape(), gd[0] / n))]
        }
        Op::SumRows => {
            let a = inputs[0];
            let n = a.cols().max(1);
            let data = (0..a.len()).map(|i| gd[i % n]).collect();
            vec![Some(same(a, data))]
        }
        Op::Reshape(_) => vec![Some(same(inputs[0], gd.to_vec()))],
    }
}
