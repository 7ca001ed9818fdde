//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to it in creation order, so the
//! node list is always topologically sorted and backward is a single reverse
//! sweep. Leaves are inserted with [`Graph::constant`] or [`Graph::variable`];
//! every other node is produced by [`Graph::apply`] or one of its typed
//! wrappers.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XblError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Operation kinds with their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// inputs: x (n,c,h,w), weight (o,c,kh,kw), bias (o)
    Conv2d { stride: usize, padding: usize },
    /// inputs: x (n,i), weight (o,i), bias (o)
    Dense,
    /// inputs: a (n,i), b (i,o)
    MatMul,
    Relu,
    /// Non-overlapping window of `size`×`size`.
    MaxPool2d { size: usize },
    /// (n,c,h,w) -> (n,c)
    AvgPool2dGlobal,
    /// Along the last axis.
    Softmax,
    Mul,
    Sub,
    Add,
    Div,
    Square,
    /// Sum of all elements, shape [1].
    Sum,
    /// Sum over one axis, removing it.
    SumAxis { axis: usize },
    /// Max over one axis, removing it. Gradient goes to the first maximum.
    MaxAxis { axis: usize },
    Mean,
    Sqrt,
    /// Natural log of `max(x, floor)`; zero gradient where clamped.
    Log { floor: f64 },
    Scale { factor: f64 },
    AddScalar { value: f64 },
    /// Inverted dropout. Identity when the graph is in evaluation mode.
    Dropout { p: f64 },
    /// (n,c,h,w) -> (n,c,height,width), half-pixel centers, align-corners false.
    UpsampleBilinear { height: usize, width: usize },
    /// `max(x, scalar)`; zero gradient at ties.
    MaxWithScalar { scalar: f64 },
    Reshape { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Dense => "dense",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2dGlobal => "avg_pool2d_global",
            Op::Softmax => "softmax",
            Op::Mul => "elementwise_mul",
            Op::Sub => "elementwise_sub",
            Op::Add => "elementwise_add",
            Op::Div => "elementwise_div",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Mean => "mean",
            Op::Sqrt => "sqrt",
            Op::Log { .. } => "log",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Dropout { .. } => "dropout",
            Op::UpsampleBilinear { .. } => "upsample_bilinear",
            Op::MaxWithScalar { .. } => "max_with_scalar",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Conv2d { .. } | Op::Dense => 3,
            Op::MatMul | Op::Mul | Op::Sub | Op::Add | Op::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Aux<F> {
    None,
    Indices(Vec<usize>),
    Mask(Vec<F>),
}

#[derive(Clone, Debug)]
struct Node<F> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor<F>,
    aux: Aux<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real> {
    id: u64,
    nodes: Vec<Node<F>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    /// A graph in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A graph in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it is differentiable when `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value: tensor,
            aux: Aux::None,
            needs_grad,
        })
    }

    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn variable(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Makes an existing node receive a gradient in subsequent backward
    /// passes. Only consumers created after this call propagate to it.
    pub fn require_grad(&mut self, v: Var) -> Result<()> {
        let i = self.check(v)?;
        self.nodes[i].needs_grad = true;
        self.nodes[i].value.set_requires_grad(true);
        Ok(())
    }

    fn push(&mut self, node: Node<F>) -> Var {
        self.nodes.push(node);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(XblError::Graph(format!(
                "node {} does not belong to this graph",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient from the most recent backward pass, if the node took part in it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.value(v).grad()
    }

    /// Discrete choices made by the piecewise operations in the current
    /// values: ReLU, sqrt and clipped-log gates, scalar-max gates, and the
    /// winning index of every pooling window or axis maximum. Two
    /// evaluations with equal branches lie on the same smooth piece.
    pub fn branches(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let Some(op) = &node.op else { continue };
            let x = || self.nodes[node.inputs[0]].value.data();
            match op {
                Op::Relu | Op::Sqrt => out.extend(x().iter().map(|&v| usize::from(v > F::zero()))),
                Op::Log { floor } => {
                    let f = F::of(*floor);
                    out.extend(x().iter().map(|&v| usize::from(v > f)));
                }
                Op::MaxWithScalar { scalar } => {
                    let c = F::of(*scalar);
                    out.extend(x().iter().map(|&v| usize::from(v > c)));
                }
                Op::MaxPool2d { .. } | Op::MaxAxis { .. } => {
                    if let Aux::Indices(idx) = &node.aux {
                        out.extend_from_slice(idx);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Records `op` applied to `inputs` and returns the output node.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(XblError::Contract(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        if let Op::Dropout { p } = op {
            if !(0.0..1.0).contains(&p) {
                return Err(XblError::range("dropout probability", p, "[0, 1)"));
            }
            if !self.training || p == 0.0 {
                return Ok(inputs[0]);
            }
        }
        let mut aux = Aux::None;
        if let Op::Dropout { p } = op {
            let keep = F::of(1.0 / (1.0 - p));
            let n = self.nodes[idx[0]].value.numel();
            let rng = &mut self.rng;
            aux = Aux::Mask(
                (0..n)
                    .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
                    .collect(),
            );
        }
        let ins: Vec<&Tensor<F>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = forward(&op, &ins, &mut aux)?;
        let needs_grad = idx.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(Node {
            op: Some(op),
            inputs: idx,
            value,
            aux,
            needs_grad,
        }))
    }

    /// Overwrites the data of a leaf node. Call [`Graph::recompute`] afterwards.
    pub fn set_leaf_data(&mut self, v: Var, data: &[F]) -> Result<()> {
        let i = self.check(v)?;
        let node = &mut self.nodes[i];
        if node.op.is_some() {
            return Err(XblError::Contract("only leaves can be overwritten".into()));
        }
        if data.len() != node.value.numel() {
            return Err(XblError::dim(
                "set_leaf_data",
                format!("{} values for shape {:?}", data.len(), node.value.shape()),
            ));
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Re-evaluates every operation node from the current leaf values.
    /// Dropout masks are kept.
    pub fn recompute(&mut self) -> Result<()> {
        self.recompute_from(0)
    }

    fn recompute_from(&mut self, start: usize) -> Result<()> {
        for i in start..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(op) = node.op.as_ref() else { continue };
            let ins: Vec<&Tensor<F>> = node.inputs.iter().map(|&j| &before[j].value).collect();
            let mut value = forward(op, &ins, &mut node.aux)?;
            value.set_requires_grad(node.value.requires_grad());
            node.value = value;
        }
        Ok(())
    }

    /// Populates the gradient slot of every node that depends on a
    /// differentiable leaf with d(loss)/d(node). Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(XblError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        if !self.nodes[root].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; root + 1];
        grads[root] = Some(vec![F::one()]);
        for i in (0..=root).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let want: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].needs_grad)
                    .collect();
                let ins: Vec<&Tensor<F>> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let input_grads = backward_op(op, &ins, &node.value, &node.aux, &dy, &want);
                for ((&j, g), w) in node.inputs.iter().zip(input_grads).zip(want) {
                    let Some(g) = g else { continue };
                    debug_assert!(w);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(XblError::Numeric { op: op.name() });
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
            self.nodes[i].value.set_grad(Some(dy));
        }
        Ok(())
    }

    // ---- typed wrappers -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Op::Dense, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Op::MaxPool2d { size }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::AvgPool2dGlobal, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Square, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::SumAxis { axis }, &[x])
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MaxAxis { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[x])
    }

    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.apply(Op::Log { floor }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Result<Var> {
        self.apply(Op::AddScalar { value }, &[x])
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.apply(Op::Dropout { p }, &[x])
    }

    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        self.apply(Op::UpsampleBilinear { height, width }, &[x])
    }

    pub fn max_with_scalar(&mut self, x: Var, scalar: f64) -> Result<Var> {
        self.apply(Op::MaxWithScalar { scalar }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.into() }, &[x])
    }
}

// ---- forward ------------------------------------------------------------

fn shapes_of<F: Real>(ins: &[&Tensor<F>]) -> String {
    ins.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" vs ")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn unary<F: Real>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Vec<F> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn forward<F: Real>(op: &Op, ins: &[&Tensor<F>], aux: &mut Aux<F>) -> Result<Tensor<F>> {
    let name = op.name();
    let bad = || XblError::dim(name, shapes_of(ins));
    let x = ins[0];
    let out = match op {
        Op::Conv2d { stride, padding } => {
            let (xs, ws, bs) = (x.shape(), ins[1].shape(), ins[2].shape());
            if xs.len() != 4 || ws.len() != 4 || bs != [ws[0]] || ws[1] != xs[1] || *stride == 0 {
                return Err(bad());
            }
            if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
                return Err(bad());
            }
            let g = ConvGeom {
                n: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                o: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride: *stride,
                pad: *padding,
            };
            let data = kernels::conv2d_forward(&g, x.data(), ins[1].data(), ins[2].data());
            Tensor::new([g.n, g.o, g.out_h(), g.out_w()], data)?
        }
        Op::Dense => {
            let (xs, ws, bs) = (x.shape(), ins[1].shape(), ins[2].shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
                return Err(bad());
            }
            let (n, i, o) = (xs[0], xs[1], ws[0]);
            let mut data = kernels::matmul_bt(x.data(), ins[1].data(), n, i, o);
            for row in data.chunks_mut(o) {
                row.iter_mut().zip(ins[2].data()).for_each(|(y, &b)| *y += b);
            }
            Tensor::new([n, o], data)?
        }
        Op::MatMul => {
            let (a, b) = (x.shape(), ins[1].shape());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(bad());
            }
            let data = kernels::matmul(x.data(), ins[1].data(), a[0], a[1], b[1]);
            Tensor::new([a[0], b[1]], data)?
        }
        Op::Relu => Tensor::new(x.shape(), unary(x, |v| v.max(F::zero())))?,
        Op::MaxPool2d { size } => {
            let s = x.shape();
            if s.len() != 4 || *size == 0 || s[2] < *size || s[3] < *size {
                return Err(bad());
            }
            let (data, idx) =
                kernels::max_pool_forward(x.data(), s[0] * s[1], (s[2], s[3]), *size);
            *aux = Aux::Indices(idx);
            Tensor::new([s[0], s[1], s[2] / size, s[3] / size], data)?
        }
        Op::AvgPool2dGlobal => {
            let s = x.shape();
            if s.len() != 4 {
                return Err(bad());
            }
            let plane = s[2] * s[3];
            let inv = F::of(1.0 / plane as f64);
            let data = x
                .data()
                .chunks(plane)
                .map(|c| c.iter().copied().sum::<F>() * inv)
                .collect();
            Tensor::new([s[0], s[1]], data)?
        }
        Op::Softmax => {
            let last = *x.shape().last().unwrap();
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(last) {
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let start = data.len();
                data.extend(row.iter().map(|&v| (v - m).exp()));
                let z: F = data[start..].iter().copied().sum();
                data[start..].iter_mut().for_each(|v| *v = *v / z);
            }
            Tensor::new(x.shape(), data)?
        }
        Op::Mul | Op::Sub | Op::Add | Op::Div => {
            let (a, b) = (x, ins[1]);
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(bad)?;
            let numel: usize = shape.iter().product();
            let mut data = vec![F::zero(); numel];
            let (ad, bd) = (a.data(), b.data());
            let f: fn(F, F) -> F = match op {
                Op::Mul => |p, q| p * q,
                Op::Sub => |p, q| p - q,
                Op::Add => |p, q| p + q,
                _ => |p, q| p / q,
            };
            if a.shape() == b.shape() {
                data.iter_mut()
                    .zip(ad.iter().zip(bd))
                    .for_each(|(o, (&p, &q))| *o = f(p, q));
            } else {
                for_each_broadcast(&shape, a.shape(), b.shape(), |o, i, j| {
                    data[o] = f(ad[i], bd[j])
                });
            }
            Tensor::new(shape, data)?
        }
        Op::Square => Tensor::new(x.shape(), unary(x, |v| v * v))?,
        Op::Sum => Tensor::scalar(x.data().iter().copied().sum()),
        Op::Mean => {
            Tensor::scalar(x.data().iter().copied().sum::<F>() / F::of(x.numel() as f64))
        }
        Op::SumAxis { axis } | Op::MaxAxis { axis } => {
            if *axis >= x.shape().len() {
                return Err(bad());
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let d = x.data();
            let mut data = vec![F::zero(); outer * inner];
            if matches!(op, Op::SumAxis { .. }) {
                for o in 0..outer {
                    for l in 0..len {
                        let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        data[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            } else {
                let mut idx = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let k = (o * len + l) * inner + i;
                            if d[k] > d[best] {
                                best = k;
                            }
                        }
                        data[o * inner + i] = d[best];
                        idx[o * inner + i] = best;
                    }
                }
                *aux = Aux::Indices(idx);
            }
            Tensor::new(reduced_shape(x.shape(), *axis), data)?
        }
        Op::Sqrt => Tensor::new(x.shape(), unary(x, |v| v.sqrt()))?,
        Op::Log { floor } => {
            let fl = F::of(*floor);
            Tensor::new(x.shape(), unary(x, |v| v.max(fl).ln()))?
        }
        Op::Scale { factor } => {
            let c = F::of(*factor);
            Tensor::new(x.shape(), unary(x, |v| v * c))?
        }
        Op::AddScalar { value } => {
            let c = F::of(*value);
            Tensor::new(x.shape(), unary(x, |v| v + c))?
        }
        Op::Dropout { .. } => {
            let Aux::Mask(mask) = aux else {
                return Err(XblError::Graph("dropout node without mask".into()));
            };
            let data = x.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
            Tensor::new(x.shape(), data)?
        }
        Op::UpsampleBilinear { height, width } => {
            let s = x.shape();
            if s.len() != 4 || *height == 0 || *width == 0 {
                return Err(bad());
            }
            let data = kernels::upsample_forward(
                x.data(),
                s[0] * s[1],
                (s[2], s[3]),
                (*height, *width),
            );
            Tensor::new([s[0], s[1], *height, *width], data)?
        }
        Op::MaxWithScalar { scalar } => {
            let c = F::of(*scalar);
            Tensor::new(x.shape(), unary(x, |v| v.max(c)))?
        }
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != x.numel() {
                return Err(XblError::dim(
                    name,
                    format!("{:?} -> {shape:?}", x.shape()),
                ));
            }
            Tensor::new(shape.clone(), x.data().to_vec())?
        }
    };
    if !out.is_finite() {
        return Err(XblError::Numeric { op: name });
    }
    Ok(out)
}

// ---- backward -----------------------------------------------------------

fn backward_op<F: Real>(
    op: &Op,
    ins: &[&Tensor<F>],
    out: &Tensor<F>,
    aux: &Aux<F>,
    dy: &[F],
    want: &[bool],
) -> Vec<Option<Vec<F>>> {
    let x = ins[0];
    let elementwise = |f: &dyn Fn(usize) -> F| -> Vec<Option<Vec<F>>> {
        vec![want[0].then(|| (0..dy.len()).map(f).collect())]
    };
    match op {
        Op::Conv2d { stride, padding } => {
            let (xs, ws) = (x.shape(), ins[1].shape());
            let g = ConvGeom {
                n: xs[0],
                c: xs[1],
                h: xs[2],
                w: xs[3],
                o: ws[0],
                kh: ws[2],
                kw: ws[3],
                stride: *stride,
                pad: *padding,
            };
            let r = kernels::conv2d_backward(
                &g,
                x.data(),
                ins[1].data(),
                dy,
                [want[0], want[1], want[2]],
            );
            vec![r.dx, r.dw, r.db]
        }
        Op::Dense => {
            let (n, i, o) = (x.shape()[0], x.shape()[1], ins[1].shape()[0]);
            let dx = want[0].then(|| kernels::matmul(dy, ins[1].data(), n, o, i));
            let dw = want[1].then(|| kernels::matmul_at(dy, x.data(), n, o, i));
            let db = want[2].then(|| {
                let mut db = vec![F::zero(); o];
                for row in dy.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                db
            });
            vec![dx, dw, db]
        }
        Op::MatMul => {
            let (n, i, o) = (x.shape()[0], x.shape()[1], ins[1].shape()[1]);
            let da = want[0].then(|| kernels::matmul_bt(dy, ins[1].data(), n, o, i));
            let db = want[1].then(|| kernels::matmul_at(x.data(), dy, n, i, o));
            vec![da, db]
        }
        Op::Relu => {
            let d = x.data();
            elementwise(&|k| if d[k] > F::zero() { dy[k] } else { F::zero() })
        }
        Op::MaxPool2d { .. } | Op::MaxAxis { .. } => {
            let Aux::Indices(idx) = aux else { unreachable!("pooling keeps indices") };
            vec![want[0].then(|| {
                let mut dx = vec![F::zero(); x.numel()];
                for (&i, &g) in idx.iter().zip(dy) {
                    dx[i] += g;
                }
                dx
            })]
        }
        Op::AvgPool2dGlobal => {
            let s = x.shape();
            let plane = s[2] * s[3];
            let inv = F::of(1.0 / plane as f64);
            vec![want[0].then(|| (0..x.numel()).map(|k| dy[k / plane] * inv).collect())]
        }
        Op::Softmax => {
            let last = *out.shape().last().unwrap();
            vec![want[0].then(|| {
                let mut dx = vec![F::zero(); dy.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(last).zip(out.data().chunks(last)).zip(dy.chunks(last)) {
                    let dot: F = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((d, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                dx
            })]
        }
        Op::Mul | Op::Sub | Op::Add | Op::Div => {
            let (a, b) = (x, ins[1]);
            let (ad, bd) = (a.data(), b.data());
            let mut ga = want[0].then(|| vec![F::zero(); a.numel()]);
            let mut gb = want[1].then(|| vec![F::zero(); b.numel()]);
            let mut step = |o: usize, i: usize, j: usize| {
                let g = dy[o];
                let (da, db) = match op {
                    Op::Mul => (g * bd[j], g * ad[i]),
                    Op::Sub => (g, -g),
                    Op::Add => (g, g),
                    _ => (g / bd[j], -g * ad[i] / (bd[j] * bd[j])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += db;
                }
            };
            if a.shape() == b.shape() {
                (0..dy.len()).for_each(|k| step(k, k, k));
            } else {
                for_each_broadcast(out.shape(), a.shape(), b.shape(), step);
            }
            vec![ga, gb]
        }
        Op::Square => {
            let d = x.data();
            let two = F::of(2.0);
            elementwise(&|k| two * d[k] * dy[k])
        }
        Op::Sum => vec![want[0].then(|| vec![dy[0]; x.numel()])],
        Op::Mean => vec![want[0].then(|| vec![dy[0] / F::of(x.numel() as f64); x.numel()])],
        Op::SumAxis { axis } => {
            let (_, len, inner) = axis_split(x.shape(), *axis);
            vec![want[0].then(|| {
                (0..x.numel())
                    .map(|k| dy[(k / (len * inner)) * inner + k % inner])
                    .collect()
            })]
        }
        Op::Sqrt => {
            let y = out.data();
            let half = F::of(0.5);
            elementwise(&|k| if y[k] > F::zero() { half * dy[k] / y[k] } else { F::zero() })
        }
        Op::Log { floor } => {
            let d = x.data();
            let fl = F::of(*floor);
            elementwise(&|k| if d[k] > fl { dy[k] / d[k] } else { F::zero() })
        }
        Op::Scale { factor } => {
            let c = F::of(*factor);
            elementwise(&|k| dy[k] * c)
        }
        Op::AddScalar { .. } | Op::Reshape { .. } => vec![want[0].then(|| dy.to_vec())],
        Op::Dropout { .. } => {
            let Aux::Mask(mask) = aux else { unreachable!("dropout keeps its mask") };
            elementwise(&|k| dy[k] * mask[k])
        }
        Op::UpsampleBilinear { height, width } => {
            let s = x.shape();
            vec![want[0].then(|| {
                kernels::upsample_backward(dy, s[0] * s[1], (s[2], s[3]), (*height, *width))
            })]
        }
        Op::MaxWithScalar { scalar } => {
            let d = x.data();
            let c = F::of(*scalar);
            elementwise(&|k| if d[k] > c { dy[k] } else { F::zero() })
        }
    }
}

/// Central differences of the scalar `loss` with respect to every element of
/// the leaf `wrt`, with step `epsilon`. The graph is restored afterwards.
pub fn numeric_gradient<F: Real>(
    graph: &mut Graph<F>,
    loss: Var,
    wrt: Var,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(XblError::range("epsilon", epsilon, "> 0"));
    }
    let wi = graph.check(wrt)?;
    let li = graph.check(loss)?;
    if graph.nodes[wi].op.is_some() {
        return Err(XblError::Contract("finite differences need a leaf".into()));
    }
    if graph.nodes[li].value.numel() != 1 {
        return Err(XblError::Contract("finite differences need a scalar loss".into()));
    }
    let original = graph.nodes[wi].value.data().to_vec();
    let eps = F::of(epsilon);
    let mut probe = original.clone();
    let mut out = Vec::with_capacity(original.len());
    for k in 0..original.len() {
        probe[k] = original[k] + eps;
        graph.nodes[wi].value.data_mut().copy_from_slice(&probe);
        graph.recompute_from(wi)?;
        let up = graph.nodes[li].value.data()[0];
        probe[k] = original[k] - eps;
        graph.nodes[wi].value.data_mut().copy_from_slice(&probe);
        graph.recompute_from(wi)?;
        let down = graph.nodes[li].value.data()[0];
        probe[k] = original[k];
        out.push((up.as_f64() - down.as_f64()) / (2.0 * epsilon));
    }
    graph.nodes[wi].value.data_mut().copy_from_slice(&original);
    graph.recompute_from(wi)?;
    Ok(out)
}

/// max |a − n| / max(|a|, |n|, 1e-8) over paired elements.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient of `loss` with respect to the leaf `wrt`
/// against central differences with step `epsilon`. Returns
/// max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check<F: Real>(
    graph: &mut Graph<F>,
    loss: Var,
    wrt: Var,
    epsilon: f64,
) -> Result<f64> {
    let numeric = numeric_gradient(graph, loss, wrt, epsilon)?;
    graph.backward(loss)?;
    let analytic: Vec<f64> = match graph.grad(wrt) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; numeric.len()],
    };
    Ok(max_relative_error(&analytic, &numeric))
}
