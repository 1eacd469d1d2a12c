//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate value. Operations append nodes and
//! return [`Var`] handles, so the tape is acyclic by construction. Each
//! vector-Jacobian product is itself written with graph operations, which
//! makes gradients differentiable: [`Graph::grad`] with `create_graph = true`
//! returns gradient nodes that can be fed into a second backward pass.
//!
//! ```
//! use robusta_core::autodiff::Graph;
//! use robusta_core::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(grads.get(x).unwrap()).data(), &[6.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Result};
use crate::real::Real;
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv { x: Var, k: Var, geom: ConvGeom },
    ConvInputGrad { gy: Var, k: Var, geom: ConvGeom },
    ConvWeightGrad { x: Var, gy: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    ChannelSum(Var),
    ChannelBroadcast(Var),
    AvgPool { x: Var, size: usize },
    AvgPoolGrad { g: Var, size: usize },
    Relu(Var),
    /// `g * [gate > 0]`; the gate is not differentiated.
    Gate { g: Var, gate: Var },
    Abs(Var),
    /// `g * sign(x)`; `x` is not differentiated.
    SignMul { g: Var, x: Var },
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    /// `g * [lo <= x <= hi]`; `x` is not differentiated.
    RangeGate { g: Var, x: Var, lo: f64, hi: f64 },
    LogSoftmax(Var),
    Softmax(Var),
    Reshape(Var),
    SumAll(Var),
    SumTo(Var),
    BroadcastTo(Var),
    MaxAll { x: Var, index: usize },
}

impl Op {
    /// Parents through which gradient flows.
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            Conv { x, k, .. } => [Some(x), Some(k)],
            ConvInputGrad { gy, k, .. } => [Some(gy), Some(k)],
            ConvWeightGrad { x, gy, .. } => [Some(x), Some(gy)],
            ChannelBias { x, b } => [Some(x), Some(b)],
            Neg(a) | Scale(a, _) | AddScalar(a) | ChannelSum(a) | ChannelBroadcast(a) => {
                [Some(a), None]
            }
            AvgPool { x, .. } | Relu(x) | Abs(x) | Exp(x) | Log(x) | Clamp { x, .. } => {
                [Some(x), None]
            }
            AvgPoolGrad { g, .. } | Gate { g, .. } | SignMul { g, .. } | RangeGate { g, .. } => {
                [Some(g), None]
            }
            LogSoftmax(x) | Softmax(x) | Reshape(x) | SumAll(x) | SumTo(x) | BroadcastTo(x) => {
                [Some(x), None]
            }
            MaxAll { x, .. } => [Some(x), None],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape over tensors of element type `T`.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Graph::backward`], indexed by the variable they
/// belong to.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Var> {
        self.grads.get(v.0).copied().flatten()
    }
}

fn keepdim_last(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(last) => *last = 1,
        None => s.push(1),
    }
    s
}

impl<T: Real> Graph<T> {
    /// A recording graph: operations on differentiable inputs keep their
    /// parents so that gradients can be taken.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    /// A graph that never records parents; every result is a constant.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires = self.record
            && op.parents().iter().flatten().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad: requires });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).add(self.val(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).sub(self.val(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).mul(self.val(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).div(self.val(b))?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a).map(|x| -x);
        Ok(self.push(v, Op::Neg(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.val(a).scale(T::cast_from(c))?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::cast_from(c);
        let v = Tensor::checked(
            self.val(a).shape().to_vec(),
            self.val(a).map(|x| x + c).into_data(),
            "add_scalar",
        )?;
        Ok(self.push(v, Op::AddScalar(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = tensor::matmul_t(self.val(a), self.val(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    /// Batched cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err!("conv2d expects [N,C,H,W] and [O,C,kh,kw], got {:?} {:?}", xs, ks));
        }
        let geom = ConvGeom::new([xs[1], xs[2], xs[3]], [ks[0], ks[1], ks[2], ks[3]], stride, padding)?;
        let n = xs[0];
        let v = tensor::kernels_conv(self.val(x), self.val(k), &geom, n)?;
        Ok(self.push(v, Op::Conv { x, k, geom }))
    }

    fn conv_input_grad(&mut self, gy: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let v = tensor::conv2d_input_grad(self.val(gy), self.val(k), &geom)?;
        Ok(self.push(v, Op::ConvInputGrad { gy, k, geom }))
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, geom: ConvGeom) -> Result<Var> {
        let v = tensor::conv2d_weight_grad(self.val(x), self.val(gy), &geom)?;
        Ok(self.push(v, Op::ConvWeightGrad { x, gy, geom }))
    }

    fn conv_geom(&mut self, x: Var, k: Var, geom: ConvGeom) -> Result<Var> {
        let n = self.shape(x)[0];
        let v = tensor::kernels_conv(self.val(x), self.val(k), &geom, n)?;
        Ok(self.push(v, Op::Conv { x, k, geom }))
    }

    /// Adds a per-channel bias `[O]` to an `[N,O,...]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = tensor::channel_bias(self.val(x), self.val(b))?;
        Ok(self.push(v, Op::ChannelBias { x, b }))
    }

    fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let v = tensor::channel_sum(self.val(x))?;
        Ok(self.push(v, Op::ChannelSum(x)))
    }

    fn channel_broadcast(&mut self, b: Var, shape: &[usize]) -> Result<Var> {
        let v = tensor::channel_broadcast(self.val(b), shape)?;
        Ok(self.push(v, Op::ChannelBroadcast(b)))
    }

    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let v = tensor::avg_pool(self.val(x), size)?;
        Ok(self.push(v, Op::AvgPool { x, size }))
    }

    fn avg_pool_grad(&mut self, g: Var, size: usize, shape: &[usize]) -> Result<Var> {
        let v = tensor::avg_pool_grad(self.val(g), size, shape)?;
        Ok(self.push(v, Op::AvgPoolGrad { g, size }))
    }

    /// Rectifier. The derivative at 0 is taken to be 0 and the second
    /// derivative is 0 everywhere.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x).relu();
        Ok(self.push(v, Op::Relu(x)))
    }

    fn gate(&mut self, g: Var, gate: Var) -> Result<Var> {
        let v = self.val(g).zip_same(self.val(gate), |a, s| if s > T::zero() { a } else { T::zero() });
        Ok(self.push(v, Op::Gate { g, gate }))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x).abs();
        Ok(self.push(v, Op::Abs(x)))
    }

    fn sign_mul(&mut self, g: Var, x: Var) -> Result<Var> {
        let v = self.val(g).zip_same(self.val(x), |a, s| {
            if s > T::zero() {
                a
            } else if s < T::zero() {
                -a
            } else {
                T::zero()
            }
        });
        Ok(self.push(v, Op::SignMul { g, x }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x).exp()?;
        Ok(self.push(v, Op::Exp(x)))
    }

    /// Natural logarithm; nonpositive inputs are a domain error, so callers
    /// add their own guard (e.g. `log(p + δ)`).
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x).log()?;
        Ok(self.push(v, Op::Log(x)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(contract_err!("clamp bounds reversed: [{}, {}]", lo, hi));
        }
        let v = self.val(x).clamp(T::cast_from(lo), T::cast_from(hi));
        Ok(self.push(v, Op::Clamp { x, lo, hi }))
    }

    fn range_gate(&mut self, g: Var, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo_t, hi_t) = (T::cast_from(lo), T::cast_from(hi));
        let v = self.val(g).zip_same(self.val(x), |a, s| {
            if s >= lo_t && s <= hi_t {
                a
            } else {
                T::zero()
            }
        });
        Ok(self.push(v, Op::RangeGate { g, x, lo, hi }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = tensor::log_softmax_rows(self.val(x))?;
        Ok(self.push(v, Op::LogSoftmax(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.val(x))?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(x).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).sum();
        let v = Tensor::checked(Vec::new(), vec![s], "sum")?;
        Ok(self.push(v, Op::SumAll(x)))
    }

    /// Reduces by summation to a broadcast-compatible smaller shape.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.val(x).sum_to(shape)?;
        let v = Tensor::checked(v.shape().to_vec(), v.into_data(), "sum_to")?;
        Ok(self.push(v, Op::SumTo(x)))
    }

    /// Row sums over the last axis, keeping it as size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = keepdim_last(self.shape(x));
        self.sum_to(x, &shape)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.val(x).broadcast_to(shape)?;
        Ok(self.push(v, Op::BroadcastTo(x)))
    }

    /// Largest element, as a rank-0 tensor; the gradient goes to the first
    /// maximal entry.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let (index, m) = self.val(x).max()?;
        let v = Tensor::from_parts(Vec::new(), vec![m]);
        Ok(self.push(v, Op::MaxAll { x, index }))
    }

    /// Gradients of a scalar `root` with respect to every differentiable
    /// node. The returned gradients are constants.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let reach: Vec<bool> = self.nodes[..=root.0].iter().map(|n| n.requires_grad).collect();
        let grads = self.run_backward(root, reach, false)?;
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar `root` with respect to `wrt`. With
    /// `create_graph` the gradients are recorded nodes that can be
    /// differentiated again. A target that `root` does not depend on gets a
    /// zero gradient.
    pub fn grad(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let mut reach = vec![false; root.0 + 1];
        for &w in wrt {
            if w.0 <= root.0 && self.nodes[w.0].requires_grad {
                reach[w.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !reach[i] && self.nodes[i].requires_grad {
                reach[i] = self.nodes[i].op.parents().iter().flatten().any(|p| reach[p.0]);
            }
        }
        let grads = self.run_backward(root, reach, create_graph)?;
        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w).to_vec());
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    fn run_backward(
        &mut self,
        root: Var,
        reach: Vec<bool>,
        create_graph: bool,
    ) -> Result<Vec<Option<Var>>> {
        if !self.val(root).is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let saved = self.record;
        self.record = create_graph && saved;
        let result = self.backward_pass(root, &reach);
        self.record = saved;
        result
    }

    fn backward_pass(&mut self, root: Var, reach: &[bool]) -> Result<Vec<Option<Var>>> {
        let mut grads: Vec<Option<Var>> = vec![None; root.0 + 1];
        if !reach[root.0] {
            return Ok(grads);
        }
        let seed = Tensor::ones(self.shape(root).to_vec());
        grads[root.0] = Some(self.constant(seed));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(i, &op, g, reach)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(grads)
    }

    fn vjp(&mut self, node: usize, op: &Op, g: Var, reach: &[bool]) -> Result<Vec<(Var, Var)>> {
        let out = Var(node);
        let need = |v: Var| reach[v.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    let s = self.shape(a).to_vec();
                    res.push((a, self.sum_to(g, &s)?));
                }
                if need(b) {
                    let s = self.shape(b).to_vec();
                    res.push((b, self.sum_to(g, &s)?));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    let s = self.shape(a).to_vec();
                    res.push((a, self.sum_to(g, &s)?));
                }
                if need(b) {
                    let s = self.shape(b).to_vec();
                    let r = self.sum_to(g, &s)?;
                    res.push((b, self.neg(r)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let s = self.shape(a).to_vec();
                    let p = self.mul(g, b)?;
                    res.push((a, self.sum_to(p, &s)?));
                }
                if need(b) {
                    let s = self.shape(b).to_vec();
                    let p = self.mul(g, a)?;
                    res.push((b, self.sum_to(p, &s)?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    let s = self.shape(a).to_vec();
                    let q = self.div(g, b)?;
                    res.push((a, self.sum_to(q, &s)?));
                }
                if need(b) {
                    let s = self.shape(b).to_vec();
                    let q = self.div(out, b)?;
                    let p = self.mul(g, q)?;
                    let r = self.sum_to(p, &s)?;
                    res.push((b, self.neg(r)?));
                }
            }
            Op::Neg(a) => res.push((a, self.neg(g)?)),
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::MatMul { a, b, ta, tb } => {
                if need(a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    res.push((a, ga));
                }
                if need(b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::Conv { x, k, geom } => {
                if need(x) {
                    res.push((x, self.conv_input_grad(g, k, geom)?));
                }
                if need(k) {
                    res.push((k, self.conv_weight_grad(x, g, geom)?));
                }
            }
            Op::ConvInputGrad { gy, k, geom } => {
                if need(gy) {
                    res.push((gy, self.conv_geom(g, k, geom)?));
                }
                if need(k) {
                    res.push((k, self.conv_weight_grad(g, gy, geom)?));
                }
            }
            Op::ConvWeightGrad { x, gy, geom } => {
                if need(x) {
                    res.push((x, self.conv_input_grad(gy, g, geom)?));
                }
                if need(gy) {
                    res.push((gy, self.conv_geom(x, g, geom)?));
                }
            }
            Op::ChannelBias { x, b } => {
                if need(x) {
                    res.push((x, g));
                }
                if need(b) {
                    res.push((b, self.channel_sum(g)?));
                }
            }
            Op::ChannelSum(x) => {
                let s = self.shape(x).to_vec();
                res.push((x, self.channel_broadcast(g, &s)?));
            }
            Op::ChannelBroadcast(b) => res.push((b, self.channel_sum(g)?)),
            Op::AvgPool { x, size } => {
                let s = self.shape(x).to_vec();
                res.push((x, self.avg_pool_grad(g, size, &s)?));
            }
            Op::AvgPoolGrad { g: src, size } => res.push((src, self.avg_pool(g, size)?)),
            Op::Relu(x) => res.push((x, self.gate(g, x)?)),
            Op::Gate { g: src, gate } => res.push((src, self.gate(g, gate)?)),
            Op::Abs(x) => res.push((x, self.sign_mul(g, x)?)),
            Op::SignMul { g: src, x } => res.push((src, self.sign_mul(g, x)?)),
            Op::Exp(x) => res.push((x, self.mul(g, out)?)),
            Op::Log(x) => res.push((x, self.div(g, x)?)),
            Op::Clamp { x, lo, hi } => res.push((x, self.range_gate(g, x, lo, hi)?)),
            Op::RangeGate { g: src, x, lo, hi } => res.push((src, self.range_gate(g, x, lo, hi)?)),
            Op::LogSoftmax(x) => {
                let s = self.shape(x).to_vec();
                let probs = self.exp(out)?;
                let rows = self.sum_last(g)?;
                let rows = self.broadcast_to(rows, &s)?;
                let p = self.mul(probs, rows)?;
                res.push((x, self.sub(g, p)?));
            }
            Op::Softmax(x) => {
                let s = self.shape(x).to_vec();
                let gy = self.mul(g, out)?;
                let rows = self.sum_last(gy)?;
                let rows = self.broadcast_to(rows, &s)?;
                let d = self.sub(g, rows)?;
                res.push((x, self.mul(out, d)?));
            }
            Op::Reshape(x) => {
                let s = self.shape(x).to_vec();
                res.push((x, self.reshape(g, &s)?));
            }
            Op::SumAll(x) | Op::SumTo(x) => {
                let s = self.shape(x).to_vec();
                res.push((x, self.broadcast_to(g, &s)?));
            }
            Op::BroadcastTo(x) => {
                let s = self.shape(x).to_vec();
                res.push((x, self.sum_to(g, &s)?));
            }
            Op::MaxAll { x, index } => {
                let s = self.shape(x).to_vec();
                let mut hot = Tensor::<T>::zeros(s.clone()).into_data();
                hot[index] = T::one();
                let hot = self.constant(Tensor::from_parts(s.clone(), hot));
                let gb = self.broadcast_to(g, &s)?;
                res.push((x, self.mul(gb, hot)?));
            }
        }
        res.retain(|(p, _)| need(*p));
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(scalar_of(&g, grads.get(x).unwrap()), 6.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(g.value(gr.get(x).unwrap()).data(), &[0.0, 0.0, 1.0]);
    }

    /// f(x) = Σ x³ gives ∇f = 3x², so g = ‖∇f‖² = 9 Σ x⁴ and ∇g = 36 x³.
    #[test]
    fn gradient_of_gradient_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -0.5, 2.0]));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let f = g.sum(x3).unwrap();
        let gf = g.grad(f, &[x], true).unwrap()[0];
        let sq = g.mul(gf, gf).unwrap();
        let gnorm = g.sum(sq).unwrap();
        let gg = g.grad(gnorm, &[x], false).unwrap()[0];
        let got = g.value(gg).data().to_vec();
        for (v, want) in got.iter().zip([1.0f64, -0.5, 2.0].map(|x| 36.0 * x * x * x)) {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn gradient_of_gradient_at_one() {
        // g(x) = ||∇ Σx³||² = 9x⁴ in one dimension; dg/dx at 1 is 36.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let gf = g.grad(x3, &[x], true).unwrap()[0];
        let sq = g.mul(gf, gf).unwrap();
        let gg = g.grad(sq, &[x], false).unwrap()[0];
        assert!((scalar_of(&g, gg) - 36.0).abs() < 1e-12);

        let norm = |x: f64| 9.0 * x.powi(4);
        let h = 1e-5;
        let fd = (norm(1.0 + h) - norm(1.0 - h)) / (2.0 * h);
        assert!((fd - 36.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let ashape = if ta { [3, 4] } else { [4, 3] };
            let bshape = if tb { [5, 3] } else { [3, 5] };
            let f = |a: &[f64], b: &[f64]| -> f64 {
                let mut g = Graph::<f64>::inference();
                let a = g.constant(t(&ashape, a));
                let b = g.constant(t(&bshape, b));
                let c = g.matmul_t(a, b, ta, tb).unwrap();
                let c2 = g.mul(c, c).unwrap();
                let s = g.sum(c2).unwrap();
                g.value(s).item().unwrap()
            };
            let mut g = Graph::<f64>::new();
            let a = g.param(t(&ashape, &a0));
            let b = g.param(t(&bshape, &b0));
            let c = g.matmul_t(a, b, ta, tb).unwrap();
            let c2 = g.mul(c, c).unwrap();
            let s = g.sum(c2).unwrap();
            let gr = g.backward(s).unwrap();
            let ga = g.value(gr.get(a).unwrap()).data().to_vec();
            let h = 1e-6;
            for i in 0..a0.len() {
                let mut p = a0.clone();
                p[i] += h;
                let mut m = a0.clone();
                m[i] -= h;
                let fd = (f(&p, &b0) - f(&m, &b0)) / (2.0 * h);
                assert!((fd - ga[i]).abs() < 1e-6, "ta={ta} tb={tb} i={i}");
            }
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.param(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
            let w = g.constant(t(&[3], &[1.0, 2.0, -1.0]));
            let y = g.mul(x, w).unwrap();
            let z = g.log_softmax(y).unwrap();
            let s = g.sum(z).unwrap();
            let gr = g.backward(s).unwrap();
            g.value(gr.get(x).unwrap()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f64>::inference();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn unrelated_target_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(5.0));
        let z = g.mul(x, x).unwrap();
        let gr = g.grad(z, &[y], false).unwrap();
        assert_eq!(g.value(gr[0]).data(), &[0.0]);
    }
}
