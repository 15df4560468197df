//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Backward passes
//! append their vector-Jacobian products to the same graph as ordinary
//! nodes, so a gradient can itself be differentiated. The gradient-penalty
//! critic objective relies on this: the penalty is a function of
//! `d critic / d input`, and its own gradient with respect to the critic
//! weights is needed for training.
//!
//! Node ids are assigned in evaluation order, so id order is a topological
//! order.

mod composite;
pub mod gradcheck;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Conv5};
use crate::tensor::{broadcast_shape, numel, Element, Tensor};

pub use composite::BatchNormSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and padding shared by every spatial axis of a 2-D or 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub spatial: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn five(self) -> Conv5 {
        if self.spatial == 2 {
            Conv5 {
                stride: [1, self.stride, self.stride],
                pad: [0, self.pad, self.pad],
            }
        } else {
            Conv5 {
                stride: [self.stride; 3],
                pad: [self.pad; 3],
            }
        }
    }
}

fn to5(shape: &[usize]) -> [usize; 5] {
    match *shape {
        [a, b, h, w] => [a, b, 1, h, w],
        [a, b, d, h, w] => [a, b, d, h, w],
        _ => unreachable!("validated before use"),
    }
}

fn from5(s: [usize; 5], spatial: usize) -> Vec<usize> {
    if spatial == 2 {
        vec![s[0], s[1], s[3], s[4]]
    } else {
        s.to_vec()
    }
}

fn factor3(f: usize, spatial: usize) -> [usize; 3] {
    if spatial == 2 {
        [1, f, f]
    } else {
        [f; 3]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    BroadcastTo(NodeId),
    SumTo(NodeId),
    Reshape(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv { x: NodeId, w: NodeId, geom: ConvGeom },
    ConvTranspose { g: NodeId, w: NodeId, geom: ConvGeom },
    ConvWeightGrad { x: NodeId, g: NodeId, geom: ConvGeom },
    Upsample { x: NodeId, factor: usize },
    SumPool { x: NodeId, factor: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    PadAxis { x: NodeId, axis: usize, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::BroadcastTo(_) => "broadcast",
            Op::SumTo(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "transposed-conv",
            Op::ConvWeightGrad { .. } => "conv-weight-grad",
            Op::Upsample { .. } => "nearest-upsample",
            Op::SumPool { .. } => "sum-pool",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::PadAxis { .. } => "pad",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Element = f32> {
    by_node: BTreeMap<NodeId, Tensor<T>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(&id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

/// Computation graph over tensors of element type `T`.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    training: bool,
    stochastic: bool,
    rng: ChaCha8Rng,
    first_non_finite: Option<(usize, &'static str)>,
    buffer_updates: BTreeMap<String, Tensor<f32>>,
    frozen: Vec<String>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// Inference-mode graph: dropout is the identity, batch-norm uses running statistics.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            training: false,
            stochastic: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            first_non_finite: None,
            buffer_updates: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Training-mode graph; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// True once any op drew random numbers (active dropout).
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, true)
    }

    /// Named trainable parameter. Binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor<f32>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let id = self.leaf(t.cast(), trainable);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Parameters bound later whose names start with `prefix` become constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    /// Named non-trainable state read by the graph (batch-norm running statistics).
    pub fn buffer(&mut self, t: &Tensor<f32>) -> NodeId {
        self.leaf(t.cast(), false)
    }

    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// Running-statistic updates recorded during a training-mode forward pass.
    pub fn take_buffer_updates(&mut self) -> BTreeMap<String, Tensor<f32>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn record_buffer_update(&mut self, name: String, t: Tensor<f32>) {
        self.buffer_updates.insert(name, t);
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, t)
            .map(|id| {
                self.nodes[id.0].requires_grad = requires_grad;
                id
            })
            .expect("leaves are always accepted")
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Reshape(a) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::ConvTranspose { g, w, .. } => vec![*g, *w],
            Op::ConvWeightGrad { x, g, .. } => vec![*x, *g],
            Op::Upsample { x, .. } | Op::SumPool { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { x, .. } | Op::PadAxis { x, .. } => vec![*x],
        }
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| self.mismatch(op.name(), format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let data = kernels::broadcast_binary(self.value(a).data(), &sa, self.value(b).data(), &sb, &out, f);
        self.push(op, Tensor::from_parts(out, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(T) -> T) -> Result<NodeId> {
        let v = self.value(a).map(f);
        self.push(op, v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = T::of(c);
        self.unary(a, Op::Scale(a, c), move |x| x * k)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = T::of(c);
        self.unary(a, Op::Offset(a), move |x| x + k)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    /// `a * m` where `m` is computed from the current value of `a` and treated as constant.
    fn masked(&mut self, a: NodeId, m: impl Fn(T) -> T) -> Result<NodeId> {
        let mask = self.value(a).map(m);
        let mask = self.constant(mask);
        self.mul(a, mask)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let s = T::of(slope);
        self.masked(a, move |x| if x > T::zero() { T::one() } else { s })
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.masked(a, |x| if x >= T::zero() { T::one() } else { -T::one() })
    }

    /// exp(x) - 1 for x <= 0, identity otherwise.
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        let neg = self.value(a).map(|x| if x > T::zero() { T::zero() } else { T::one() });
        let pos = neg.map(|m| T::one() - m);
        let neg = self.constant(neg);
        let pos = self.constant(pos);
        let e = self.exp(a)?;
        let e = self.offset(e, -1.0)?;
        let e = self.mul(e, neg)?;
        let p = self.mul(a, pos)?;
        self.add(p, e)
    }

    /// Inverted dropout: scales kept units by 1/(1-rate) in training mode, identity otherwise.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(crate::error::invalid("dropout rate must be below 1"));
        }
        self.stochastic = true;
        let keep = T::of(1.0 / (1.0 - rate));
        let shape = self.shape(a).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() >= rate { keep } else { T::zero() });
        let mask = self.constant(mask);
        self.mul(a, mask)
    }

    // ---------------------------------------------------------------------
    // shape

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self
            .value(a)
            .reshape(shape.to_vec())
            .map_err(|e| self.mismatch("reshape", e.to_string()))?;
        self.push(Op::Reshape(a), v)
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa == shape {
            return Ok(a);
        }
        if broadcast_shape(&sa, shape).as_deref() != Some(shape) {
            return Err(self.mismatch("broadcast", format!("{sa:?} does not broadcast to {shape:?}")));
        }
        let data = kernels::broadcast_to(self.value(a).data(), &sa, shape);
        self.push(Op::BroadcastTo(a), Tensor::from_parts(shape.to_vec(), data))
    }

    /// Sum over the axes that `shape` broadcasts along.
    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa == shape {
            return Ok(a);
        }
        if broadcast_shape(shape, &sa).as_deref() != Some(&sa[..]) {
            return Err(self.mismatch("sum", format!("{shape:?} does not broadcast to {sa:?}")));
        }
        let data = kernels::sum_to(self.value(a).data(), &sa, shape);
        self.push(Op::SumTo(a), Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn mean_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let ratio = numel(self.shape(a)) as f64 / numel(shape) as f64;
        let s = self.sum_to(a, shape)?;
        self.scale(s, 1.0 / ratio)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.sum_to(a, &[1])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.mean_to(a, &[1])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(self.mismatch("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            out[axis] += s[axis];
        }
        let views: Vec<(&[T], &[usize])> = parts
            .iter()
            .map(|&p| (self.value(p).data(), self.shape(p)))
            .collect();
        let data = kernels::concat(&views, axis, &out);
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(out, data),
        )
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(self.mismatch("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let data = kernels::slice(self.value(a).data(), &s, axis, start, len);
        let mut out = s;
        out[axis] = len;
        self.push(Op::Slice { x: a, axis, start }, Tensor::from_parts(out, data))
    }

    fn pad_axis(&mut self, a: NodeId, axis: usize, start: usize, total: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let data = kernels::pad_axis(self.value(a).data(), &s, axis, start, total);
        let mut out = s;
        out[axis] = total;
        self.push(Op::PadAxis { x: a, axis, start }, Tensor::from_parts(out, data))
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// `op(a) · op(b)` for 2-D operands, `op` transposing when the flag is set.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch("matmul", format!("operands must be 2-D, got {sa:?} and {sb:?}")));
        }
        let k_a = if ta { sa[0] } else { sa[1] };
        let k_b = if tb { sb[1] } else { sb[0] };
        if k_a != k_b {
            return Err(self.mismatch("matmul", format!("inner extents differ: {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" })));
        }
        let (data, s) = kernels::matmul(self.value(a).data(), [sa[0], sa[1]], self.value(b).data(), [sb[0], sb[1]], ta, tb);
        self.push(Op::MatMul { a, b, ta, tb }, Tensor::from_parts(s.to_vec(), data))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D `(N,C,H,W)` or 3-D `(N,C,D,H,W)` cross-correlation with kernel `(O,C,k..)`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let spatial = sx.len().wrapping_sub(2);
        if !(spatial == 2 || spatial == 3) || sw.len() != sx.len() || sw[1] != sx[1] || stride == 0 {
            return Err(self.mismatch("conv", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        let geom = ConvGeom { spatial, stride, pad };
        let c5 = geom.five();
        let (x5, w5) = (to5(&sx), to5(&sw));
        let mut y5 = [x5[0], w5[0], 0, 0, 0];
        for i in 0..3 {
            y5[2 + i] = kernels::conv_out_len(x5[2 + i], w5[2 + i], c5.stride[i], c5.pad[i])
                .ok_or_else(|| self.mismatch("conv", format!("kernel {sw:?} larger than padded input {sx:?}")))?;
        }
        let data = kernels::conv_forward(self.value(x).data(), x5, self.value(w).data(), w5, y5, c5);
        self.push(Op::Conv { x, w, geom }, Tensor::from_parts(from5(y5, spatial), data))
    }

    /// Transposed convolution producing the given full output shape.
    fn conv_transpose_to(&mut self, g: NodeId, w: NodeId, geom: ConvGeom, out: &[usize]) -> Result<NodeId> {
        let (sg, sw) = (self.shape(g).to_vec(), self.shape(w).to_vec());
        if sg.len() != sw.len() || sg[1] != sw[0] {
            return Err(self.mismatch("transposed-conv", format!("input {sg:?} incompatible with kernel {sw:?}")));
        }
        let data = kernels::conv_transpose(self.value(g).data(), to5(&sg), self.value(w).data(), to5(&sw), to5(out), geom.five());
        self.push(Op::ConvTranspose { g, w, geom }, Tensor::from_parts(out.to_vec(), data))
    }

    /// Transposed convolution (fractionally strided), kernel `(C_in, C_out, k..)`;
    /// output extent per axis is `(in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let spatial = sx.len().wrapping_sub(2);
        if !(spatial == 2 || spatial == 3) || sw.len() != sx.len() || sw[0] != sx[1] || stride == 0 {
            return Err(self.mismatch("transposed-conv", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        let mut out = vec![sx[0], sw[1]];
        for i in 0..spatial {
            let full = (sx[2 + i] - 1) * stride + sw[2 + i];
            if full <= 2 * pad {
                return Err(self.mismatch("transposed-conv", format!("padding {pad} consumes the output")));
            }
            out.push(full - 2 * pad);
        }
        self.conv_transpose_to(x, w, ConvGeom { spatial, stride, pad }, &out)
    }

    fn conv_weight_grad(&mut self, x: NodeId, g: NodeId, geom: ConvGeom, kernel: &[usize]) -> Result<NodeId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        let data = kernels::conv_weight_grad(self.value(x).data(), to5(&sx), self.value(g).data(), to5(&sg), to5(kernel), geom.five());
        self.push(Op::ConvWeightGrad { x, g, geom }, Tensor::from_parts(kernel.to_vec(), data))
    }

    fn spatial_of(&self, op: &'static str, a: NodeId) -> Result<usize> {
        let s = self.shape(a);
        match s.len() {
            4 => Ok(2),
            5 => Ok(3),
            _ => Err(self.mismatch(op, format!("expected (N,C,H,W) or (N,C,D,H,W), got {s:?}"))),
        }
    }

    pub fn upsample(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let spatial = self.spatial_of("nearest-upsample", a)?;
        let (data, s5) = kernels::upsample(self.value(a).data(), to5(self.shape(a)), factor3(factor, spatial));
        self.push(Op::Upsample { x: a, factor }, Tensor::from_parts(from5(s5, spatial), data))
    }

    fn sum_pool(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let spatial = self.spatial_of("average-downsample", a)?;
        let s = self.shape(a).to_vec();
        if s[2..].iter().any(|&d| d % factor != 0) {
            return Err(self.mismatch("average-downsample", format!("{s:?} not divisible by {factor}")));
        }
        let (data, s5) = kernels::sum_pool(self.value(a).data(), to5(&s), factor3(factor, spatial));
        self.push(Op::SumPool { x: a, factor }, Tensor::from_parts(from5(s5, spatial), data))
    }

    /// Area-average downsampling by an integer factor on every spatial axis.
    pub fn avg_downsample(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 1 {
            return Ok(a);
        }
        let spatial = self.spatial_of("average-downsample", a)?;
        let s = self.sum_pool(a, factor)?;
        self.scale(s, 1.0 / (factor.pow(spatial as u32)) as f64)
    }

    // ---------------------------------------------------------------------
    // differentiation

    /// Append the gradient of `sum(output)` with respect to each of `wrt` to
    /// the graph and return the new node ids. Unreachable targets get zeros.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let seed = Tensor::ones(self.shape(output).to_vec());
        let seed = self.constant(seed);
        let mut grads: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let min = wrt.iter().map(|n| n.0).min().unwrap_or(0);
        for i in (min..=output.0).rev() {
            let Some(gy) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, contrib) in self.vjp(NodeId(i), &op, gy)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(*w).to_vec());
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn vjp(&mut self, y: NodeId, op: &Op, gy: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    let s = self.shape(a).to_vec();
                    out.push((a, self.sum_to(gy, &s)?));
                }
                if self.needs(b) {
                    let s = self.shape(b).to_vec();
                    out.push((b, self.sum_to(gy, &s)?));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    let s = self.shape(a).to_vec();
                    out.push((a, self.sum_to(gy, &s)?));
                }
                if self.needs(b) {
                    let s = self.shape(b).to_vec();
                    let n = self.neg(gy)?;
                    out.push((b, self.sum_to(n, &s)?));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let s = self.shape(a).to_vec();
                    let p = self.mul(gy, b)?;
                    out.push((a, self.sum_to(p, &s)?));
                }
                if self.needs(b) {
                    let s = self.shape(b).to_vec();
                    let p = self.mul(gy, a)?;
                    out.push((b, self.sum_to(p, &s)?));
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let s = self.shape(a).to_vec();
                    let p = self.div(gy, b)?;
                    out.push((a, self.sum_to(p, &s)?));
                }
                if self.needs(b) {
                    let s = self.shape(b).to_vec();
                    let p = self.mul(gy, y)?;
                    let p = self.div(p, b)?;
                    let p = self.neg(p)?;
                    out.push((b, self.sum_to(p, &s)?));
                }
            }
            Op::Neg(a) => out.push((a, self.neg(gy)?)),
            Op::Scale(a, c) => out.push((a, self.scale(gy, c)?)),
            Op::Offset(a) => out.push((a, gy)),
            Op::Exp(a) => out.push((a, self.mul(gy, y)?)),
            Op::Log(a) => out.push((a, self.div(gy, a)?)),
            Op::Sqrt(a) => {
                let h = self.scale(gy, 0.5)?;
                out.push((a, self.div(h, y)?));
            }
            Op::Tanh(a) => {
                let y2 = self.mul(y, y)?;
                let d = self.neg(y2)?;
                let d = self.offset(d, 1.0)?;
                out.push((a, self.mul(gy, d)?));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.neg(y)?;
                let one_minus = self.offset(one_minus, 1.0)?;
                let d = self.mul(y, one_minus)?;
                out.push((a, self.mul(gy, d)?));
            }
            Op::BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.sum_to(gy, &s)?));
            }
            Op::SumTo(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.broadcast_to(gy, &s)?));
            }
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.reshape(gy, &s)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                if self.needs(a) {
                    let g = match (ta, tb) {
                        (false, false) => self.matmul_t(gy, b, false, true)?,
                        (false, true) => self.matmul_t(gy, b, false, false)?,
                        (true, false) => self.matmul_t(b, gy, false, true)?,
                        (true, true) => self.matmul_t(b, gy, true, true)?,
                    };
                    out.push((a, g));
                }
                if self.needs(b) {
                    let g = match (ta, tb) {
                        (false, false) => self.matmul_t(a, gy, true, false)?,
                        (false, true) => self.matmul_t(gy, a, true, false)?,
                        (true, false) => self.matmul_t(a, gy, false, false)?,
                        (true, true) => self.matmul_t(gy, a, true, true)?,
                    };
                    out.push((b, g));
                }
            }
            Op::Conv { x, w, geom } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    out.push((x, self.conv_transpose_to(gy, w, geom, &s)?));
                }
                if self.needs(w) {
                    let k = self.shape(w).to_vec();
                    out.push((w, self.conv_weight_grad(x, gy, geom, &k)?));
                }
            }
            Op::ConvTranspose { g, w, geom } => {
                if self.needs(g) {
                    out.push((g, self.conv(gy, w, geom.stride, geom.pad)?));
                }
                if self.needs(w) {
                    let k = self.shape(w).to_vec();
                    out.push((w, self.conv_weight_grad(gy, g, geom, &k)?));
                }
            }
            Op::ConvWeightGrad { x, g, geom } => {
                if self.needs(x) {
                    let s = self.shape(x).to_vec();
                    out.push((x, self.conv_transpose_to(g, gy, geom, &s)?));
                }
                if self.needs(g) {
                    out.push((g, self.conv(x, gy, geom.stride, geom.pad)?));
                }
            }
            Op::Upsample { x, factor, .. } => out.push((x, self.sum_pool(gy, factor)?)),
            Op::SumPool { x, factor, .. } => out.push((x, self.upsample(gy, factor)?)),
            Op::Concat { ref parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if self.needs(p) {
                        out.push((p, self.slice(gy, axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let total = self.shape(x)[axis];
                out.push((x, self.pad_axis(gy, axis, start, total)?));
            }
            Op::PadAxis { x, axis, start } => {
                let len = self.shape(x)[axis];
                out.push((x, self.slice(gy, axis, start, len)?));
            }
        }
        Ok(out)
    }

    /// Differentiate a scalar loss with respect to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(self.mismatch("backward", format!("loss must be a scalar, got shape {:?}", value.shape())));
        }
        let v = value.item();
        if !v.is_finite() {
            let diagnostics = match self.first_non_finite {
                Some((node, op)) => format!("first non-finite value produced by node {node} ({op}); graph has {} nodes", self.nodes.len()),
                None => format!("graph has {} nodes", self.nodes.len()),
            };
            return Err(Error::NonFiniteLoss {
                node: loss.0,
                value: v.as_f64(),
                diagnostics,
            });
        }
        let leaves: Vec<NodeId> = (0..=loss.0)
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(NodeId)
            .collect();
        let ids = self.grad(loss, &leaves)?;
        let mut by_node = BTreeMap::new();
        for (&leaf, &g) in leaves.iter().zip(&ids) {
            by_node.insert(leaf, self.value(g).clone());
        }
        let by_name = self
            .params
            .iter()
            .filter_map(|(name, id)| by_node.get(id).map(|g: &Tensor<T>| (name.clone(), g.clone())))
            .collect();
        Ok(Gradients { by_node, by_name })
    }
}

/// Build a graph with `build`, evaluate the scalar it returns, and differentiate it.
pub fn forward_backward<T: Element>(
    graph: &mut Graph<T>,
    inputs: &[(&str, Tensor<T>)],
    build: impl FnOnce(&mut Graph<T>, &BTreeMap<String, NodeId>) -> Result<NodeId>,
) -> Result<(f64, Gradients<T>)> {
    let mut named = BTreeMap::new();
    for (name, t) in inputs {
        named.insert(name.to_string(), graph.variable(t.clone()));
    }
    let loss = build(graph, &named)?;
    let grads = graph.backward(loss)?;
    let mut grads = grads;
    for (name, id) in &named {
        if let Some(g) = grads.by_node.get(id) {
            grads.by_name.insert(name.clone(), g.clone());
        }
    }
    Ok((graph.value(loss).item().as_f64(), grads))
}
