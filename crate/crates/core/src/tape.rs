//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose parents already live earlier on the tape,
//! so tape order is a topological order. [`Tape::gradients`] walks it backwards
//! with raw tensor kernels. [`Tape::gradients_graph`] instead records the
//! backward pass as new tape nodes, which makes the result differentiable
//! again; this second-order path is available for the op set a critic uses
//! (convolution, dense, resampling, relu, pooling, reductions, add, scale).
//! Relu's second derivative is taken as zero.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::{gemm, Scalar, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    AddBias(NodeId, NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv { x: NodeId, w: NodeId, stride: usize, pad: Padding },
    ConvInputGrad { g: NodeId, w: NodeId, stride: usize, pad: Padding },
    ConvWeightGrad { x: NodeId, g: NodeId, stride: usize, pad: Padding },
    Relu(NodeId),
    ReluMask { g: NodeId, x: NodeId },
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Up2(NodeId),
    Down2(NodeId),
    GlobalAvgPool(NodeId),
    SpreadHw(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    BroadcastTo(NodeId),
    SumPerSample(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    MeanRows(NodeId),
    SubRowVec(NodeId, NodeId),
    SumToLast(NodeId),
    SelectCols { x: NodeId, labels: Arc<Vec<usize>> },
    GatherRows { table: NodeId, labels: Arc<Vec<usize>> },
    ChannelNorm { x: NodeId, inv_std: Vec<T> },
    ChannelNormFixed { x: NodeId, inv_std: Vec<T> },
    AffineSampleChannel { x: NodeId, gamma: NodeId, beta: NodeId },
    SampleNorm { x: NodeId, inv_std: Vec<T> },
    AffineFeature { x: NodeId, scale: NodeId, shift: NodeId },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::Conv { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::Relu(..) => "relu",
            Op::ReluMask { .. } => "relu_mask",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Up2(..) => "upsample2x",
            Op::Down2(..) => "downsample2x",
            Op::GlobalAvgPool(..) => "global_avg_pool_hw",
            Op::SpreadHw(..) => "spread_hw",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumPerSample(..) => "sum_per_sample",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::SubRowVec(..) => "sub_rowvec",
            Op::SumToLast(..) => "sum_to_last",
            Op::SelectCols { .. } => "select_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::ChannelNormFixed { .. } => "channel_norm_fixed",
            Op::AffineSampleChannel { .. } => "affine_sample_channel",
            Op::SampleNorm { .. } => "sample_norm",
            Op::AffineFeature { .. } => "affine_feature",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::SubRowVec(a, b) => {
                vec![a, b]
            }
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Conv { x, w, .. } => vec![x, w],
            Op::ConvInputGrad { g, w, .. } => vec![g, w],
            Op::ConvWeightGrad { x, g, .. } => vec![x, g],
            Op::ReluMask { g, x } => vec![g, x],
            Op::AffineSampleChannel { x, gamma, beta } => vec![x, gamma, beta],
            Op::AffineFeature { x, scale, shift } => vec![x, scale, shift],
            Op::GatherRows { table, .. } => vec![table],
            Op::SelectCols { x, .. }
            | Op::ChannelNorm { x, .. }
            | Op::ChannelNormFixed { x, .. }
            | Op::SampleNorm { x, .. } => vec![x],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Up2(a)
            | Op::Down2(a)
            | Op::GlobalAvgPool(a)
            | Op::SpreadHw(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::BroadcastTo(a)
            | Op::SumPerSample(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::SumToLast(a) => vec![a],
        }
    }
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sign of every relu input recorded so far; two evaluations share a
    /// smooth neighbourhood only if these agree.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = vec![];
        for n in nodes.iter() {
            if let Op::Relu(x) = n.op {
                out.extend(nodes[x].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// A leaf that gradients are tracked for.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    pub fn param_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: NodeId) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Marks nodes lying on a path from any `wrt` node to `upto`.
    fn needed_mask(&self, upto: NodeId, wrt: &[Var<'_, T>]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut needed = vec![false; upto + 1];
        for v in wrt {
            if v.id <= upto {
                needed[v.id] = true;
            }
        }
        for i in 0..=upto {
            if needed[i] || !nodes[i].requires_grad {
                continue;
            }
            needed[i] = nodes[i].op.parents().iter().any(|&p| needed[p]);
        }
        needed
    }

    /// Gradient of a scalar `loss` with respect to each of `wrt`.
    /// Nodes that do not influence the loss get zero gradients.
    pub fn gradients(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let loss_val = self.value_of(loss.id);
        if loss_val.len() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let needed = self.needed_mask(loss.id, wrt);
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut result: Vec<Option<Tensor<T>>> = vec![None; wrt.len()];
        grads[loss.id] = Some(Tensor::ones(loss_val.shape()));
        let nodes = self.nodes.borrow();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !needed[id] {
                continue;
            }
            for (slot, v) in wrt.iter().enumerate() {
                if v.id == id {
                    result[slot] = Some(g.clone());
                }
            }
            for (p, gp) in vjp_raw(&nodes, id, &g, &needed)? {
                match &mut grads[p] {
                    Some(acc) => kernels::add_into(acc, &gp),
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        Ok(result
            .into_iter()
            .zip(wrt)
            .map(|(r, v)| r.unwrap_or_else(|| Tensor::zeros(nodes[v.id].value.shape())))
            .collect())
    }

    /// Gradient of `sum(output)` with respect to each of `wrt`, recorded on
    /// the tape so the result can itself be differentiated.
    pub fn gradients_graph<'t>(
        &'t self,
        output: Var<'t, T>,
        wrt: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        let needed = self.needed_mask(output.id, wrt);
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; output.id + 1];
        let mut result: Vec<Option<Var<'t, T>>> = vec![None; wrt.len()];
        grads[output.id] = Some(self.constant(Tensor::ones(output.value().shape())));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !needed[id] {
                continue;
            }
            for (slot, v) in wrt.iter().enumerate() {
                if v.id == id {
                    result[slot] = Some(g);
                }
            }
            for (p, gp) in self.vjp_graph(id, g, &needed)? {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc.add(gp)?,
                    None => gp,
                });
            }
        }
        Ok(result
            .into_iter()
            .zip(wrt)
            .map(|(r, v)| r.unwrap_or_else(|| self.constant(Tensor::zeros(v.value().shape()))))
            .collect())
    }

    fn vjp_graph<'t>(
        &'t self,
        id: NodeId,
        g: Var<'t, T>,
        needed: &[bool],
    ) -> Result<Vec<(NodeId, Var<'t, T>)>> {
        let (op, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[id].op.clone(), nodes[id].value.shape().to_vec())
        };
        let need = |p: NodeId| needed[p];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, g.mul(self.var(b))?));
                }
                if need(b) {
                    out.push((b, g.mul(self.var(a))?));
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    out.push((a, g.scale(c.f64())));
                }
            }
            Op::AddScalar(a) => {
                if need(a) {
                    out.push((a, g));
                }
            }
            Op::AddBias(x, b) => {
                if need(x) {
                    out.push((x, g));
                }
                if need(b) {
                    out.push((b, g.sum_to_last()));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var(a), self.var(b));
                if need(a) {
                    let ga = if !ta { g.matmul(vb, false, !tb)? } else { vb.matmul(g, tb, true)? };
                    out.push((a, ga));
                }
                if need(b) {
                    let gb = if !tb { va.matmul(g, !ta, false)? } else { g.matmul(va, true, ta)? };
                    out.push((b, gb));
                }
            }
            Op::Conv { x, w, stride, pad } => {
                let (vx, vw) = (self.var(x), self.var(w));
                if need(x) {
                    out.push((x, g.conv2d_input_grad(vw, vx.value().shape(), stride, pad)?));
                }
                if need(w) {
                    out.push((w, vx.conv2d_weight_grad(g, vw.value().shape(), stride, pad)?));
                }
            }
            Op::ConvInputGrad { g: gi, w, stride, pad } => {
                let (vg, vw) = (self.var(gi), self.var(w));
                if need(gi) {
                    out.push((gi, g.conv2d(vw, stride, pad)?));
                }
                if need(w) {
                    out.push((w, g.conv2d_weight_grad(vg, vw.value().shape(), stride, pad)?));
                }
            }
            Op::ConvWeightGrad { x, g: gi, stride, pad } => {
                let (vx, vg) = (self.var(x), self.var(gi));
                if need(x) {
                    out.push((x, vg.conv2d_input_grad(g, vx.value().shape(), stride, pad)?));
                }
                if need(gi) {
                    out.push((gi, vx.conv2d(g, stride, pad)?));
                }
            }
            Op::Relu(x) => {
                if need(x) {
                    out.push((x, g.relu_mask(self.var(x))?));
                }
            }
            Op::ReluMask { g: gi, x } => {
                if need(gi) {
                    out.push((gi, g.relu_mask(self.var(x))?));
                }
            }
            Op::Up2(x) => {
                if need(x) {
                    out.push((x, g.downsample2x()?.scale(4.0)));
                }
            }
            Op::Down2(x) => {
                if need(x) {
                    out.push((x, g.upsample2x()?.scale(0.25)));
                }
            }
            Op::GlobalAvgPool(x) => {
                if need(x) {
                    let xs = self.var(x).value();
                    out.push((x, g.spread_hw(xs.dim(1), xs.dim(2))?));
                }
            }
            Op::SpreadHw(a) => {
                if need(a) {
                    out.push((a, g.global_avg_pool()?));
                }
            }
            Op::SumAll(a) => {
                if need(a) {
                    out.push((a, g.broadcast_to(self.var(a).value().shape())?));
                }
            }
            Op::MeanAll(a) => {
                if need(a) {
                    let n = self.var(a).value().len() as f64;
                    out.push((a, g.broadcast_to(self.var(a).value().shape())?.scale(1.0 / n)));
                }
            }
            Op::BroadcastTo(a) => {
                if need(a) {
                    let s = g.sum_all();
                    out.push((a, s.reshape(self.var(a).value().shape())?));
                }
            }
            Op::Reshape(a) => {
                if need(a) {
                    out.push((a, g.reshape(self.var(a).value().shape())?));
                }
            }
            other => {
                let _ = shape;
                return Err(Error::SecondOrderUnsupported(other.name()));
            }
        }
        Ok(out)
    }
}

fn vjp_raw<T: Scalar>(
    nodes: &[Node<T>],
    id: NodeId,
    g: &Tensor<T>,
    needed: &[bool],
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let node = &nodes[id];
    let val = |p: NodeId| -> &Tensor<T> { &nodes[p].value };
    let need = |p: NodeId| needed[p];
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if need(a) {
                out.push((a, g.clone()));
            }
            if need(b) {
                out.push((b, g.clone()));
            }
        }
        &Op::Sub(a, b) => {
            if need(a) {
                out.push((a, g.clone()));
            }
            if need(b) {
                out.push((b, g.map(|v| -v)));
            }
        }
        &Op::Mul(a, b) => {
            if need(a) {
                out.push((a, kernels::zip_map(g, val(b), |x, y| x * y)));
            }
            if need(b) {
                out.push((b, kernels::zip_map(g, val(a), |x, y| x * y)));
            }
        }
        &Op::Scale(a, c) => {
            if need(a) {
                out.push((a, g.map(|v| v * c)));
            }
        }
        &Op::AddScalar(a) => {
            if need(a) {
                out.push((a, g.clone()));
            }
        }
        &Op::AddBias(x, b) => {
            if need(x) {
                out.push((x, g.clone()));
            }
            if need(b) {
                out.push((b, kernels::sum_to_last(g)));
            }
        }
        &Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (val(a), val(b));
            let (m, n) = (g.dim(0), g.dim(1));
            let k = if ta { va.dim(0) } else { va.dim(1) };
            if need(a) {
                let mut ga = vec![T::zero(); va.len()];
                if !ta {
                    gemm(g.data(), vb.data(), &mut ga, m, n, k, false, !tb, false);
                } else {
                    gemm(vb.data(), g.data(), &mut ga, k, n, m, tb, true, false);
                }
                out.push((a, Tensor::new(va.shape(), ga)?));
            }
            if need(b) {
                let mut gb = vec![T::zero(); vb.len()];
                if !tb {
                    gemm(va.data(), g.data(), &mut gb, k, m, n, !ta, false, false);
                } else {
                    gemm(g.data(), va.data(), &mut gb, n, m, k, true, ta, false);
                }
                out.push((b, Tensor::new(vb.shape(), gb)?));
            }
        }
        &Op::Conv { x, w, stride, pad } => {
            let geom = ConvGeom::new(val(x).shape(), val(w).shape(), stride, pad)?;
            if need(x) {
                let gx = kernels::conv2d_input_grad(g.data(), val(w).data(), &geom);
                out.push((x, Tensor::new(val(x).shape(), gx)?));
            }
            if need(w) {
                let gw = kernels::conv2d_weight_grad(val(x).data(), g.data(), &geom);
                out.push((w, Tensor::new(val(w).shape(), gw)?));
            }
        }
        &Op::ConvInputGrad { g: gi, w, stride, pad } => {
            // node value has the conv input's shape; `g` here is shaped like it.
            let geom = ConvGeom::new(node.value.shape(), val(w).shape(), stride, pad)?;
            if need(gi) {
                let d = kernels::conv2d(g.data(), val(w).data(), &geom);
                out.push((gi, Tensor::new(val(gi).shape(), d)?));
            }
            if need(w) {
                let d = kernels::conv2d_weight_grad(g.data(), val(gi).data(), &geom);
                out.push((w, Tensor::new(val(w).shape(), d)?));
            }
        }
        &Op::ConvWeightGrad { x, g: gi, stride, pad } => {
            let geom = ConvGeom::new(val(x).shape(), node.value.shape(), stride, pad)?;
            if need(x) {
                let d = kernels::conv2d_input_grad(val(gi).data(), g.data(), &geom);
                out.push((x, Tensor::new(val(x).shape(), d)?));
            }
            if need(gi) {
                let d = kernels::conv2d(val(x).data(), g.data(), &geom);
                out.push((gi, Tensor::new(val(gi).shape(), d)?));
            }
        }
        &Op::Relu(x) => {
            if need(x) {
                out.push((x, relu_mask(g, val(x))));
            }
        }
        &Op::ReluMask { g: gi, x } => {
            if need(gi) {
                out.push((gi, relu_mask(g, val(x))));
            }
        }
        &Op::Tanh(x) => {
            if need(x) {
                out.push((x, kernels::zip_map(g, &node.value, |gv, y| gv * (T::one() - y * y))));
            }
        }
        &Op::Exp(x) => {
            if need(x) {
                out.push((x, kernels::zip_map(g, &node.value, |gv, y| gv * y)));
            }
        }
        &Op::Log(x) => {
            if need(x) {
                out.push((x, kernels::zip_map(g, val(x), |gv, xv| gv / xv)));
            }
        }
        &Op::Sqrt(x) => {
            let two = T::of(2.0);
            if need(x) {
                out.push((x, kernels::zip_map(g, &node.value, |gv, y| gv / (two * y))));
            }
        }
        &Op::Square(x) => {
            let two = T::of(2.0);
            if need(x) {
                out.push((x, kernels::zip_map(g, val(x), |gv, xv| two * gv * xv)));
            }
        }
        &Op::Up2(x) => {
            if need(x) {
                out.push((x, kernels::pool2x(g, T::one())?));
            }
        }
        &Op::Down2(x) => {
            if need(x) {
                out.push((x, kernels::upsample2x(g)?.map(|v| v * T::of(0.25))));
            }
        }
        &Op::GlobalAvgPool(x) => {
            if need(x) {
                out.push((x, kernels::spread_hw(g, val(x).dim(1), val(x).dim(2))?));
            }
        }
        &Op::SpreadHw(a) => {
            if need(a) {
                out.push((a, kernels::global_avg_pool(g)?));
            }
        }
        &Op::SumAll(a) => {
            if need(a) {
                out.push((a, Tensor::full(val(a).shape(), g.item())));
            }
        }
        &Op::MeanAll(a) => {
            if need(a) {
                let n = T::of(val(a).len() as f64);
                out.push((a, Tensor::full(val(a).shape(), g.item() / n)));
            }
        }
        &Op::BroadcastTo(a) => {
            if need(a) {
                let s: T = g.data().iter().copied().sum();
                out.push((a, Tensor::full(val(a).shape(), s)));
            }
        }
        &Op::SumPerSample(a) => {
            if need(a) {
                let (rows, cols) = val(a).rows_cols();
                let gd = g.data();
                let d = (0..rows * cols).map(|i| gd[i / cols]).collect();
                out.push((a, Tensor::new(val(a).shape(), d)?));
            }
        }
        &Op::Reshape(a) => {
            if need(a) {
                out.push((a, g.clone().reshape(val(a).shape())?));
            }
        }
        &Op::SoftmaxRows(a) => {
            if need(a) {
                let y = &node.value;
                let c = y.dim(1);
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                out.push((a, Tensor::new(y.shape(), d)?));
            }
        }
        &Op::LogSoftmaxRows(a) => {
            if need(a) {
                let y = &node.value;
                let c = y.dim(1);
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    let gs: T = gr.iter().copied().sum();
                    for k in 0..c {
                        dr[k] = gr[k] - yr[k].exp() * gs;
                    }
                }
                out.push((a, Tensor::new(y.shape(), d)?));
            }
        }
        &Op::MeanRows(a) => {
            if need(a) {
                let (n, c) = (val(a).dim(0), val(a).dim(1));
                let inv = T::one() / T::of(n as f64);
                let gd = g.data();
                let d = (0..n * c).map(|i| gd[i % c] * inv).collect();
                out.push((a, Tensor::new(val(a).shape(), d)?));
            }
        }
        &Op::SubRowVec(x, v) => {
            if need(x) {
                out.push((x, g.clone()));
            }
            if need(v) {
                out.push((v, kernels::sum_to_last(g).map(|q| -q)));
            }
        }
        &Op::SumToLast(a) => {
            if need(a) {
                let c = g.len();
                let gd = g.data();
                let d = (0..val(a).len()).map(|i| gd[i % c]).collect();
                out.push((a, Tensor::new(val(a).shape(), d)?));
            }
        }
        Op::SelectCols { x, labels } => {
            if need(*x) {
                let c = val(*x).dim(1);
                let mut d = vec![T::zero(); val(*x).len()];
                for (n, &l) in labels.iter().enumerate() {
                    d[n * c + l] = g.data()[n];
                }
                out.push((*x, Tensor::new(val(*x).shape(), d)?));
            }
        }
        Op::GatherRows { table, labels } => {
            if need(*table) {
                let c = val(*table).dim(1);
                let mut d = vec![T::zero(); val(*table).len()];
                for (n, &l) in labels.iter().enumerate() {
                    for k in 0..c {
                        d[l * c + k] += g.data()[n * c + k];
                    }
                }
                out.push((*table, Tensor::new(val(*table).shape(), d)?));
            }
        }
        Op::ChannelNorm { x, inv_std } => {
            if need(*x) {
                let c = inv_std.len();
                out.push((*x, normalize_backward(g, &node.value, c, inv_std, false)?));
            }
        }
        Op::ChannelNormFixed { x, inv_std } => {
            if need(*x) {
                let c = inv_std.len();
                let d = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * inv_std[i % c])
                    .collect();
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
        }
        Op::SampleNorm { x, inv_std } => {
            if need(*x) {
                let (_, cols) = g.rows_cols();
                out.push((*x, normalize_backward(g, &node.value, cols, inv_std, true)?));
            }
        }
        &Op::AffineSampleChannel { x, gamma, beta } => {
            let (vx, vg) = (val(x), val(gamma));
            let (n, c) = (vg.dim(0), vg.dim(1));
            let per = vx.len() / (n * c);
            if need(x) {
                let d = (0..vx.len())
                    .map(|i| {
                        let s = i / (per * c);
                        g.data()[i] * vg.data()[s * c + i % c]
                    })
                    .collect();
                out.push((x, Tensor::new(vx.shape(), d)?));
            }
            if need(gamma) || need(beta) {
                let mut dg = vec![T::zero(); n * c];
                let mut db = vec![T::zero(); n * c];
                for i in 0..vx.len() {
                    let j = (i / (per * c)) * c + i % c;
                    dg[j] += g.data()[i] * vx.data()[i];
                    db[j] += g.data()[i];
                }
                if need(gamma) {
                    out.push((gamma, Tensor::new(&[n, c], dg)?));
                }
                if need(beta) {
                    out.push((beta, Tensor::new(&[n, c], db)?));
                }
            }
        }
        &Op::AffineFeature { x, scale, shift } => {
            let (vx, vs) = (val(x), val(scale));
            let f = vs.len();
            if need(x) {
                let d = (0..vx.len()).map(|i| g.data()[i] * vs.data()[i % f]).collect();
                out.push((x, Tensor::new(vx.shape(), d)?));
            }
            if need(scale) {
                let mut d = vec![T::zero(); f];
                for i in 0..vx.len() {
                    d[i % f] += g.data()[i] * vx.data()[i];
                }
                out.push((scale, Tensor::new(vs.shape(), d)?));
            }
            if need(shift) {
                let mut d = vec![T::zero(); f];
                for i in 0..vx.len() {
                    d[i % f] += g.data()[i];
                }
                out.push((shift, Tensor::new(val(shift).shape(), d)?));
            }
        }
    }
    Ok(out)
}

fn relu_mask<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    kernels::zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
}

/// Backward of `y = (x - mean) * inv_std` with statistics taken either over
/// rows per column (`per_row == false`, width `c`) or over each row
/// (`per_row == true`, width `c` = row length).
fn normalize_backward<T: Scalar>(
    g: &Tensor<T>,
    y: &Tensor<T>,
    c: usize,
    inv_std: &[T],
    per_row: bool,
) -> Result<Tensor<T>> {
    let gd = g.data();
    let yd = y.data();
    let mut d = vec![T::zero(); gd.len()];
    if per_row {
        let m = T::of(c as f64);
        for (r, inv) in inv_std.iter().enumerate() {
            let span = r * c..(r + 1) * c;
            let sg: T = gd[span.clone()].iter().copied().sum();
            let sgy: T = gd[span.clone()].iter().zip(&yd[span.clone()]).map(|(&a, &b)| a * b).sum();
            for i in span {
                d[i] = *inv / m * (m * gd[i] - sg - yd[i] * sgy);
            }
        }
    } else {
        let rows = gd.len() / c;
        let m = T::of(rows as f64);
        let mut sg = vec![T::zero(); c];
        let mut sgy = vec![T::zero(); c];
        for i in 0..gd.len() {
            sg[i % c] += gd[i];
            sgy[i % c] += gd[i] * yd[i];
        }
        for i in 0..gd.len() {
            let k = i % c;
            d[i] = inv_std[k] / m * (m * gd[i] - sg[k] - yd[i] * sgy[k]);
        }
    }
    Tensor::new(g.shape(), d)
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: l, classes });
    }
    Ok(())
}

fn check_rank2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<()> {
    if t.rank() != 2 {
        return Err(shape_err(op, format!("expected rank-2 (rows × cols) input, got {:?}", t.shape())));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.tape.push(kernels::zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.tape.push(kernels::zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.tape.push(kernels::zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::of(c);
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::of(c);
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_bias(self, bias: Self) -> Result<Self> {
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap_or(&0);
        if b.rank() != 1 || b.len() != c {
            return Err(shape_err(
                "add_bias",
                format!("bias shape {:?} must equal last axis {c} of {:?}", b.shape(), x.shape()),
            ));
        }
        let d = x.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % c]).collect();
        Ok(self.tape.push(Tensor::new(x.shape(), d)?, Op::AddBias(self.id, bias.id)))
    }

    /// `op(self) · op(other)` for rank-2 operands.
    pub fn matmul(self, other: Self, ta: bool, tb: bool) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(shape_err("matmul", format!("rank-2 operands required, got {:?} and {:?}", a.shape(), b.shape())));
        }
        let (m, k) = if ta { (a.dim(1), a.dim(0)) } else { (a.dim(0), a.dim(1)) };
        let (k2, n) = if tb { (b.dim(1), b.dim(0)) } else { (b.dim(0), b.dim(1)) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions disagree: lhs {:?} (ta={ta}) gives {k}, rhs {:?} (tb={tb}) gives {k2}", a.shape(), b.shape()),
            ));
        }
        let mut c = vec![T::zero(); m * n];
        gemm(a.data(), b.data(), &mut c, m, k, n, ta, tb, false);
        Ok(self.tape.push(Tensor::new(&[m, n], c)?, Op::MatMul { a: self.id, b: other.id, ta, tb }))
    }

    /// Affine map `self · weight + bias` with `self` N×Din and `weight` Din×Dout.
    pub fn dense(self, weight: Self, bias: Self) -> Result<Self> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) {
            return Err(shape_err(
                "dense",
                format!("input {:?} axis 1 must equal weight {:?} axis 0", x.shape(), w.shape()),
            ));
        }
        self.matmul(weight, false, false)?.add_bias(bias)
    }

    pub fn conv2d(self, kernel: Self, stride: usize, pad: Padding) -> Result<Self> {
        let (x, w) = (self.value(), kernel.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
        let y = kernels::conv2d(x.data(), w.data(), &geom);
        Ok(self.tape.push(
            Tensor::new(&geom.out_shape(), y)?,
            Op::Conv { x: self.id, w: kernel.id, stride, pad },
        ))
    }

    /// Transposed convolution of an output-shaped `self` back to `input_shape`.
    pub fn conv2d_input_grad(self, kernel: Self, input_shape: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        let (g, w) = (self.value(), kernel.value());
        let geom = ConvGeom::new(input_shape, w.shape(), stride, pad)?;
        if g.shape() != geom.out_shape() {
            return Err(shape_err("conv2d_input_grad", format!("gradient {:?} vs conv output {:?}", g.shape(), geom.out_shape())));
        }
        let d = kernels::conv2d_input_grad(g.data(), w.data(), &geom);
        Ok(self.tape.push(
            Tensor::new(&geom.in_shape(), d)?,
            Op::ConvInputGrad { g: self.id, w: kernel.id, stride, pad },
        ))
    }

    /// Kernel gradient given input `self` and output-shaped gradient `gout`.
    pub fn conv2d_weight_grad(self, gout: Self, kernel_shape: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        let (x, g) = (self.value(), gout.value());
        let geom = ConvGeom::new(x.shape(), kernel_shape, stride, pad)?;
        if g.shape() != geom.out_shape() {
            return Err(shape_err("conv2d_weight_grad", format!("gradient {:?} vs conv output {:?}", g.shape(), geom.out_shape())));
        }
        let d = kernels::conv2d_weight_grad(x.data(), g.data(), &geom);
        Ok(self.tape.push(
            Tensor::new(&geom.kernel_shape(), d)?,
            Op::ConvWeightGrad { x: self.id, g: gout.id, stride, pad },
        ))
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Passes `self` where `x > 0`, zero elsewhere; no gradient flows into `x`.
    pub fn relu_mask(self, x: Self) -> Result<Self> {
        let (g, xv) = (self.value(), x.value());
        same_shape("relu_mask", &g, &xv)?;
        Ok(self.tape.push(relu_mask(&g, &xv), Op::ReluMask { g: self.id, x: x.id }))
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Log(self.id), |v| v.ln())
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn upsample2x(self) -> Result<Self> {
        let y = kernels::upsample2x(&self.value())?;
        Ok(self.tape.push(y, Op::Up2(self.id)))
    }

    pub fn downsample2x(self) -> Result<Self> {
        let y = kernels::pool2x(&self.value(), T::of(0.25))?;
        Ok(self.tape.push(y, Op::Down2(self.id)))
    }

    pub fn global_avg_pool(self) -> Result<Self> {
        let y = kernels::global_avg_pool(&self.value())?;
        Ok(self.tape.push(y, Op::GlobalAvgPool(self.id)))
    }

    pub fn spread_hw(self, h: usize, w: usize) -> Result<Self> {
        let y = kernels::spread_hw(&self.value(), h, w)?;
        Ok(self.tape.push(y, Op::SpreadHw(self.id)))
    }

    pub fn sum_all(self) -> Self {
        let s: T = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Self {
        let v = self.value();
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len().max(1) as f64);
        self.tape.push(Tensor::scalar(m), Op::MeanAll(self.id))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let v = self.value();
        if v.len() != 1 {
            return Err(shape_err("broadcast_to", format!("source must hold one element, got {:?}", v.shape())));
        }
        Ok(self.tape.push(Tensor::full(shape, v.item()), Op::BroadcastTo(self.id)))
    }

    /// Sums everything but axis 0: `[N, ..]` → `[N]`.
    pub fn sum_per_sample(self) -> Self {
        let v = self.value();
        let (rows, cols) = v.rows_cols();
        let d = (0..rows).map(|r| v.data()[r * cols..(r + 1) * cols].iter().copied().sum()).collect();
        self.tape.push(Tensor::new(&[rows], d).expect("rows"), Op::SumPerSample(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let y = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(y, Op::Reshape(self.id)))
    }

    pub fn softmax_rows(self) -> Result<Self> {
        let x = self.value();
        check_rank2("softmax_rows", &x)?;
        let c = x.dim(1);
        let mut d = x.data().to_vec();
        for row in d.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.tape.push(Tensor::new(x.shape(), d)?, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(self) -> Result<Self> {
        let x = self.value();
        check_rank2("log_softmax_rows", &x)?;
        let c = x.dim(1);
        let mut d = x.data().to_vec();
        for row in d.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.tape.push(Tensor::new(x.shape(), d)?, Op::LogSoftmaxRows(self.id)))
    }

    /// Column means of an N×C matrix → `[C]`.
    pub fn mean_rows(self) -> Result<Self> {
        let x = self.value();
        check_rank2("mean_rows", &x)?;
        let (mean, _) = kernels::column_moments(x.data(), x.dim(1));
        Ok(self.tape.push(Tensor::new(&[x.dim(1)], mean)?, Op::MeanRows(self.id)))
    }

    /// Subtracts a `[C]` vector from every row of N×C.
    pub fn sub_rowvec(self, v: Self) -> Result<Self> {
        let (x, r) = (self.value(), v.value());
        check_rank2("sub_rowvec", &x)?;
        if r.len() != x.dim(1) {
            return Err(shape_err("sub_rowvec", format!("row vector {:?} vs matrix {:?}", r.shape(), x.shape())));
        }
        let c = x.dim(1);
        let d = x.data().iter().enumerate().map(|(i, &a)| a - r.data()[i % c]).collect();
        Ok(self.tape.push(Tensor::new(x.shape(), d)?, Op::SubRowVec(self.id, v.id)))
    }

    pub fn sum_to_last(self) -> Self {
        let y = kernels::sum_to_last(&self.value());
        self.tape.push(y, Op::SumToLast(self.id))
    }

    /// Picks `self[n, labels[n]]` → `[N]`.
    pub fn select_cols(self, labels: &[usize]) -> Result<Self> {
        let x = self.value();
        check_rank2("select_cols", &x)?;
        if labels.len() != x.dim(0) {
            return Err(shape_err("select_cols", format!("{} labels for {} rows", labels.len(), x.dim(0))));
        }
        check_labels(labels, x.dim(1))?;
        let c = x.dim(1);
        let d = labels.iter().enumerate().map(|(n, &l)| x.data()[n * c + l]).collect();
        Ok(self.tape.push(
            Tensor::new(&[labels.len()], d)?,
            Op::SelectCols { x: self.id, labels: Arc::new(labels.to_vec()) },
        ))
    }

    /// Row lookup into a K×C table → N×C.
    pub fn gather_rows(self, labels: &[usize]) -> Result<Self> {
        let t = self.value();
        check_rank2("gather_rows", &t)?;
        check_labels(labels, t.dim(0))?;
        let c = t.dim(1);
        let mut d = Vec::with_capacity(labels.len() * c);
        for &l in labels {
            d.extend_from_slice(&t.data()[l * c..(l + 1) * c]);
        }
        Ok(self.tape.push(
            Tensor::new(&[labels.len(), c], d)?,
            Op::GatherRows { table: self.id, labels: Arc::new(labels.to_vec()) },
        ))
    }

    /// Normalizes each channel (last axis) by its statistics over all other
    /// axes. Returns the output with the batch mean and biased variance.
    pub fn channel_norm(self, eps: f64) -> Result<(Self, Vec<T>, Vec<T>)> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| shape_err("channel_norm", "scalar input"))?;
        let (mean, var) = kernels::column_moments(x.data(), c);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let d = x.data().iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * inv[i % c]).collect();
        let y = self.tape.push(Tensor::new(x.shape(), d)?, Op::ChannelNorm { x: self.id, inv_std: inv });
        Ok((y, mean, var))
    }

    /// Channel normalization with fixed (running) statistics.
    pub fn channel_norm_fixed(self, mean: &[T], var: &[T], eps: f64) -> Result<Self> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| shape_err("channel_norm_fixed", "scalar input"))?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("channel_norm_fixed", format!("statistics of length {} for {c} channels", mean.len())));
        }
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let d = x.data().iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * inv[i % c]).collect();
        Ok(self.tape.push(Tensor::new(x.shape(), d)?, Op::ChannelNormFixed { x: self.id, inv_std: inv }))
    }

    /// `y[n, .., c] = self[n, .., c] * gamma[n, c] + beta[n, c]`.
    pub fn affine_sample_channel(self, gamma: Self, beta: Self) -> Result<Self> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().unwrap_or(&0);
        let n = x.shape().first().copied().unwrap_or(0);
        if g.shape() != [n, c] || b.shape() != [n, c] {
            return Err(shape_err(
                "affine_sample_channel",
                format!("scale {:?} / shift {:?} must be [{n}, {c}] for input {:?}", g.shape(), b.shape(), x.shape()),
            ));
        }
        let per = x.len() / (n * c).max(1);
        let d = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = (i / (per * c)) * c + i % c;
                v * g.data()[j] + b.data()[j]
            })
            .collect();
        Ok(self.tape.push(
            Tensor::new(x.shape(), d)?,
            Op::AffineSampleChannel { x: self.id, gamma: gamma.id, beta: beta.id },
        ))
    }

    /// Normalizes each sample over all of its non-batch axes.
    pub fn sample_norm(self, eps: f64) -> Self {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut d = x.data().to_vec();
        let mut inv = Vec::with_capacity(rows);
        for row in d.chunks_exact_mut(cols.max(1)) {
            let (m, v) = kernels::column_moments(row, 1);
            let i = T::one() / (v[0] + T::of(eps)).sqrt();
            row.iter_mut().for_each(|q| *q = (*q - m[0]) * i);
            inv.push(i);
        }
        self.tape.push(Tensor::new(x.shape(), d).expect("same shape"), Op::SampleNorm { x: self.id, inv_std: inv })
    }

    /// Per-feature scale and shift broadcast over the batch axis.
    pub fn affine_feature(self, scale: Self, shift: Self) -> Result<Self> {
        let (x, s, b) = (self.value(), scale.value(), shift.value());
        if s.shape() != &x.shape()[1..] || b.shape() != &x.shape()[1..] {
            return Err(shape_err(
                "affine_feature",
                format!("scale {:?} / shift {:?} must equal non-batch axes of {:?}", s.shape(), b.shape(), x.shape()),
            ));
        }
        let f = s.len();
        let d = x.data().iter().enumerate().map(|(i, &v)| v * s.data()[i % f] + b.data()[i % f]).collect();
        Ok(self.tape.push(
            Tensor::new(x.shape(), d)?,
            Op::AffineFeature { x: self.id, scale: scale.id, shift: shift.id },
        ))
    }
}
