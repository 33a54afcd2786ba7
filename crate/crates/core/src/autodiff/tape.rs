//! Define-by-run reverse-mode tape.
//!
//! Every primitive records its output value and whatever it needs for the
//! backward pass. Graphs are rebuilt per evaluation; a [`Tape`] is confined
//! to one thread.

use std::collections::VecDeque;

use super::tensor::{axis_split, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable primitives a graph may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Multiply,
    Subtract,
    Scale,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    LayerNorm,
    Mean,
    Sum,
    SquaredDistance,
    Concat,
    Gather,
    MaxPool,
    Cosine,
    StopGradient,
}

impl Primitive {
    /// Every primitive except `Leaf`.
    pub const CATALOG: [Primitive; 19] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Multiply,
        Primitive::Subtract,
        Primitive::Scale,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::SquaredDistance,
        Primitive::Concat,
        Primitive::Gather,
        Primitive::MaxPool,
        Primitive::Cosine,
        Primitive::StopGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Multiply => "mul",
            Primitive::Subtract => "sub",
            Primitive::Scale => "scale",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::SquaredDistance => "sq_dist",
            Primitive::Concat => "concat",
            Primitive::Gather => "gather",
            Primitive::MaxPool => "max_pool",
            Primitive::Cosine => "cosine",
            Primitive::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { trans_b: bool },
    Add,
    Subtract,
    Multiply,
    Scale(f64),
    Relu,
    Sigmoid,
    Exp,
    Log { floor: f64 },
    Softmax { axis: usize },
    LayerNorm { rstd: Vec<f64> },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    SquaredDistance,
    Cosine,
    Concat { axis: usize },
    Gather { indices: Vec<usize> },
    MaxPool { axis: usize, argmax: Vec<usize> },
    StopGradient,
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Add => Primitive::Add,
            Op::Subtract => Primitive::Subtract,
            Op::Multiply => Primitive::Multiply,
            Op::Scale(_) => Primitive::Scale,
            Op::Relu => Primitive::Relu,
            Op::Sigmoid => Primitive::Sigmoid,
            Op::Exp => Primitive::Exp,
            Op::Log { .. } => Primitive::Log,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Sum { .. } => Primitive::Sum,
            Op::Mean { .. } => Primitive::Mean,
            Op::SquaredDistance => Primitive::SquaredDistance,
            Op::Cosine => Primitive::Cosine,
            Op::Concat { .. } => Primitive::Concat,
            Op::Gather { .. } => Primitive::Gather,
            Op::MaxPool { .. } => Primitive::MaxPool,
            Op::StopGradient => Primitive::StopGradient,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    label: Option<String>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen_stops: Option<VecDeque<Tensor>>,
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose stop-gradient nodes emit `stops` (in creation order)
    /// instead of their inputs' values. Used to take finite differences
    /// with stop-gradient outputs held fixed.
    pub fn replaying(stops: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            frozen_stops: Some(stops.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    /// Attaches a human-readable name used in diagnostics.
    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.nodes[v.0].label = Some(name.into());
    }

    pub fn node_name(&self, v: Var) -> String {
        let node = &self.nodes[v.0];
        match &node.label {
            Some(l) => format!("{l} ({}#{})", node.op.primitive().name(), v.0),
            None => format!("{}#{}", node.op.primitive().name(), v.0),
        }
    }

    /// Values emitted by every stop-gradient node, in creation order.
    pub fn stop_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    /// First node holding a NaN or infinite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: self.node_name(Var(i)),
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = !matches!(op, Op::StopGradient)
            && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, prim: Primitive, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: format!("{}#{}", prim.name(), self.nodes.len()),
            detail,
        }
    }

    // ---- primitives ----

    /// `a · b` where `a` is `[.., m, k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `a` is `[.., m, k]` and `b` is `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() < 1 || bv.ndim() != 2 {
            return Err(self.mismatch(
                Primitive::MatMul,
                format!("operands {:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let k = av.cols();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(self.mismatch(
                Primitive::MatMul,
                format!(
                    "inner extents differ: {:?} x {:?}{}",
                    av.shape(),
                    bv.shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let m = av.rows();
        let out = if trans_b {
            mm_nt(av.data(), bv.data(), m, k, n)
        } else {
            mm(av.data(), bv.data(), m, k, n)
        };
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out);
        Ok(self.push(Op::MatMul { trans_b }, vec![a.0, b.0], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Subtract, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Multiply, |x, y| x * y)
    }

    /// Elementwise op where `b` either matches `a`'s shape, is a single
    /// value, or matches a trailing suffix of `a`'s shape (broadcast).
    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(self.mismatch(
                op.primitive(),
                format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape()),
            ));
        }
        let r = bv.numel();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % r]))
            .collect();
        let value = Tensor::new(av.shape(), data);
        Ok(self.push(op, vec![a.0, b.0], value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(factor), vec![a.0], value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu, vec![a.0], value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid, vec![a.0], value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a.0], value)
    }

    /// Natural log.
    pub fn log(&mut self, a: Var) -> Var {
        self.log_floor(a, 0.0)
    }

    /// `ln(max(x, floor))`; the gradient is zero wherever the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        self.push(Op::Log { floor }, vec![a.0], value)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(self.mismatch(
                Primitive::Softmax,
                format!("axis {axis} out of range for {:?}", av.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(av.shape(), out);
        Ok(self.push(Op::Softmax { axis }, vec![a.0], value))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() < 1 || av.cols() == 0 {
            return Err(self.mismatch(
                Primitive::LayerNorm,
                format!("needs a non-empty last axis, got {:?}", av.shape()),
            ));
        }
        let (rows, cols) = (av.rows(), av.cols());
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let value = Tensor::new(av.shape(), out);
        Ok(self.push(Op::LayerNorm { rstd }, vec![a.0], value))
    }

    /// Sum of all elements (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum { axis: None }, vec![a.0], value)
    }

    /// Mean of all elements (shape `[]`).
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.data().iter().sum::<f64>() / av.numel() as f64);
        self.push(Op::Mean { axis: None }, vec![a.0], value)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let prim = if mean { Primitive::Mean } else { Primitive::Sum };
        let av = self.value(a);
        if axis >= av.ndim() || av.shape()[axis] == 0 {
            return Err(self.mismatch(prim, format!("axis {axis} invalid for {:?}", av.shape())));
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let x = av.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out);
        let op = if mean {
            Op::Mean { axis: Some(axis) }
        } else {
            Op::Sum { axis: Some(axis) }
        };
        Ok(self.push(op, vec![a.0], value))
    }

    /// Pairwise squared L2 distances between rows: `[m,d] x [n,d] -> [m,n]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.row_pair(a, b, Primitive::SquaredDistance)?;
        let (m, n, d) = (av.rows(), bv.rows(), av.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = av.row(i);
            for j in 0..n {
                out[i * n + j] = ar
                    .iter()
                    .zip(bv.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let _ = d;
        let value = Tensor::new(&[m, n], out);
        Ok(self.push(Op::SquaredDistance, vec![a.0, b.0], value))
    }

    /// Pairwise cosine similarity between rows: `[m,d] x [n,d] -> [m,n]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.row_pair(a, b, Primitive::Cosine)?;
        let (m, n) = (av.rows(), bv.rows());
        let an: Vec<f64> = (0..m).map(|i| norm(av.row(i)).max(COSINE_NORM_FLOOR)).collect();
        let bn: Vec<f64> = (0..n).map(|j| norm(bv.row(j)).max(COSINE_NORM_FLOOR)).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(av.row(i), bv.row(j)) / (an[i] * bn[j]);
            }
        }
        let value = Tensor::new(&[m, n], out);
        Ok(self.push(Op::Cosine, vec![a.0, b.0], value))
    }

    fn row_pair(&self, a: Var, b: Var, prim: Primitive) -> Result<(&Tensor, &Tensor)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.cols() {
            return Err(self.mismatch(
                prim,
                format!("row sets {:?} and {:?} differ in width", av.shape(), bv.shape()),
            ));
        }
        Ok((av, bv))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(self.mismatch(Primitive::Concat, "no operands".into()));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(self.mismatch(
                Primitive::Concat,
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch(
                    Primitive::Concat,
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let len = pv.shape()[axis];
                out.extend_from_slice(&pv.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(&shape, out);
        Ok(self.push(Op::Concat { axis }, parts.iter().map(|p| p.0).collect(), value))
    }

    /// Selects rows (first axis) of `a`; the output shape is `[indices.len(), ..]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.gather_shaped(a, indices, &[indices.len()])
    }

    /// Row gather whose leading output axes are `prefix` (product must equal
    /// `indices.len()`).
    pub fn gather_shaped(&mut self, a: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() < 1 || prefix.iter().product::<usize>() != indices.len() {
            return Err(self.mismatch(
                Primitive::Gather,
                format!("{} indices into {:?} with prefix {prefix:?}", indices.len(), av.shape()),
            ));
        }
        let rows = av.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(self.mismatch(
                Primitive::Gather,
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let width: usize = av.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&av.data()[i * width..(i + 1) * width]);
        }
        let mut shape = prefix.to_vec();
        shape.extend_from_slice(&av.shape()[1..]);
        let value = Tensor::new(&shape, out);
        Ok(self.push(
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![a.0],
            value,
        ))
    }

    /// Maximum along `axis`, which is removed. Ties go to the lowest index.
    pub fn max_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() || av.shape()[axis] == 0 {
            return Err(self.mismatch(
                Primitive::MaxPool,
                format!("axis {axis} invalid for {:?}", av.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let x = av.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if x[(o * len + j) * inner + i] > x[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                out[o * inner + i] = x[(o * len + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out);
        Ok(self.push(Op::MaxPool { axis, argmax }, vec![a.0], value))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = match self.frozen_stops.as_mut() {
            None => self.nodes[a.0].value.clone(),
            Some(queue) => {
                let frozen = queue.pop_front().ok_or_else(|| AutodiffError::ReplayMismatch {
                    detail: "more stop-gradient nodes than recorded values".into(),
                })?;
                if frozen.shape() != self.nodes[a.0].value.shape() {
                    return Err(AutodiffError::ReplayMismatch {
                        detail: format!(
                            "recorded stop-gradient shape {:?} != {:?}",
                            frozen.shape(),
                            self.nodes[a.0].value.shape()
                        ),
                    });
                }
                frozen
            }
        };
        Ok(self.push(Op::StopGradient, vec![a.0], value))
    }

    // ---- backward ----

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &go, &mut grads);
            grads[idx] = Some(go);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.filter(|_| self.nodes[i].requires_grad))
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inp = &node.inputs;
        let wants = |i: usize| self.nodes[inp[i]].requires_grad;
        let x = |i: usize| self.nodes[inp[i]].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { trans_b } => {
                let (av, bv) = (&self.nodes[inp[0]].value, &self.nodes[inp[1]].value);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if wants(0) {
                    let ga = if *trans_b {
                        mm(go, bv.data(), m, n, k)
                    } else {
                        mm_nt(go, bv.data(), m, n, k)
                    };
                    accumulate(grads, inp[0], &ga);
                }
                if wants(1) {
                    let gb = if *trans_b {
                        mm_tn(go, av.data(), m, n, k)
                    } else {
                        mm_tn(av.data(), go, m, k, n)
                    };
                    accumulate(grads, inp[1], &gb);
                }
            }
            Op::Add | Op::Subtract | Op::Multiply => {
                let (a, b) = (x(0), x(1));
                let r = b.len();
                if wants(0) {
                    let ga: Vec<f64> = match node.op {
                        Op::Multiply => go.iter().enumerate().map(|(i, g)| g * b[i % r]).collect(),
                        _ => go.to_vec(),
                    };
                    accumulate(grads, inp[0], &ga);
                }
                if wants(1) {
                    let mut gb = vec![0.0; r];
                    for (i, g) in go.iter().enumerate() {
                        gb[i % r] += match node.op {
                            Op::Add => *g,
                            Op::Subtract => -g,
                            _ => g * a[i],
                        };
                    }
                    accumulate(grads, inp[1], &gb);
                }
            }
            Op::Scale(c) => {
                let g: Vec<f64> = go.iter().map(|g| g * c).collect();
                accumulate(grads, inp[0], &g);
            }
            Op::Relu => {
                let g: Vec<f64> = go
                    .iter()
                    .zip(x(0))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, inp[0], &g);
            }
            Op::Sigmoid => {
                let g: Vec<f64> = go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(grads, inp[0], &g);
            }
            Op::Exp => {
                let g: Vec<f64> = go.iter().zip(y).map(|(g, e)| g * e).collect();
                accumulate(grads, inp[0], &g);
            }
            Op::Log { floor } => {
                let g: Vec<f64> = go
                    .iter()
                    .zip(x(0))
                    .map(|(g, v)| if *v > *floor { g / v } else { 0.0 })
                    .collect();
                accumulate(grads, inp[0], &g);
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dotp: f64 = (0..len).map(|j| go[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            g[idx(j)] = y[idx(j)] * (go[idx(j)] - dotp);
                        }
                    }
                }
                accumulate(grads, inp[0], &g);
            }
            Op::LayerNorm { rstd } => {
                let cols = node.value.cols();
                let mut g = vec![0.0; y.len()];
                for (r, s) in rstd.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, yr) = (&go[span.clone()], &y[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, gv), yv) in g[span].iter_mut().zip(gr).zip(yr) {
                        *o = s * (gv - mean_g - yv * mean_gy);
                    }
                }
                accumulate(grads, inp[0], &g);
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let in_shape = self.nodes[inp[0]].value.shape();
                let is_mean = matches!(node.op, Op::Mean { .. });
                let g = match axis {
                    None => {
                        let n = x(0).len();
                        let v = if is_mean { go[0] / n as f64 } else { go[0] };
                        vec![v; n]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_split(in_shape, *axis);
                        let div = if is_mean { len as f64 } else { 1.0 };
                        let mut g = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    g[(o * len + j) * inner + i] = go[o * inner + i] / div;
                                }
                            }
                        }
                        g
                    }
                };
                accumulate(grads, inp[0], &g);
            }
            Op::SquaredDistance => {
                let (av, bv) = (&self.nodes[inp[0]].value, &self.nodes[inp[1]].value);
                let (m, n, d) = (av.rows(), bv.rows(), av.cols());
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * go[i * n + j];
                        for c in 0..d {
                            let diff = av.data()[i * d + c] - bv.data()[j * d + c];
                            ga[i * d + c] += gij * diff;
                            gb[j * d + c] -= gij * diff;
                        }
                    }
                }
                if wants(0) {
                    accumulate(grads, inp[0], &ga);
                }
                if wants(1) {
                    accumulate(grads, inp[1], &gb);
                }
            }
            Op::Cosine => {
                let (av, bv) = (&self.nodes[inp[0]].value, &self.nodes[inp[1]].value);
                let (m, n, d) = (av.rows(), bv.rows(), av.cols());
                let an: Vec<f64> = (0..m).map(|i| norm(av.row(i)).max(COSINE_NORM_FLOOR)).collect();
                let bn: Vec<f64> = (0..n).map(|j| norm(bv.row(j)).max(COSINE_NORM_FLOOR)).collect();
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let g = go[i * n + j];
                        let c = y[i * n + j];
                        let inv = 1.0 / (an[i] * bn[j]);
                        for k in 0..d {
                            let (a, b) = (av.data()[i * d + k], bv.data()[j * d + k]);
                            ga[i * d + k] += g * (b * inv - c * a / (an[i] * an[i]));
                            gb[j * d + k] += g * (a * inv - c * b / (bn[j] * bn[j]));
                        }
                    }
                }
                if wants(0) {
                    accumulate(grads, inp[0], &ga);
                }
                if wants(1) {
                    accumulate(grads, inp[1], &gb);
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for (slot, &src) in inp.iter().enumerate() {
                    let len = self.nodes[src].value.shape()[*axis];
                    if wants(slot) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&go[start..start + len * inner]);
                        }
                        accumulate(grads, src, &g);
                    }
                    offset += len;
                }
            }
            Op::Gather { indices } => {
                let src = &self.nodes[inp[0]].value;
                let width: usize = src.shape()[1..].iter().product();
                let mut g = vec![0.0; src.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        g[i * width + c] += go[r * width + c];
                    }
                }
                accumulate(grads, inp[0], &g);
            }
            Op::MaxPool { axis, argmax } => {
                let src = &self.nodes[inp[0]].value;
                let (outer, len, inner) = axis_split(src.shape(), *axis);
                let mut g = vec![0.0; src.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        g[(o * len + j) * inner + i] += go[o * inner + i];
                    }
                }
                accumulate(grads, inp[0], &g);
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a node, or `None` if nothing reached it or it does not
    /// require a gradient.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Gradient of a node, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let bn: usize = b.iter().product();
    if a == b || bn == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `[m,k] · [k,n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m,k] · [n,k]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `[k,m]ᵀ · [k,n]`, with `a` stored as `[k,m]`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
