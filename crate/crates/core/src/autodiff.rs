//! Eager reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Graph`] computes its value immediately and appends a
//! node. [`Graph::backward`] walks the nodes in reverse creation order, which
//! is a valid topological order and fixes the accumulation order.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Lower clamp applied to `log` arguments.
pub const LOG_FLOOR: f64 = 1e-12;
/// Variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

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
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Slice { src: NodeId, axis: usize, start: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    SelectRows { src: NodeId, idx: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    SumAxis { src: NodeId, axis: usize },
    Softmax(NodeId),
    L2Normalize(NodeId),
    LayerNorm(NodeId),
    StopGradient,
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
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Gelu(_) => "gelu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax(_) => "softmax",
            Op::L2Normalize(_) => "l2_normalize",
            Op::LayerNorm(_) => "layer_norm",
            Op::StopGradient => "stop_gradient",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
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

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable input (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// First node whose value holds NaN or an infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Errors if `id` or anything it was computed from is non-finite.
    pub fn check_finite(&self, id: NodeId) -> Result<()> {
        if self.value(id).is_finite() {
            return Ok(());
        }
        let (node, op) = self.nodes[..=id.0]
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
            .unwrap_or((id.0, self.nodes[id.0].op.name()));
        Err(Error::NumericOverflow { op, node })
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            let plan = Broadcast::plan(va.shape(), vb.shape())?;
            let data = plan
                .ia
                .iter()
                .zip(&plan.ib)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect();
            Tensor::from_parts(plan.shape, data)
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    /// Elementwise sum with numpy-style broadcasting.
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

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        let ng = self.ng(&[a]);
        self.push(v, Op::Log(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| gelu(x).0);
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Identity in the forward pass; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    // ----- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes; 2-D × 2-D or batched 3-D × 3-D.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &va.data()[bi * m * k..(bi + 1) * m * k],
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if va.ndim() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if !(2..=3).contains(&va.ndim()) {
            return Err(Error::contract(format!("transpose needs 2-D or 3-D, got {:?}", va.shape())));
        }
        let value = transpose_last2(va);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    // ----- indexing ----------------------------------------------------

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        let shape = va.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&va.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = width;
        let ng = self.ng(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { src: a, axis, start },
            ng,
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let ref_shape = self.value(first).shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::contract(format!("concat axis {axis} on {ref_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter().zip(&ref_shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::contract(format!("concat shape {s:?} vs {ref_shape:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&ref_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = ref_shape;
        out_shape[axis] = total;
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Gathers rows along axis 0; indices may repeat.
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if va.ndim() == 0 || idx.is_empty() || idx.iter().any(|&i| i >= va.shape()[0]) {
            return Err(Error::contract(format!(
                "select_rows {} indices from {:?}",
                idx.len(),
                va.shape()
            )));
        }
        let value = va.select_rows(idx);
        let ng = self.ng(&[a]);
        Ok(self.push(
            value,
            Op::SelectRows {
                src: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        if axis >= va.ndim() {
            return Err(Error::contract(format!("sum_axis {axis} on {:?}", va.shape())));
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &va.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { src: a, axis }, ng))
    }

    // ----- row-wise normalizations (last axis) -------------------------

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let w = va.last_dim();
        let mut data = Vec::with_capacity(va.len());
        for row in va.rows() {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let start = data.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - m).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..start + w] {
                *v /= z;
            }
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.len());
        for row in va.rows() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(row.iter().map(|x| x / n));
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a]);
        self.push(value, Op::L2Normalize(a), ng)
    }

    /// Zero-mean, unit-variance rows (no affine part), epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let w = va.last_dim() as f64;
        let mut data = Vec::with_capacity(va.len());
        for row in va.rows() {
            let mu = row.iter().sum::<f64>() / w;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / w;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            data.extend(row.iter().map(|x| (x - mu) * inv));
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a]);
        self.push(value, Op::LayerNorm(a), ng)
    }

    // ----- backward ----------------------------------------------------

    /// Reverse-mode gradients of the one-element node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, g, |_, _, gv| gv, *b, grads, true);
                self.accum_broadcast(*b, g, |_, _, gv| gv, *a, grads, false);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, g, |_, _, gv| gv, *b, grads, true);
                self.accum_broadcast(*b, g, |_, _, gv| -gv, *a, grads, false);
            }
            Op::Mul(a, b) => {
                self.accum_broadcast(*a, g, |_, other, gv| gv * other, *b, grads, true);
                self.accum_broadcast(*b, g, |_, other, gv| gv * other, *a, grads, false);
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                self.accum_broadcast(*a, g, |_, bv, gv| gv / bv, *b, grads, true);
                self.accum_broadcast(*b, g, |bv, av, gv| -gv * av / (bv * bv), *a, grads, false);
            }
            Op::Neg(a) => self.accum_map(*a, grads, |i| -g.data()[i]),
            Op::Scale(a, c) => self.accum_map(*a, grads, |i| c * g.data()[i]),
            Op::Exp(a) => self.accum_map(*a, grads, |i| g.data()[i] * out.data()[i]),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accum_map(*a, grads, |i| {
                    let xv = x.data()[i];
                    if xv > LOG_FLOOR {
                        g.data()[i] / xv
                    } else {
                        0.0
                    }
                })
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accum_map(*a, grads, |i| g.data()[i] * gelu(x.data()[i]).1)
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape()).expect("checked in forward");
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..batch {
                        gemm_bt_acc(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &vb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accum(grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        gemm_at_acc(
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accum(grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a.0].needs_grad {
                    accum(grads, *a, transpose_last2(g));
                }
            }
            Op::Reshape(a) => {
                if self.nodes[a.0].needs_grad {
                    let shape = self.shape(*a).to_vec();
                    accum(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
                }
            }
            Op::Slice { src, axis, start } => {
                if !self.nodes[src.0].needs_grad {
                    return;
                }
                let src_shape = self.shape(*src);
                let (outer, len, inner) = axis_split(src_shape, *axis);
                let width = out.shape()[*axis];
                let mut gs = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gs[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                accum(grads, *src, Tensor::from_parts(src_shape.to_vec(), gs));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let len = shape[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accum(grads, p, Tensor::from_parts(shape.to_vec(), gp));
                    }
                    offset += len;
                }
            }
            Op::SelectRows { src, idx } => {
                if !self.nodes[src.0].needs_grad {
                    return;
                }
                let src_shape = self.shape(*src);
                let inner: usize = src_shape[1..].iter().product();
                let mut gs = vec![0.0; self.value(*src).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in gs[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[r * inner..(r + 1) * inner])
                    {
                        *d += s;
                    }
                }
                accum(grads, *src, Tensor::from_parts(src_shape.to_vec(), gs));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum_map(*a, grads, |_| gv)
            }
            Op::Mean(a) => {
                let gv = g.item() / self.value(*a).len() as f64;
                self.accum_map(*a, grads, |_| gv)
            }
            Op::SumAxis { src, axis } => {
                if !self.nodes[src.0].needs_grad {
                    return;
                }
                let src_shape = self.shape(*src);
                let (outer, len, inner) = axis_split(src_shape, *axis);
                let mut gs = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gs.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accum(grads, *src, Tensor::from_parts(src_shape.to_vec(), gs));
            }
            Op::Softmax(a) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let w = out.last_dim();
                let mut gx = Vec::with_capacity(out.len());
                for (y, gy) in out.data().chunks_exact(w).zip(g.data().chunks_exact(w)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gy).map(|(yv, gv)| yv * (gv - dot)));
                }
                accum(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::L2Normalize(a) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let x = self.value(*a);
                let w = out.last_dim();
                let mut gx = Vec::with_capacity(out.len());
                for ((y, gy), xr) in out
                    .data()
                    .chunks_exact(w)
                    .zip(g.data().chunks_exact(w))
                    .zip(x.data().chunks_exact(w))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gy).map(|(yv, gv)| (gv - yv * dot) / n));
                }
                accum(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LayerNorm(a) => {
                if !self.nodes[a.0].needs_grad {
                    return;
                }
                let x = self.value(*a);
                let w = out.last_dim();
                let wf = w as f64;
                let mut gx = Vec::with_capacity(out.len());
                for ((xh, gy), xr) in out
                    .data()
                    .chunks_exact(w)
                    .zip(g.data().chunks_exact(w))
                    .zip(x.data().chunks_exact(w))
                {
                    let mu = xr.iter().sum::<f64>() / wf;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / wf;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mean_g = gy.iter().sum::<f64>() / wf;
                    let mean_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / wf;
                    gx.extend(
                        gy.iter()
                            .zip(xh)
                            .map(|(gv, xv)| inv * (gv - mean_g - xv * mean_gx)),
                    );
                }
                accum(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
            }
        }
    }

    fn accum_map(&self, a: NodeId, grads: &mut [Option<Tensor>], f: impl Fn(usize) -> f64) {
        if !self.nodes[a.0].needs_grad {
            return;
        }
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        accum(grads, a, Tensor::from_parts(shape, (0..n).map(f).collect()));
    }

    /// Accumulates the gradient for operand `target` of a broadcasting binary op.
    ///
    /// `f(self_value, other_value, upstream)` gives the per-output contribution.
    #[allow(clippy::too_many_arguments)]
    fn accum_broadcast(
        &self,
        target: NodeId,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
        other: NodeId,
        grads: &mut [Option<Tensor>],
        target_is_lhs: bool,
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let vt = self.value(target);
        let vo = self.value(other);
        let mut gt = vec![0.0; vt.len()];
        if vt.shape() == vo.shape() {
            for (i, gv) in g.data().iter().enumerate() {
                gt[i] += f(vt.data()[i], vo.data()[i], *gv);
            }
        } else {
            let plan = if target_is_lhs {
                Broadcast::plan(vt.shape(), vo.shape())
            } else {
                Broadcast::plan(vo.shape(), vt.shape())
            }
            .expect("checked in forward");
            let (it, io) = if target_is_lhs {
                (&plan.ia, &plan.ib)
            } else {
                (&plan.ib, &plan.ia)
            };
            for ((&ti, &oi), gv) in it.iter().zip(io).zip(g.data()) {
                gt[ti] += f(vt.data()[ti], vo.data()[oi], *gv);
            }
        }
        accum(grads, target, Tensor::from_parts(vt.shape().to_vec(), gt));
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// (outer, axis length, inner) extents around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if k == k2 && ba == bb => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::contract(format!("matmul shapes {a:?} x {b:?}"))),
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let nd = t.ndim();
    let (r, c) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let batch = t.len() / (r * c);
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::from_parts(shape, out)
}

/// Returns (gelu(x), d gelu / dx) for the tanh approximation.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Flat index maps from a broadcast output back to both operands.
struct Broadcast {
    shape: Vec<usize>,
    ia: Vec<usize>,
    ib: Vec<usize>,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        let nd = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::contract(format!("cannot broadcast {a:?} with {b:?}")));
            }
            shape.push(x.max(y));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; nd];
            let mut acc = 1;
            for d in (0..nd).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        let n: usize = shape.iter().product();
        let mut ia = Vec::with_capacity(n);
        let mut ib = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..n {
            ia.push(oa);
            ib.push(ob);
            for d in (0..nd).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < shape[d] {
                    break;
                }
                oa -= sa[d] * shape[d];
                ob -= sb[d] * shape[d];
                idx[d] = 0;
            }
        }
        Ok(Broadcast { shape, ia, ib })
    }
}
