//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a Wengert list: every op appends a node holding its output
//! value and, when any input requires a gradient, the rule needed to pull a
//! gradient back through it. Nodes are only ever appended after their
//! inputs, so the node index order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept
//! identical shapes or a one-element operand. Everything else goes through
//! an explicit [`Tape::expand`] or [`Tape::reshape`].

use crate::error::{Error, Result};
use crate::tensor::{self, axis_extents, ConvGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max(usize),
    Avg(usize),
    GlobalAvg,
    GlobalMax,
}

enum Op {
    /// Leaf, or any node whose inputs carry no gradient.
    Constant,
    Identity(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        col: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: (usize, usize),
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` required a
    /// gradient and is reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_or_scalar(op: &str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} are neither identical nor scalar",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn bcast(data: &[f64], j: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[j]
    }
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        tensor::check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Constant },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Identity that always requires a gradient, so the gradient arriving at
    /// this point is kept even when nothing upstream is trainable.
    pub fn track(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Identity(x),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|j| f(bcast(da, j), bcast(db, j))).collect();
        self.push(name, Tensor::from_parts(shape, data), &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|v| v + c);
        self.push("add_scalar", v, &[x], Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|v| v * c);
        self.push("mul_scalar", v, &[x], Op::MulScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push("relu", v, &[x], Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push("exp", v, &[x], Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(x).map(f64::ln);
        self.push("log", v, &[x], Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", v, &[x], Op::Sigmoid(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: incompatible shapes {:?} @ {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = tensor::gemm(ta.data(), tb.data(), m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Op::Matmul(a, b),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = tensor::transpose2(t.data(), r, c);
        self.push(
            "transpose",
            Tensor::from_parts(vec![c, r], out),
            &[x],
            Op::Transpose(x),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", v, &[x], Op::Reshape(x))
    }

    /// Repeats size-1 axes of `x` to reach `shape` (ranks must match).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != shape.len()
            || t
                .shape()
                .iter()
                .zip(shape)
                .any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::dim(format!(
                "expand: cannot expand {:?} to {shape:?}",
                t.shape()
            )));
        }
        let src_strides = broadcast_strides(t.shape());
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let data = t.data();
        for_each_index(shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(data[off]);
        });
        self.push("expand", Tensor::from_parts(shape.to_vec(), out), &[x], Op::Expand(x))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("narrow", t.shape(), axis)?;
        if start + len > t.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow: [{start}, {}) exceeds axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, full, inner) = axis_extents(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_parts(shape, out),
            &[x],
            Op::Narrow { x, axis, start },
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let ref_shape = self.value(*first).shape().to_vec();
        check_axis("concat", &ref_shape, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != ref_shape.len()
                || s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat: shape {s:?} incompatible with {ref_shape:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&ref_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("mean_axis", t.shape(), axis)?;
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        if len == 0 {
            return Err(Error::dim("mean over empty axis"));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &t.data()[(o * len + a) * inner..][..inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push(
            "mean_axis",
            Tensor::from_parts(shape, out),
            &[x],
            Op::MeanAxis { x, axis },
        )
    }

    /// Max along `axis`, keeping it with size 1. Ties go to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("max_axis", t.shape(), axis)?;
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        if len == 0 {
            return Err(Error::dim("max over empty axis"));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = t.data()[(o * len + a) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = a;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push(
            "max_axis",
            Tensor::from_parts(shape, out),
            &[x],
            Op::MaxAxis { x, axis, argmax },
        )
    }

    /// Softmax along `axis`, stabilised by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        let out = softmax_values(t.data(), t.shape(), axis);
        self.push(
            "softmax",
            Tensor::from_parts(t.shape().to_vec(), out),
            &[x],
            Op::Softmax { x, axis },
        )
    }

    /// Cross-correlation of a `[c_in, h, w]` input with a
    /// `[c_out, c_in, kh, kw]` kernel, plus an optional `[c_out]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.rank() != 3 || tk.rank() != 4 || tk.shape()[1] != tx.shape()[0] {
            return Err(Error::dim(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        let c_out = tk.shape()[0];
        let geom = ConvGeometry::new(
            tx.shape()[0],
            tx.shape()[1],
            tx.shape()[2],
            tk.shape()[2],
            tk.shape()[3],
            stride,
            pad,
        )?;
        let col = tensor::im2col(tx.data(), &geom);
        let mut out = tensor::gemm(tk.data(), &col, c_out, geom.col_rows(), geom.col_cols());
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} does not match {c_out} output channels",
                    tb.shape()
                )));
            }
            let plane = geom.col_cols();
            for (c, &bv) in tb.data().iter().enumerate() {
                out[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![c_out, geom.oh, geom.ow], out),
            &inputs,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                col,
            },
        )
    }

    /// Non-overlapping pooling over a `[c, h, w]` map. Windowed variants
    /// drop any trailing rows/columns that do not fill a window.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::dim(format!("pool2d needs [c,h,w], got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if h == 0 || w == 0 {
            return Err(Error::dim("pool2d over empty spatial dims"));
        }
        let (wh, ww, is_max) = match kind {
            PoolKind::Max(s) => (s, s, true),
            PoolKind::Avg(s) => (s, s, false),
            PoolKind::GlobalAvg => (h, w, false),
            PoolKind::GlobalMax => (h, w, true),
        };
        if wh == 0 || wh > h || ww > w {
            return Err(Error::dim(format!(
                "pool window {wh}x{ww} does not fit {h}x{w}"
            )));
        }
        let (oh, ow) = (h / wh, w / ww);
        let data = t.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::new();
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut total = 0.0;
                    for di in 0..wh {
                        for dj in 0..ww {
                            let at = (ch * h + oi * wh + di) * w + oj * ww + dj;
                            let v = data[at];
                            total += v;
                            if v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                    }
                    if is_max {
                        out.push(best);
                        argmax.push(best_at);
                    } else {
                        out.push(total / (wh * ww) as f64);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        let op = if is_max {
            Op::MaxPool { x, argmax }
        } else {
            Op::AvgPool { x, window: (wh, ww) }
        };
        self.push("pool2d", value, &[x], op)
    }

    /// `-log softmax(logits)[target]` for a rank-1 logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::dim(format!(
                "cross_entropy needs rank-1 logits, got {:?}",
                t.shape()
            )));
        }
        if target >= t.numel() {
            return Err(Error::invalid(format!(
                "target class {target} out of range for {} classes",
                t.numel()
            )));
        }
        let probs = softmax_values(t.data(), t.shape(), 0);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[target];
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("loss is not on this tape"))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn pull_back(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Constant => {}
            Op::Identity(x) | Op::Reshape(x) | Op::AddScalar(x) => {
                acc(*x, &mut |gx| add_into(gx, g));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| reduce_into(ga, g, 1.0));
                acc(*b, &mut |gb| reduce_into(gb, g, sign));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    if ga.len() == g.len() {
                        for (j, gv) in ga.iter_mut().enumerate() {
                            *gv += g[j] * bcast(db, j);
                        }
                    } else {
                        ga[0] += (0..g.len()).map(|j| g[j] * bcast(db, j)).sum::<f64>();
                    }
                });
                acc(*b, &mut |gb| {
                    if gb.len() == g.len() {
                        for (j, gv) in gb.iter_mut().enumerate() {
                            *gv += g[j] * bcast(da, j);
                        }
                    } else {
                        gb[0] += (0..g.len()).map(|j| g[j] * bcast(da, j)).sum::<f64>();
                    }
                });
            }
            Op::MulScalar(x, c) => acc(*x, &mut |gx| {
                for (gv, &gi) in gx.iter_mut().zip(g) {
                    *gv += c * gi;
                }
            }),
            Op::Relu(x) => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        if dx[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * out[j];
                }
            }),
            Op::Log(x) => {
                let dx = val(*x);
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / dx[j];
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| {
                    let bt = tensor::transpose2(tb.data(), k, n);
                    tensor::gemm_acc(g, &bt, ga, m, n, k);
                });
                acc(*b, &mut |gb| {
                    let at = tensor::transpose2(ta.data(), m, k);
                    tensor::gemm_acc(&at, g, gb, k, m, n);
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = tensor::transpose2(g, s[0], s[1]);
                acc(*x, &mut |gx| add_into(gx, &gt));
            }
            Op::Expand(x) => {
                let strides = broadcast_strides(self.nodes[x.0].value.shape());
                acc(*x, &mut |gx| {
                    let mut j = 0;
                    for_each_index(node.value.shape(), |idx| {
                        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                        gx[off] += g[j];
                        j += 1;
                    });
                })
            }
            Op::Narrow { x, axis, start } => {
                let src = self.nodes[x.0].value.shape();
                let (outer, full, inner) = axis_extents(src, *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let srcg = o * len * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[srcg..srcg + len * inner]);
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut gv[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                })
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = axis_extents(self.nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            gx[(o * len + argmax[slot]) * inner + i] += g[slot];
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                col,
            } => {
                let c_out = node.value.shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                acc(*kernel, &mut |gk| {
                    let col_t = tensor::transpose2(col, rows, cols);
                    tensor::gemm_acc(g, &col_t, gk, c_out, cols, rows);
                });
                acc(*x, &mut |gx| {
                    let k = self.nodes[kernel.0].value.data();
                    let k_t = tensor::transpose2(k, c_out, rows);
                    let gcol = tensor::gemm(&k_t, g, rows, c_out, cols);
                    add_into(gx, &tensor::col2im(&gcol, geom));
                });
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for (c, gv) in gb.iter_mut().enumerate() {
                            *gv += g[c * cols..(c + 1) * cols].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |gx| {
                for (o, &at) in argmax.iter().enumerate() {
                    gx[at] += g[o];
                }
            }),
            Op::AvgPool { x, window } => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / window.0, w / window.1);
                let area = (window.0 * window.1) as f64;
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let gv = g[(ch * oh + oi) * ow + oj] / area;
                                for di in 0..window.0 {
                                    for dj in 0..window.1 {
                                        gx[(ch * h + oi * window.0 + di) * w + oj * window.1 + dj] +=
                                            gv;
                                    }
                                }
                            }
                        }
                    }
                })
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |gl| {
                for (j, gv) in gl.iter_mut().enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    *gv += g[0] * (probs[j] - onehot);
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `sign * g` into `dst`, summing when `dst` was a broadcast
/// scalar operand.
fn reduce_into(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        for (d, s) in dst.iter_mut().zip(g) {
            *d += sign * s;
        }
    } else {
        dst[0] += sign * g.iter().sum::<f64>();
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Numerically stable softmax along `axis` of a row-major buffer.
pub fn softmax_values(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (data[at(a)] - max).exp();
                out[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[at(a)] /= total;
            }
        }
    }
    out
}
