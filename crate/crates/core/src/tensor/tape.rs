//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its parents. Node ids are assigned in creation order, so the node list
//! is already a topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::value::{lanes, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Var, Var),
    SliceLast { x: Var, start: usize },
    Linear { x: Var, w: Var, b: Var },
    DepthwiseConv { x: Var, k: Var },
    Conv3x3 { x: Var, k: Var, b: Var },
    Sum { x: Var, axes: Vec<usize> },
    Mean { x: Var, axes: Vec<usize> },
    Max { x: Var, argmax: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    ScaleRows { x: Var, s: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations and their values for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    frozen: Vec<Var>,
    overrides: Option<Vec<Tensor<T>>>,
}

/// Gradients of a scalar loss w.r.t. every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` for constants and detached values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Vec::new(),
            overrides: None,
        }
    }

    /// A tape whose stop-gradient values are replayed from `values` (as
    /// returned by [`Tape::frozen_values`] of an earlier run of the same graph)
    /// instead of being taken from the current computation. Lets finite
    /// differences see the same fixed targets the analytic gradient does.
    pub fn with_frozen(values: Vec<Tensor<T>>) -> Self {
        Self {
            overrides: Some(values),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `x`, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.freeze(value)
    }

    /// Constant computed from values already on the tape (a stop-gradient).
    pub fn freeze(&mut self, value: Tensor<T>) -> Var {
        let n = self.frozen.len();
        let value = match self.overrides.as_ref().and_then(|o| o.get(n)) {
            Some(v) if v.shape() == value.shape() => v.clone(),
            _ => value,
        };
        let v = self.constant(value);
        self.frozen.push(v);
        v
    }

    /// Values of every stop-gradient node, in creation order.
    pub fn frozen_values(&self) -> Vec<Tensor<T>> {
        self.frozen.iter().map(|&v| self.value(v).clone()).collect()
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

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = matmul_raw(self.value(a), self.value(b));
        Ok(self.node_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transposed()?;
        Ok(self.node_op(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.node_op(value, Op::Reshape(x), &[x]))
    }

    /// Last-axis concatenation; all leading extents must agree.
    pub fn concat_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_channel", sa, sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let rows = va.len() / ca;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.node_op(value, Op::Concat(a, b), &[a, b]))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channel(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::shape("slice_channel", &sx, &[start, len]))?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channel", &sx, &[start, len]));
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = len;
        let vx = self.value(x).data();
        let rows = vx.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx[r * c + start..r * c + start + len]);
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.node_op(value, Op::SliceLast { x, start }, &[x]))
    }

    /// Per-position affine map over the last axis: `x · w + bias`.
    pub fn linear_1x1(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear_1x1", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(Error::shape("linear_1x1 bias", sw, sb));
        }
        let (din, dout) = (sw[0], sw[1]);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = dout;
        let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let rows = vx.len() / din;
        let mut data = Vec::with_capacity(rows * dout);
        for r in 0..rows {
            let start = data.len();
            data.extend_from_slice(vb);
            let out = &mut data[start..];
            for (i, &xv) in vx[r * din..(r + 1) * din].iter().enumerate() {
                for (o, &wv) in out.iter_mut().zip(&vw[i * dout..(i + 1) * dout]) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.node_op(value, Op::Linear { x, w, b: bias }, &[x, w, bias]))
    }

    /// Per-channel 3×3 correlation, stride 1, zero padding 1.
    pub fn depthwise_conv3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 {
            return Err(Error::shape("depthwise_conv3x3", sx, sk));
        }
        if sk != [3, 3, sx[2]] {
            return Err(Error::shape("depthwise_conv3x3 kernel", sx, sk));
        }
        let value = depthwise_forward(self.value(x), self.value(k));
        Ok(self.node_op(value, Op::DepthwiseConv { x, k }, &[x, k]))
    }

    /// Full 3×3 convolution `[H,W,Cin] * [3,3,Cin,Cout] + bias`, stride 1, zero padding 1.
    pub fn conv3x3(&mut self, x: Var, k: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(k), self.shape(bias));
        if sx.len() != 3 || sk.len() != 4 || sk[..3] != [3, 3, sx[2]] {
            return Err(Error::shape("conv3x3", sx, sk));
        }
        if sb != [sk[3]] {
            return Err(Error::shape("conv3x3 bias", sk, sb));
        }
        let value = conv_forward(self.value(x), self.value(k), self.value(bias));
        Ok(self.node_op(value, Op::Conv3x3 { x, k, b: bias }, &[x, k, bias]))
    }

    // ---- normalisation --------------------------------------------------

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let value = softmax_raw(self.value(x), axis);
        Ok(self.node_op(value, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let value = log_softmax_raw(self.value(x), axis);
        Ok(self.node_op(value, Op::LogSoftmax(x, axis), &[x]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduce_map(self.shape(x), axes)?;
        let mut out = Tensor::zeros(&shape);
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out.data_mut()[o] += v;
        }
        Ok(self.node_op(out, Op::Sum { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduce_map(self.shape(x), axes)?;
        let mut out = Tensor::zeros(&shape);
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out.data_mut()[o] += v;
        }
        let count = T::lit((self.value(x).len() / out.len()) as f64);
        out.data_mut().iter_mut().for_each(|v| *v /= count);
        Ok(self.node_op(out, Op::Mean { x, axes: axes.to_vec() }, &[x]))
    }

    /// Maximum along one axis; ties resolve to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max")?;
        let vx = self.value(x);
        let (outer, n, inner) = lanes(vx.shape(), axis);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = base;
                for j in 1..n {
                    let idx = base + j * inner;
                    if vx.data()[idx] > vx.data()[best] {
                        best = idx;
                    }
                }
                data.push(vx.data()[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.node_op(value, Op::Max { x, argmax }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_values(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("add", a, b, |x, y| x + y)?;
        Ok(self.node_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("sub", a, b, |x, y| x - y)?;
        Ok(self.node_op(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("mul", a, b, |x, y| x * y)?;
        Ok(self.node_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise quotient. Callers add the guard to denominators that can vanish.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("div", a, b, |x, y| x / y)?;
        Ok(self.node_op(value, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.node_op(value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.node_op(value, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.node_op(value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.node_op(value, Op::Exp(x), &[x])
    }

    /// Natural log with the argument clamped below at the guard value.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::guard()).ln());
        self.node_op(value, Op::Log(x), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::recip);
        self.node_op(value, Op::Recip(x), &[x])
    }

    /// Multiplies row `r` of a `[R, C]` tensor by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss != [sx[0]] {
            return Err(Error::shape("scale_rows", sx, ss));
        }
        let c = sx[1];
        let (vx, vs) = (self.value(x), self.value(s));
        let value = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * vs.data()[i / c]);
        Ok(self.node_op(value, Op::ScaleRows { x, s }, &[x, s]))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(node) back to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        // Leaves created after the loss still get an explicit zero.
        for (id, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(contribution.data())
                .for_each(|(a, &c)| *a += c),
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let bt = vb.transposed().expect("rank 2");
                    self.accumulate(grads, a, matmul_raw(g, &bt));
                }
                if self.requires_grad(b) {
                    let at = va.transposed().expect("rank 2");
                    self.accumulate(grads, b, matmul_raw(&at, g));
                }
            }
            &Op::Transpose(x) => {
                self.accumulate(grads, x, g.transposed().expect("rank 2"));
            }
            &Op::Reshape(x) => {
                let back = g.reshape(self.shape(x)).expect("same size");
                self.accumulate(grads, x, back);
            }
            &Op::Softmax(x, axis) => {
                let (outer, n, inner) = lanes(out.shape(), axis);
                let mut gx = Tensor::zeros(out.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: T = (0..n)
                            .map(|j| g.data()[base + j * inner] * out.data()[base + j * inner])
                            .sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx.data_mut()[idx] = out.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = lanes(out.shape(), axis);
                let mut gx = Tensor::zeros(out.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let total: T = (0..n).map(|j| g.data()[base + j * inner]).sum();
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx.data_mut()[idx] = g.data()[idx] - out.data()[idx].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Concat(a, b) => {
                let ca = *self.shape(a).last().unwrap();
                let cb = *self.shape(b).last().unwrap();
                let rows = g.len() / (ca + cb);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, Tensor::new(self.shape(a), ga).expect("shape"));
                self.accumulate(grads, b, Tensor::new(self.shape(b), gb).expect("shape"));
            }
            &Op::SliceLast { x, start } => {
                let c = *self.shape(x).last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut gx = Tensor::zeros(self.shape(x));
                for r in 0..g.len() / len {
                    gx.data_mut()[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Linear { x, w, b } => {
                let sw = self.shape(w);
                let (din, dout) = (sw[0], sw[1]);
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                let rows = g.len() / dout;
                if self.requires_grad(x) {
                    let mut gx = Tensor::zeros(self.shape(x));
                    for r in 0..rows {
                        let gr = &g.data()[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let wr = &vw[i * dout..(i + 1) * dout];
                            gx.data_mut()[r * din + i] = gr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.requires_grad(w) {
                    let mut gw = Tensor::zeros(sw);
                    for r in 0..rows {
                        let gr = &g.data()[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let xv = vx[r * din + i];
                            for (acc, &gv) in gw.data_mut()[i * dout..(i + 1) * dout].iter_mut().zip(gr) {
                                *acc += xv * gv;
                            }
                        }
                    }
                    self.accumulate(grads, w, gw);
                }
                if self.requires_grad(b) {
                    let mut gb = Tensor::zeros(&[dout]);
                    for r in 0..rows {
                        for (acc, &gv) in gb.data_mut().iter_mut().zip(&g.data()[r * dout..(r + 1) * dout]) {
                            *acc += gv;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::DepthwiseConv { x, k } => {
                let (gx, gk) = depthwise_backward(self.value(x), self.value(k), g);
                self.accumulate(grads, x, gx);
                self.accumulate(grads, k, gk);
            }
            &Op::Conv3x3 { x, k, b } => {
                let (gx, gk, gb) = conv_backward(
                    self.value(x),
                    self.value(k),
                    g,
                    self.requires_grad(x),
                    self.requires_grad(k) || self.requires_grad(b),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, x, gx);
                }
                if let Some((gk, gb)) = gk.zip(gb) {
                    self.accumulate(grads, k, gk);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let x = *x;
                let (_, map) = reduce_map(self.shape(x), axes).expect("validated in forward");
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::lit((self.value(x).len() / out.len()) as f64)
                } else {
                    T::one()
                };
                let gx = Tensor::from_fn(self.shape(x), |i| g.data()[map[i]] * scale);
                self.accumulate(grads, x, gx);
            }
            Op::Max { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[idx] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    self.accumulate(grads, a, Tensor::from_fn(g.shape(), |i| g.data()[i] * vb.data()[i]));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, Tensor::from_fn(g.shape(), |i| g.data()[i] * va.data()[i]));
                }
            }
            &Op::Div(a, b) => {
                let vb = self.value(b);
                if self.requires_grad(a) {
                    self.accumulate(grads, a, Tensor::from_fn(g.shape(), |i| g.data()[i] / vb.data()[i]));
                }
                if self.requires_grad(b) {
                    let gb = Tensor::from_fn(g.shape(), |i| -g.data()[i] * out.data()[i] / vb.data()[i]);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            &Op::AddScalar(x) => self.accumulate(grads, x, g.clone()),
            &Op::Relu(x) => {
                let vx = self.value(x);
                let gx = Tensor::from_fn(g.shape(), |i| {
                    if vx.data()[i] > T::zero() {
                        g.data()[i]
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, x, gx);
            }
            &Op::Exp(x) => {
                self.accumulate(grads, x, Tensor::from_fn(g.shape(), |i| g.data()[i] * out.data()[i]));
            }
            &Op::Log(x) => {
                let vx = self.value(x);
                let gx = Tensor::from_fn(g.shape(), |i| {
                    let v = vx.data()[i];
                    if v > T::guard() {
                        g.data()[i] / v
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, x, gx);
            }
            &Op::Recip(x) => {
                let gx = Tensor::from_fn(g.shape(), |i| -g.data()[i] * out.data()[i] * out.data()[i]);
                self.accumulate(grads, x, gx);
            }
            &Op::ScaleRows { x, s } => {
                let (vx, vs) = (self.value(x), self.value(s));
                let c = vx.shape()[1];
                if self.requires_grad(x) {
                    self.accumulate(grads, x, Tensor::from_fn(g.shape(), |i| g.data()[i] * vs.data()[i / c]));
                }
                if self.requires_grad(s) {
                    let gs = Tensor::from_fn(vs.shape(), |r| {
                        (0..c).map(|j| g.data()[r * c + j] * vx.data()[r * c + j]).sum()
                    });
                    self.accumulate(grads, s, gs);
                }
            }
        }
    }
}

// ---- raw kernels shared by forward and backward -------------------------

pub(crate) fn matmul_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a.data()[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b.data()[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

pub(crate) fn softmax_raw<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let m = (0..n).map(|j| d[base + j * inner]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (d[base + j * inner] - m).exp();
                d[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                d[base + j * inner] /= total;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_raw<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let m = (0..n).map(|j| d[base + j * inner]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..n).map(|j| (d[base + j * inner] - m).exp()).sum::<T>().ln();
            for j in 0..n {
                d[base + j * inner] -= lse;
            }
        }
    }
    out
}

/// Output shape and the flat output index of every input element.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::Contract(format!("reduce: axes {axes:?} out of range for {shape:?}")));
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (a, (&i, &d)) in idx.iter().zip(shape).enumerate() {
            if !axes.contains(&a) {
                o = o * d + i;
            }
        }
        map.push(o);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok((out_shape, map))
}

/// Yields `(dy, dx, ih, iw)` for every in-bounds tap of a padded 3×3 window.
#[inline]
fn taps(h: usize, w: usize, height: usize, width: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..3usize).flat_map(move |dy| {
        (0..3usize).filter_map(move |dx| {
            let ih = (h + dy).checked_sub(1)?;
            let iw = (w + dx).checked_sub(1)?;
            (ih < height && iw < width).then_some((dy, dx, ih, iw))
        })
    })
}

fn depthwise_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Tensor<T> {
    let (hh, ww, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for h in 0..hh {
        for w in 0..ww {
            let o = (h * ww + w) * c;
            for (dy, dx, ih, iw) in taps(h, w, hh, ww) {
                let xi = (ih * ww + iw) * c;
                let ki = (dy * 3 + dx) * c;
                for ch in 0..c {
                    out.data_mut()[o + ch] += x.data()[xi + ch] * k.data()[ki + ch];
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (hh, ww, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    for h in 0..hh {
        for w in 0..ww {
            let o = (h * ww + w) * c;
            for (dy, dx, ih, iw) in taps(h, w, hh, ww) {
                let xi = (ih * ww + iw) * c;
                let ki = (dy * 3 + dx) * c;
                for ch in 0..c {
                    let gv = g.data()[o + ch];
                    gx.data_mut()[xi + ch] += gv * k.data()[ki + ch];
                    gk.data_mut()[ki + ch] += gv * x.data()[xi + ch];
                }
            }
        }
    }
    (gx, gk)
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (hh, ww, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = k.shape()[3];
    let mut out = vec![T::zero(); hh * ww * cout];
    let (xd, kd) = (x.data(), k.data());
    for h in 0..hh {
        for w in 0..ww {
            let row = &mut out[(h * ww + w) * cout..(h * ww + w + 1) * cout];
            row.copy_from_slice(b.data());
            for (dy, dx, ih, iw) in taps(h, w, hh, ww) {
                let xi = (ih * ww + iw) * cin;
                let kb = (dy * 3 + dx) * cin * cout;
                for ci in 0..cin {
                    let xv = xd[xi + ci];
                    let kr = &kd[kb + ci * cout..kb + (ci + 1) * cout];
                    for (o, &kv) in row.iter_mut().zip(kr) {
                        *o += xv * kv;
                    }
                }
            }
        }
    }
    Tensor::new(&[hh, ww, cout], out).expect("conv shape")
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g: &Tensor<T>,
    want_x: bool,
    want_k: bool,
) -> ConvGrads<T> {
    let (hh, ww, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = k.shape()[3];
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gk = want_k.then(|| vec![T::zero(); k.len()]);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    for h in 0..hh {
        for w in 0..ww {
            let gr = &gd[(h * ww + w) * cout..(h * ww + w + 1) * cout];
            for (dy, dx, ih, iw) in taps(h, w, hh, ww) {
                let xi = (ih * ww + iw) * cin;
                let kb = (dy * 3 + dx) * cin * cout;
                for ci in 0..cin {
                    let krange = kb + ci * cout..kb + (ci + 1) * cout;
                    if let Some(gx) = gx.as_mut() {
                        gx[xi + ci] += gr.iter().zip(&kd[krange.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    if let Some(gk) = gk.as_mut() {
                        let xv = xd[xi + ci];
                        for (acc, &gv) in gk[krange].iter_mut().zip(gr) {
                            *acc += xv * gv;
                        }
                    }
                }
            }
        }
    }
    let gb = want_k.then(|| {
        let mut gb = vec![T::zero(); cout];
        for r in gd.chunks(cout) {
            gb.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
        }
        Tensor::new(&[cout], gb).expect("bias shape")
    });
    (
        gx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
        gk.map(|d| Tensor::new(k.shape(), d).expect("shape")),
        gb,
    )
}
