use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::activation::{hhrelu_scalar, hhrelu_slope};
use crate::tensor::Tensor;

/// Gather index meaning "emit zero" (used for convolution padding).
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    Exp,
    Ln,
    Square,
    Abs,
    Powi(i32),
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Relu,
    HhRelu(f64),
    HhReluSlope(f64),
    SumAll,
    SumAxis(usize),
    MaxAxis(usize),
    Broadcast { axis: usize },
    Reshape,
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Powi(_) => "powi",
            Op::Sqrt => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Relu => "relu",
            Op::HhRelu(_) => "hhrelu",
            Op::HhReluSlope(_) => "hhrelu_slope",
            Op::SumAll => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::MaxAxis(_) => "max_axis",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape => "reshape",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
        }
    }
}

/// Tag-dispatched entry point over the primitive set.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// Inputs: image `[B,C,H,W]`, kernel `[OC,C,KH,KW]`, optional bias `[OC]`.
    Conv2d { stride: usize, padding: usize },
    AvgPool2d { kernel: usize },
    Reshape(Vec<usize>),
    Clamp { lo: f64, hi: f64 },
    Exp,
    Ln,
    Square,
    Abs,
    Powi(i32),
    Sum,
    MaxAxis(usize),
    HhRelu(f64),
    Relu,
}

impl Primitive {
    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2..=2,
            Primitive::Conv2d { .. } => 2..=3,
            _ => 1..=1,
        }
    }

    pub fn apply(&self, inputs: &[Var]) -> Result<Var> {
        if !self.arity().contains(&inputs.len()) {
            return Err(Error::Config(format!(
                "{self:?} takes {:?} inputs, got {}",
                self.arity(),
                inputs.len()
            )));
        }
        let a = &inputs[0];
        match self {
            Primitive::Add => a.add(&inputs[1]),
            Primitive::Sub => a.sub(&inputs[1]),
            Primitive::Mul => a.mul(&inputs[1]),
            Primitive::Div => a.div(&inputs[1]),
            Primitive::MatMul => a.matmul(&inputs[1]),
            Primitive::Conv2d { stride, padding } => {
                a.conv2d(&inputs[1], inputs.get(2), *stride, *padding)
            }
            Primitive::AvgPool2d { kernel } => a.avg_pool2d(*kernel),
            Primitive::Reshape(shape) => a.reshape(shape),
            Primitive::Clamp { lo, hi } => Ok(a.clamp(*lo, *hi)),
            Primitive::Exp => Ok(a.exp()),
            Primitive::Ln => Ok(a.ln()),
            Primitive::Square => Ok(a.square()),
            Primitive::Abs => Ok(a.abs()),
            Primitive::Powi(n) => Ok(a.powi(*n)),
            Primitive::Sum => Ok(a.sum()),
            Primitive::MaxAxis(axis) => a.max_axis(*axis),
            Primitive::HhRelu(d) => a.hhrelu(*d),
            Primitive::Relu => Ok(a.relu()),
        }
    }
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() < long.len() && long[long.len() - short.len()..] == *short
}

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Var {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value().map(f);
        self.graph.record(value, op, &[self])
    }

    fn binary_exact(&self, other: &Var, kind: Bin) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        let (op, value) = match kind {
            Bin::Add => (Op::Add, a.zip_map(&b, |x, y| x + y)?),
            Bin::Sub => (Op::Sub, a.zip_map(&b, |x, y| x - y)?),
            Bin::Mul => (Op::Mul, a.zip_map(&b, |x, y| x * y)?),
            Bin::Div => (Op::Div, a.zip_map(&b, |x, y| x / y)?),
        };
        Ok(self.graph.record(value, op, &[self, other]))
    }

    fn binary(&self, other: &Var, kind: Bin, name: &'static str) -> Result<Var> {
        self.ensure_same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            self.binary_exact(other, kind)
        } else if is_suffix(&sb, &sa) {
            self.binary_exact(&other.expand_to(&sa)?, kind)
        } else if is_suffix(&sa, &sb) {
            self.expand_to(&sb)?.binary_exact(other, kind)
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            })
        }
    }

    /// Elementwise sum; `other` may also match a trailing suffix of the shape.
    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Bin::Add, "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Bin::Sub, "sub")
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Bin::Mul, "mul")
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Bin::Div, "div")
    }

    /// Repeat this value over leading axes until it has shape `target`.
    pub fn expand_to(&self, target: &[usize]) -> Result<Var> {
        let shape = self.shape();
        if shape == target {
            return Ok(self.clone());
        }
        if !is_suffix(&shape, target) {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: shape,
                rhs: target.to_vec(),
            });
        }
        let lead: usize = target[..target.len() - shape.len()].iter().product();
        self.reshape(&[self.numel()])?
            .broadcast_axis(0, lead)?
            .reshape(target)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(Op::AddScalar, |v| v + c)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn square(&self) -> Var {
        self.unary(Op::Square, |v| v * v)
    }

    pub fn abs(&self) -> Var {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn powi(&self, n: i32) -> Var {
        self.unary(Op::Powi(n), |v| v.powi(n))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    /// Half-Huber ReLU; see [`crate::nn::activation`].
    pub fn hhrelu(&self, d: f64) -> Result<Var> {
        if !(d > 0.0) {
            return Err(Error::Config(format!("HHReLU requires d > 0, got {d}")));
        }
        Ok(self.unary(Op::HhRelu(d), |v| hhrelu_scalar(v, d)))
    }

    fn hhrelu_slope(&self, d: f64) -> Var {
        self.unary(Op::HhReluSlope(d), |v| hhrelu_slope(v, d))
    }

    /// Elementwise sign as a constant (zero derivative almost everywhere).
    pub fn sign(&self) -> Var {
        let v = self.value().map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.graph.constant(v)
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Var {
        let v = Tensor::scalar(self.value().sum());
        self.graph.record(v, Op::SumAll, &[self])
    }

    pub fn mean(&self) -> Var {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "sum_axis({axis}) on shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_at_axis(shape, axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(self
            .graph
            .record(Tensor::from_parts(out_shape, out), Op::SumAxis(axis), &[self]))
    }

    /// Maximum over `axis`, removing it. Ties route the gradient to the
    /// first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "max_axis({axis}) on shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_at_axis(shape, axis);
        let src = x.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let slot = &mut out[o * inner + i];
                    if src[base + i] > *slot {
                        *slot = src[base + i];
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(self
            .graph
            .record(Tensor::from_parts(out_shape, out), Op::MaxAxis(axis), &[self]))
    }

    /// Insert a new axis of length `n` at `axis`, repeating the value.
    pub fn broadcast_axis(&self, axis: usize, n: usize) -> Result<Var> {
        let x = self.value();
        let shape = x.shape();
        if axis > shape.len() || n == 0 {
            return Err(Error::InvalidShape(format!(
                "broadcast_axis({axis}, {n}) on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = x.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, n);
        Ok(self.graph.record(
            Tensor::from_parts(out_shape, out),
            Op::Broadcast { axis },
            &[self],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.record(v, Op::Reshape, &[self]))
    }

    /// Flatten everything but the leading axis.
    pub fn flatten_batch(&self) -> Result<Var> {
        let shape = self.shape();
        let b = shape.first().copied().unwrap_or(1);
        self.reshape(&[b, self.numel() / b])
    }

    /// `out[i] = self.flat[indices[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&self, indices: Rc<[usize]>, out_shape: &[usize]) -> Result<Var> {
        let x = self.value();
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::InvalidShape(format!(
                "gather of {} indices into shape {out_shape:?}",
                indices.len()
            )));
        }
        let src = x.data();
        let mut out = Vec::with_capacity(numel);
        for &i in indices.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(Error::InvalidShape(format!(
                    "gather index {i} out of range for {} elements",
                    src.len()
                )));
            }
        }
        let v = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.graph.record(v, Op::Gather(indices), &[self]))
    }

    /// Adjoint of [`Var::gather`]: `out.flat[indices[i]] += self.flat[i]`.
    pub fn scatter_add(&self, indices: Rc<[usize]>, out_shape: &[usize]) -> Result<Var> {
        let x = self.value();
        if x.numel() != indices.len() {
            return Err(Error::InvalidShape(format!(
                "scatter of {} values with {} indices",
                x.numel(),
                indices.len()
            )));
        }
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        for (&i, &v) in indices.iter().zip(x.data()) {
            if i == GATHER_ZERO {
                continue;
            }
            *out.get_mut(i).ok_or_else(|| {
                Error::InvalidShape(format!("scatter index {i} out of range for {numel}"))
            })? += v;
        }
        let v = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.graph.record(v, Op::ScatterAdd(indices), &[self]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.ensure_same_graph(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(a.data(), b.data(), m, k, n);
        Ok(self
            .graph
            .record(Tensor::from_parts(vec![m, n], out), Op::MatMul, &[self, other]))
    }

    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self
            .graph
            .record(Tensor::from_parts(vec![n, m], out), Op::Transpose, &[self]))
    }

    /// Direct 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `self`: `[B,C,H,W]`, `kernel`: `[OC,C,KH,KW]`, `bias`: `[OC]`.
    /// Built from a patch gather and a matrix product so that every piece
    /// stays differentiable to any order.
    pub fn conv2d(
        &self,
        kernel: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidShape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let patch = c * kh * kw;
        let mut idx = Vec::with_capacity(b * oh * ow * patch);
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    idx.push(GATHER_ZERO);
                                } else {
                                    idx.push(((bi * c + ci) * h + iy as usize) * w + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
        let cols = self.gather(idx.into(), &[b * oh * ow, patch])?;
        let kmat = kernel.reshape(&[oc, patch])?.transpose()?;
        let mut rows = cols.matmul(&kmat)?;
        if let Some(bias) = bias {
            if bias.shape() != [oc] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![oc],
                    rhs: bias.shape(),
                });
            }
            rows = rows.add(bias)?;
        }
        // rows is [B*OH*OW, OC]; reorder to [B, OC, OH, OW].
        let mut perm = Vec::with_capacity(b * oc * oh * ow);
        for bi in 0..b {
            for o in 0..oc {
                for p in 0..oh * ow {
                    perm.push((bi * oh * ow + p) * oc + o);
                }
            }
        }
        rows.gather(perm.into(), &[b, oc, oh, ow])
    }

    /// Non-overlapping average pooling with a square window (stride = kernel).
    pub fn avg_pool2d(&self, kernel: usize) -> Result<Var> {
        let xs = self.shape();
        if xs.len() != 4 || kernel == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::InvalidShape(format!(
                "avg_pool2d({kernel}) on shape {xs:?}"
            )));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / kernel, w / kernel);
        let mut idx = Vec::with_capacity(b * c * oh * ow * kernel * kernel);
        for plane in 0..b * c {
            for y in 0..oh {
                for x in 0..ow {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            idx.push((plane * h + y * kernel + ky) * w + x * kernel + kx);
                        }
                    }
                }
            }
        }
        let windows = self.gather(idx.into(), &[b, c, oh, ow, kernel * kernel])?;
        Ok(windows.sum_axis(4)?.scale(1.0 / (kernel * kernel) as f64))
    }
}

fn mask_like(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

/// Vector-Jacobian products, expressed with recorded operations.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Var],
    out: &Var,
    g: &Var,
    needs: &[bool],
) -> Result<Vec<Option<Var>>> {
    let graph: &Graph = out.graph();
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |v: Result<Var>| -> Result<Vec<Option<Var>>> { Ok(vec![Some(v?)]) };
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        Op::Sub => Ok(vec![Some(g.clone()), need(1).then(|| g.neg())]),
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let ga = if need(0) { Some(g.mul(b)?) } else { None };
            let gb = if need(1) { Some(g.mul(a)?) } else { None };
            Ok(vec![ga, gb])
        }
        Op::Div => {
            let b = &inputs[1];
            let ga = if need(0) { Some(g.div(b)?) } else { None };
            let gb = if need(1) {
                Some(g.mul(out)?.div(b)?.neg())
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Neg => one(Ok(g.neg())),
        Op::Scale(c) => one(Ok(g.scale(*c))),
        Op::AddScalar => one(Ok(g.clone())),
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let ga = if need(0) {
                Some(g.matmul(&b.transpose()?)?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(a.transpose()?.matmul(g)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Transpose => one(g.transpose()),
        Op::Exp => one(g.mul(out)),
        Op::Ln => one(g.div(&inputs[0])),
        Op::Square => one(g.mul(&inputs[0]).map(|v| v.scale(2.0))),
        Op::Abs => one(g.mul(&inputs[0].sign())),
        Op::Powi(n) => {
            if *n == 0 {
                one(Ok(graph.constant(Tensor::zeros(&inputs[0].shape()))))
            } else {
                one(g.mul(&inputs[0].powi(n - 1)).map(|v| v.scale(*n as f64)))
            }
        }
        Op::Sqrt => one(g.div(out).map(|v| v.scale(0.5))),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            let m = mask_like(&inputs[0].value(), |v| {
                if v >= lo && v <= hi {
                    1.0
                } else {
                    0.0
                }
            });
            one(g.mul(&graph.constant(m)))
        }
        Op::Relu => {
            let m = mask_like(&inputs[0].value(), |v| if v > 0.0 { 1.0 } else { 0.0 });
            one(g.mul(&graph.constant(m)))
        }
        Op::HhRelu(d) => one(g.mul(&inputs[0].hhrelu_slope(*d))),
        Op::HhReluSlope(d) => {
            let d = *d;
            let knee = 1.0 / (2.0 * d);
            let m = mask_like(&inputs[0].value(), |v| {
                if (0.0..knee).contains(&v) {
                    2.0 * d
                } else {
                    0.0
                }
            });
            one(g.mul(&graph.constant(m)))
        }
        Op::SumAll => {
            let shape = inputs[0].shape();
            let n = inputs[0].numel();
            one(g.broadcast_axis(0, n).and_then(|v| v.reshape(&shape)))
        }
        Op::SumAxis(axis) => {
            let n = inputs[0].shape()[*axis];
            one(g.broadcast_axis(*axis, n))
        }
        Op::MaxAxis(axis) => {
            let x = inputs[0].value();
            let (outer, n, inner) = split_at_axis(x.shape(), *axis);
            let src = x.data();
            let mut mask = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0;
                    for k in 1..n {
                        if src[(o * n + k) * inner + i] > src[(o * n + best) * inner + i] {
                            best = k;
                        }
                    }
                    mask[(o * n + best) * inner + i] = 1.0;
                }
            }
            let m = graph.constant(Tensor::from_parts(x.shape().to_vec(), mask));
            one(g.broadcast_axis(*axis, n).and_then(|v| v.mul(&m)))
        }
        Op::Broadcast { axis, .. } => one(g.sum_axis(*axis)),
        Op::Reshape => one(g.reshape(&inputs[0].shape())),
        Op::Gather(idx) => one(g.scatter_add(idx.clone(), &inputs[0].shape())),
        Op::ScatterAdd(idx) => one(g.gather(idx.clone(), &inputs[0].shape())),
    }
}
