//! Differentiable primitives on [`Var`].
//!
//! Broadcasting is deliberately narrow: scalar-with-tensor, a per-channel
//! vector against axis 1, and a single-channel voxel mask against every
//! channel. Anything else must match shapes exactly.

use super::tape::{Backward, Var};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied before every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// `(outer, extent, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise binary

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

struct BinaryRule(BinaryOp);

impl<T: Real> Backward<T> for BinaryRule {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        match self.0 {
            BinaryOp::Add => vec![Some(g.clone()), Some(g.clone())],
            BinaryOp::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            BinaryOp::Mul => vec![
                Some(g.zip_map(inputs[1], |g, b| g * b).unwrap()),
                Some(g.zip_map(inputs[0], |g, a| g * a).unwrap()),
            ],
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise unary

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    AddScalar,
    Scale(T),
    Neg,
    Log,
    Exp,
    Sigmoid,
    Relu,
    Square,
}

impl<T: Real> Backward<T> for Unary<T> {
    fn name(&self) -> &'static str {
        match self {
            Unary::AddScalar => "add_scalar",
            Unary::Scale(_) => "scale",
            Unary::Neg => "neg",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Square => "square",
        }
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], out: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let grad = match *self {
            Unary::AddScalar => g.clone(),
            Unary::Scale(c) => g.map(|v| v * c),
            Unary::Neg => g.map(|v| -v),
            Unary::Log => {
                let floor = T::lit(LOG_CLAMP);
                g.zip_map(x, |g, x| if x > floor { g / x } else { T::zero() }).unwrap()
            }
            Unary::Exp => g.zip_map(out, |g, y| g * y).unwrap(),
            Unary::Sigmoid => g.zip_map(out, |g, s| g * s * (T::one() - s)).unwrap(),
            Unary::Relu => g.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() }).unwrap(),
            Unary::Square => g.zip_map(x, |g, x| g * (x + x)).unwrap(),
        };
        vec![Some(grad)]
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<T: Real>(q: T) -> T {
    if q >= T::zero() {
        T::one() / (T::one() + (-q).exp())
    } else {
        let e = q.exp();
        e / (T::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

struct SumAll;

impl<T: Real> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item()))]
    }
}

struct MeanAll;

impl<T: Real> Backward<T> for MeanAll {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = T::lit(inputs[0].len() as f64);
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.item() / n))]
    }
}

struct Reshape;

impl<T: Real> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g.data().to_vec()))]
    }
}

fn transpose_data<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

struct Transpose;

impl<T: Real> Backward<T> for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (r, c) = (g.shape()[0], g.shape()[1]);
        vec![Some(Tensor::from_parts(vec![c, r], transpose_data(g.data(), r, c)))]
    }
}

struct Matmul;

impl<T: Real> Backward<T> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut ga = vec![T::zero(); m * k];
        T::gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
        let mut gb = vec![T::zero(); k * n];
        T::gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
        vec![
            Some(Tensor::from_parts(vec![m, k], ga)),
            Some(Tensor::from_parts(vec![k, n], gb)),
        ]
    }
}

struct Softmax {
    axis: usize,
}

impl<T: Real> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], y: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (outer, n, inner) = split_axis(y.shape(), self.axis);
        let (yd, gd) = (y.data(), g.data());
        let mut out = vec![T::zero(); yd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let dot: T = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
                for j in 0..n {
                    let idx = base + j * inner;
                    out[idx] = yd[idx] * (gd[idx] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(y.shape().to_vec(), out))]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// Reduction over one axis keeping it as extent 1.
struct ReduceAxis {
    axis: usize,
    kind: Reduce,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for ReduceAxis {
    fn name(&self) -> &'static str {
        match self.kind {
            Reduce::Mean => "reduce_mean",
            Reduce::Max => "reduce_max",
        }
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let mut out = vec![T::zero(); x.len()];
        let gd = g.data();
        match self.kind {
            Reduce::Mean => {
                let scale = T::one() / T::lit(n as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = gd[o * inner + i] * scale;
                        for j in 0..n {
                            out[o * n * inner + j * inner + i] = gv;
                        }
                    }
                }
            }
            Reduce::Max => {
                for (slot, &src) in self.argmax.iter().enumerate() {
                    out[src] += gd[slot];
                }
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), out))]
    }
}

struct Concat {
    axis: usize,
}

impl<T: Real> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|x| {
                let n = x.shape()[self.axis];
                let part = narrow_data(g, self.axis, offset, n);
                offset += n;
                Some(part)
            })
            .collect()
    }
}

fn narrow_data<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, data)
}

fn concat_data<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let (outer, _, inner) = split_axis(parts[0].shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis];
            data.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, data)
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl<T: Real> Backward<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let len = g.shape()[self.axis];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            let dst = o * n * inner + self.start * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), out))]
    }
}

// ---------------------------------------------------------------------------
// Restricted broadcasting

/// `x[N, C, ...] + bias[C]`
struct ChannelBias;

impl<T: Real> Backward<T> for ChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (outer, c, inner) = split_axis(g.shape(), 1);
        let mut gb = vec![T::zero(); c];
        for o in 0..outer {
            for (ch, acc) in gb.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                *acc += g.data()[base..base + inner].iter().copied().sum::<T>();
            }
        }
        vec![Some(g.clone()), Some(Tensor::from_parts(inputs[1].shape().to_vec(), gb))]
    }
}

/// `x[N, C, ...] * scale[N, C]`
struct ChannelScale;

impl<T: Real> Backward<T> for ChannelScale {
    fn name(&self) -> &'static str {
        "scale_channels"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, s) = (inputs[0], inputs[1]);
        let inner = numel(&x.shape()[2..]);
        let mut gx = vec![T::zero(); x.len()];
        let mut gs = vec![T::zero(); s.len()];
        for (nc, (&sv, gsv)) in s.data().iter().zip(gs.iter_mut()).enumerate() {
            let r = nc * inner..(nc + 1) * inner;
            let mut acc = T::zero();
            for ((gxv, &gv), &xv) in gx[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&x.data()[r]) {
                *gxv = gv * sv;
                acc += gv * xv;
            }
            *gsv = acc;
        }
        vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(s.shape().to_vec(), gs)),
        ]
    }
}

/// `x[N, C, S...] * mask[N, 1, S...]`
struct VoxelGate;

impl<T: Real> Backward<T> for VoxelGate {
    fn name(&self) -> &'static str {
        "gate_voxels"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, m) = (inputs[0], inputs[1]);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let s = numel(&x.shape()[2..]);
        let mut gx = vec![T::zero(); x.len()];
        let mut gm = vec![T::zero(); m.len()];
        for b in 0..n {
            let mrow = &m.data()[b * s..(b + 1) * s];
            let gmrow = &mut gm[b * s..(b + 1) * s];
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for v in 0..s {
                    let gv = g.data()[base + v];
                    gx[base + v] = gv * mrow[v];
                    gmrow[v] += gv * x.data()[base + v];
                }
            }
        }
        vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(m.shape().to_vec(), gm)),
        ]
    }
}

// ---------------------------------------------------------------------------
// Public API

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinaryOp) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let rule = BinaryRule(op);
        if a.shape() != b.shape() {
            return Err(Error::shape(Backward::<T>::name(&rule), a.shape(), b.shape()));
        }
        let out = a
            .zip_map(&b, |x, y| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
            .expect("shapes checked");
        self.tape().record(&[self, other], out, rule)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Mul)
    }

    fn unary(self, rule: Unary<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let out = self.with_value(|x| x.map(f));
        self.tape().record(&[self], out, rule)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary(Unary::AddScalar, |x| x + c)
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.unary(Unary::Scale(c), |x| x * c)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Neg, |x| -x)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(self) -> Result<Var<'t, T>> {
        let floor = T::lit(LOG_CLAMP);
        self.unary(Unary::Log, |x| x.max(floor).ln())
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Exp, |x| x.exp())
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sigmoid, sigmoid_scalar)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Relu, |x| x.max(T::zero()))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Square, |x| x * x)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let s = self.with_value(|x| x.sum());
        self.tape().record(&[self], Tensor::scalar(s), SumAll)
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let m = self.with_value(|x| x.sum() / T::lit(x.len() as f64));
        self.tape().record(&[self], Tensor::scalar(m), MeanAll)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.with_value(|x| x.reshape(shape))?;
        self.tape().record(&[self], out, Reshape)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.with_value(|x| {
            if x.ndim() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "transpose expects a matrix, got shape {:?}",
                    x.shape()
                )));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            Ok(Tensor::from_parts(vec![c, r], transpose_data(x.data(), r, c)))
        })?;
        self.tape().record(&[self], out, Transpose)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        self.tape()
            .record(&[self, other], Tensor::from_parts(vec![m, n], c), Matmul)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.with_value(|x| {
            check_axis("softmax", x.shape(), axis)?;
            Ok::<_, Error>(softmax_data(x, axis))
        })?;
        self.tape().record(&[self], out, Softmax { axis })
    }

    /// Mean or max over `axis`, keeping it with extent 1. Max ties resolve to
    /// the first index.
    pub fn reduce(self, axis: usize, kind: Reduce) -> Result<Var<'t, T>> {
        let (out, argmax) = self.with_value(|x| {
            check_axis("reduce", x.shape(), axis)?;
            Ok::<_, Error>(reduce_data(x, axis, kind))
        })?;
        self.tape().record(&[self], out, ReduceAxis { axis, kind, argmax })
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.with_value(|x| {
            check_axis("narrow", x.shape(), axis)?;
            if len == 0 || start + len > x.shape()[axis] {
                return Err(Error::InvalidArgument(format!(
                    "narrow: range {start}..{} outside axis {axis} of {:?}",
                    start + len,
                    x.shape()
                )));
            }
            Ok(narrow_data(x, axis, start, len))
        })?;
        self.tape().record(&[self], out, Narrow { axis, start })
    }

    /// `self[N, C, ...] + bias[C]`.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        if x.ndim() < 2 || b.shape() != [x.shape()[1]] {
            return Err(Error::shape("add_channel_bias", x.shape(), b.shape()));
        }
        let (outer, c, inner) = split_axis(x.shape(), 1);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let bv = b.data()[ch];
                let base = (o * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        self.tape().record(
            &[self, bias],
            Tensor::from_parts(x.shape().to_vec(), out),
            ChannelBias,
        )
    }

    /// `self[N, C, ...] * scale[N, C]`, broadcasting each scale over its channel.
    pub fn scale_channels(self, scale: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, s) = (self.value(), scale.value());
        if x.ndim() < 2 || s.shape() != &x.shape()[..2] {
            return Err(Error::shape("scale_channels", x.shape(), s.shape()));
        }
        let inner = numel(&x.shape()[2..]);
        let mut out = x.data().to_vec();
        for (nc, &sv) in s.data().iter().enumerate() {
            out[nc * inner..(nc + 1) * inner].iter_mut().for_each(|v| *v *= sv);
        }
        self.tape().record(
            &[self, scale],
            Tensor::from_parts(x.shape().to_vec(), out),
            ChannelScale,
        )
    }

    /// `self[N, C, S...] * mask[N, 1, S...]`, broadcasting the mask over channels.
    pub fn gate_voxels(self, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, m) = (self.value(), mask.value());
        let ok = x.ndim() >= 2
            && m.ndim() == x.ndim()
            && m.shape()[0] == x.shape()[0]
            && m.shape()[1] == 1
            && m.shape()[2..] == x.shape()[2..];
        if !ok {
            return Err(Error::shape("gate_voxels", x.shape(), m.shape()));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let s = numel(&x.shape()[2..]);
        let mut out = x.data().to_vec();
        for b in 0..n {
            let mrow = &m.data()[b * s..(b + 1) * s];
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for (v, &mv) in out[base..base + s].iter_mut().zip(mrow) {
                    *v *= mv;
                }
            }
        }
        self.tape().record(
            &[self, mask],
            Tensor::from_parts(x.shape().to_vec(), out),
            VoxelGate,
        )
    }
}

/// Concatenate along `axis`; every other extent must agree.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    check_axis("concat", values[0].shape(), axis)?;
    for v in &values[1..] {
        let (a, b) = (values[0].shape(), v.shape());
        let same_rank = a.len() == b.len();
        if !same_rank || a[..axis] != b[..axis] || a[axis + 1..] != b[axis + 1..] {
            return Err(Error::shape("concat", a, b));
        }
    }
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let out = concat_data(&refs, axis);
    first.tape().record(parts, out, Concat { axis })
}

pub(crate) fn softmax_data<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n)
                .map(|j| xd[base + j * inner])
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in 0..n {
                let e = (xd[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                denom += e;
            }
            for j in 0..n {
                out[base + j * inner] /= denom;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn reduce_data<T: Real>(x: &Tensor<T>, axis: usize, kind: Reduce) -> (Tensor<T>, Vec<usize>) {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    let mut argmax = Vec::new();
    if kind == Reduce::Max {
        argmax.resize(outer * inner, 0);
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let slot = o * inner + i;
            match kind {
                Reduce::Mean => {
                    let s: T = (0..n).map(|j| xd[base + j * inner]).sum();
                    out[slot] = s / T::lit(n as f64);
                }
                Reduce::Max => {
                    let mut best = base;
                    for j in 1..n {
                        if xd[base + j * inner] > xd[best] {
                            best = base + j * inner;
                        }
                    }
                    out[slot] = xd[best];
                    argmax[slot] = best;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    (Tensor::from_parts(shape, out), argmax)
}
