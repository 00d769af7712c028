//! 3D convolution and transposed convolution via im2col + GEMM.
//!
//! Convolution is cross-correlation (no kernel flip). Weights are laid out
//! `[C_out, C_in, k, k, k]` for `conv3d` and `[C_in, C_out, k, k, k]` for
//! `conv_transpose3d`, so the same tensor used by both gives a pair of
//! mutually adjoint linear maps.

use crate::error::{Error, Result};
use crate::volcore::{Backward, Real, Tensor, Var};

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Output extent of a strided window op: `(n_in + 2p - k) / s + 1`.
///
/// Errors unless the division is exact and the result positive.
pub fn output_extent(n_in: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 {
        return None;
    }
    let padded = n_in + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(n_in - 1) s - 2p + k`.
pub fn transposed_extent(n_in: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (n_in.checked_sub(1)?).checked_mul(stride)?.checked_add(kernel)?;
    full.checked_sub(2 * padding).filter(|&n| n > 0)
}

pub(crate) fn spatial_out(
    op: &str,
    spatial: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for axis in 0..3 {
        out[axis] = output_extent(spatial[axis], kernel, stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "{op}: {} extent {} with kernel {kernel}, stride {stride}, padding {padding} \
                 does not give an integral output size",
                AXES[axis], spatial[axis]
            ))
        })?;
    }
    Ok(out)
}

/// Sliding-window geometry between a "large" grid (conv input) and a "small"
/// grid (conv output).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geom {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
    fn out_len(&self) -> usize {
        self.output.iter().product()
    }
    fn rows(&self) -> usize {
        self.channels * self.kernel.pow(3)
    }

    /// For kernel offset `kk` along an axis, the valid output index range and
    /// the mapping `out -> in`.
    #[inline]
    fn axis_range(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        let k = kk as isize;
        // in = o*s + k - p  must lie in [0, n_in)
        let lo = ((p - k) + s - 1).div_euclid(s).clamp(0, n_out);
        let hi = ((n_in - 1 + p - k).div_euclid(s) + 1).min(n_out);
        (lo as usize, hi.max(lo) as usize)
    }

    /// `cols[rows, out_len] <- x[channels, input...]`
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plen = od * oh * ow;
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.channels {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kd in 0..k {
                let (d0, d1) = self.axis_range(0, kd);
                for kh in 0..k {
                    let (h0, h1) = self.axis_range(1, kh);
                    for kw in 0..k {
                        let (w0, w1) = self.axis_range(2, kw);
                        if w0 >= w1 {
                            continue;
                        }
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let dst = &mut cols[row * plen..(row + 1) * plen];
                        for o_d in d0..d1 {
                            let i_d = o_d * s + kd - p;
                            for o_h in h0..h1 {
                                let i_h = o_h * s + kh - p;
                                let src = &xc[(i_d * ih + i_h) * iw..];
                                let drow = &mut dst[(o_d * oh + o_h) * ow..];
                                if s == 1 {
                                    let off = w0 + kw - p;
                                    drow[w0..w1].copy_from_slice(&src[off..off + (w1 - w0)]);
                                } else {
                                    for o_w in w0..w1 {
                                        drow[o_w] = src[o_w * s + kw - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `x[channels, input...] += scatter(cols[rows, out_len])`
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plen = od * oh * ow;
        for c in 0..self.channels {
            let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for kd in 0..k {
                let (d0, d1) = self.axis_range(0, kd);
                for kh in 0..k {
                    let (h0, h1) = self.axis_range(1, kh);
                    for kw in 0..k {
                        let (w0, w1) = self.axis_range(2, kw);
                        if w0 >= w1 {
                            continue;
                        }
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let src = &cols[row * plen..(row + 1) * plen];
                        for o_d in d0..d1 {
                            let i_d = o_d * s + kd - p;
                            for o_h in h0..h1 {
                                let i_h = o_h * s + kh - p;
                                let base = (i_d * ih + i_h) * iw;
                                let srow = &src[(o_d * oh + o_h) * ow..];
                                for o_w in w0..w1 {
                                    xc[base + o_w * s + kw - p] += srow[o_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_5d(op: &'static str, x: &Tensor<impl Real>) -> Result<()> {
    if x.ndim() != 5 {
        return Err(Error::InvalidArgument(format!(
            "{op} expects [N, C, D, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn check_weight<T: Real>(
    op: &'static str,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    c_in_axis: usize,
    c_in: usize,
) -> Result<(usize, usize)> {
    let ws = w.shape();
    let cubic = ws.len() == 5 && ws[2] == ws[3] && ws[3] == ws[4];
    if !cubic || ws[c_in_axis] != c_in {
        return Err(Error::InvalidArgument(format!(
            "{op}: weight {ws:?} incompatible with {c_in} input channels"
        )));
    }
    let c_out = ws[1 - c_in_axis];
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::shape(op, &[c_out], b.shape()));
        }
    }
    Ok((c_out, ws[2]))
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], per_channel: usize) {
    for (chunk, &b) in out.chunks_mut(per_channel).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>, c: usize) -> Tensor<T> {
    let inner: usize = g.shape()[2..].iter().product();
    let mut gb = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks(inner).enumerate() {
        gb[i % c] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_parts(vec![c], gb)
}

struct Conv3dRule {
    geom: Geom,
    c_out: usize,
    has_bias: bool,
}

impl<T: Real> Backward<T> for Conv3dRule {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geom = self.geom;
        let n = x.shape()[0];
        let (rows, plen, ilen) = (geom.rows(), geom.out_len(), geom.in_len());
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut cols = vec![T::zero(); rows * plen];
        let mut dcols = vec![T::zero(); rows * plen];
        for b in 0..n {
            let xb = &x.data()[b * geom.channels * ilen..(b + 1) * geom.channels * ilen];
            let gb = &g.data()[b * self.c_out * plen..(b + 1) * self.c_out * plen];
            geom.im2col(xb, &mut cols);
            T::gemm(self.c_out, plen, rows, gb, false, &cols, true, &mut gw, true);
            T::gemm(rows, self.c_out, plen, w.data(), true, gb, false, &mut dcols, false);
            geom.col2im(&dcols, &mut gx[b * geom.channels * ilen..(b + 1) * geom.channels * ilen]);
        }
        let mut out = vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(w.shape().to_vec(), gw)),
        ];
        if self.has_bias {
            out.push(Some(bias_grad(g, self.c_out)));
        }
        out
    }
}

/// Cross-correlation of `x[N, C_in, D, H, W]` with `w[C_out, C_in, k, k, k]`.
pub fn conv3d<'t, T: Real>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let bv = bias.map(|b| b.value());
    check_5d("conv3d", &xv)?;
    let c_in = xv.shape()[1];
    let (c_out, k) = check_weight("conv3d", &wv, bv.as_deref(), 1, c_in)?;
    let spatial = &xv.shape()[2..];
    let output = spatial_out("conv3d", spatial, k, stride, padding)?;
    let geom = Geom {
        channels: c_in,
        input: [spatial[0], spatial[1], spatial[2]],
        output,
        kernel: k,
        stride,
        padding,
    };
    let n = xv.shape()[0];
    let (rows, plen, ilen) = (geom.rows(), geom.out_len(), geom.in_len());
    let mut out = vec![T::zero(); n * c_out * plen];
    let mut cols = vec![T::zero(); rows * plen];
    for b in 0..n {
        geom.im2col(&xv.data()[b * c_in * ilen..(b + 1) * c_in * ilen], &mut cols);
        T::gemm(
            c_out,
            rows,
            plen,
            wv.data(),
            false,
            &cols,
            false,
            &mut out[b * c_out * plen..(b + 1) * c_out * plen],
            false,
        );
    }
    if let Some(bv) = &bv {
        add_bias(&mut out, bv.data(), plen);
    }
    let shape = vec![n, c_out, output[0], output[1], output[2]];
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    x.tape().record(
        &inputs,
        Tensor::from_parts(shape, out),
        Conv3dRule {
            geom,
            c_out,
            has_bias: bias.is_some(),
        },
    )
}

struct ConvTranspose3dRule {
    /// Geometry of the adjoint convolution: `input` is this op's output grid.
    geom: Geom,
    c_in: usize,
    has_bias: bool,
}

impl<T: Real> Backward<T> for ConvTranspose3dRule {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geom = self.geom;
        let c_out = geom.channels;
        let n = x.shape()[0];
        let (rows, small, large) = (geom.rows(), geom.out_len(), geom.in_len());
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut cols = vec![T::zero(); rows * small];
        for b in 0..n {
            geom.im2col(&g.data()[b * c_out * large..(b + 1) * c_out * large], &mut cols);
            let xb = &x.data()[b * self.c_in * small..(b + 1) * self.c_in * small];
            T::gemm(
                self.c_in,
                rows,
                small,
                w.data(),
                false,
                &cols,
                false,
                &mut gx[b * self.c_in * small..(b + 1) * self.c_in * small],
                false,
            );
            T::gemm(self.c_in, small, rows, xb, false, &cols, true, &mut gw, true);
        }
        let mut out = vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(w.shape().to_vec(), gw)),
        ];
        if self.has_bias {
            out.push(Some(bias_grad(g, c_out)));
        }
        out
    }
}

/// Transposed convolution of `x[N, C_in, D, H, W]` with `w[C_in, C_out, k, k, k]`.
///
/// Each spatial extent becomes `(n - 1) s - 2p + k`; with `k = s = 2, p = 0`
/// that is exactly `2n`.
pub fn conv_transpose3d<'t, T: Real>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    let bv = bias.map(|b| b.value());
    check_5d("conv_transpose3d", &xv)?;
    let c_in = xv.shape()[1];
    let (c_out, k) = check_weight("conv_transpose3d", &wv, bv.as_deref(), 0, c_in)?;
    let small = [xv.shape()[2], xv.shape()[3], xv.shape()[4]];
    let mut large = [0; 3];
    for axis in 0..3 {
        large[axis] = transposed_extent(small[axis], k, stride, padding)
            .filter(|&n| output_extent(n, k, stride, padding) == Some(small[axis]))
            .ok_or_else(|| {
                Error::Config(format!(
                    "conv_transpose3d: {} extent {} with kernel {k}, stride {stride}, \
                     padding {padding} has no valid output size",
                    AXES[axis], small[axis]
                ))
            })?;
    }
    let geom = Geom {
        channels: c_out,
        input: large,
        output: small,
        kernel: k,
        stride,
        padding,
    };
    let n = xv.shape()[0];
    let (rows, slen, llen) = (geom.rows(), geom.out_len(), geom.in_len());
    let mut out = vec![T::zero(); n * c_out * llen];
    let mut cols = vec![T::zero(); rows * slen];
    for b in 0..n {
        let xb = &xv.data()[b * c_in * slen..(b + 1) * c_in * slen];
        T::gemm(rows, c_in, slen, wv.data(), true, xb, false, &mut cols, false);
        geom.col2im(&cols, &mut out[b * c_out * llen..(b + 1) * c_out * llen]);
    }
    if let Some(bv) = &bv {
        add_bias(&mut out, bv.data(), llen);
    }
    let shape = vec![n, c_out, large[0], large[1], large[2]];
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    x.tape().record(
        &inputs,
        Tensor::from_parts(shape, out),
        ConvTranspose3dRule {
            geom,
            c_in,
            has_bias: bias.is_some(),
        },
    )
}
