use super::conv::spatial_out;
use crate::error::{Error, Result};
use crate::volcore::{Backward, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PoolKind {
    Max,
    Avg,
}

struct PoolRule {
    kind: PoolKind,
    window: usize,
    /// Flat source index of each output (max pooling only).
    argmax: Vec<usize>,
    /// Flat source indices covered by each output window, in scan order.
    windows: Vec<usize>,
}

impl<T: Real> Backward<T> for PoolRule {
    fn name(&self) -> &'static str {
        match self.kind {
            PoolKind::Max => "maxpool3d",
            PoolKind::Avg => "avgpool3d",
        }
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let mut gx = vec![T::zero(); x.len()];
        match self.kind {
            PoolKind::Max => {
                for (&src, &gv) in self.argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
            }
            PoolKind::Avg => {
                let scale = T::one() / T::lit(self.window as f64);
                for (win, &gv) in self.windows.chunks(self.window).zip(g.data()) {
                    for &src in win {
                        gx[src] += gv * scale;
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
    }
}

fn pool<'t, T: Real>(x: Var<'t, T>, kernel: usize, stride: usize, kind: PoolKind) -> Result<Var<'t, T>> {
    let xv = x.value();
    let name = match kind {
        PoolKind::Max => "maxpool3d",
        PoolKind::Avg => "avgpool3d",
    };
    if xv.ndim() != 5 {
        return Err(Error::InvalidArgument(format!(
            "{name} expects [N, C, D, H, W], got {:?}",
            xv.shape()
        )));
    }
    let [n, c, d, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3], xv.shape()[4]];
    let [od, oh, ow] = spatial_out(name, &xv.shape()[2..], kernel, stride, 0)?;
    let window = kernel.pow(3);
    let outputs = n * c * od * oh * ow;
    let mut out = Vec::with_capacity(outputs);
    let mut argmax = Vec::new();
    let mut windows = Vec::new();
    match kind {
        PoolKind::Max => argmax.reserve(outputs),
        PoolKind::Avg => windows.reserve(outputs * window),
    }
    let xd = xv.data();
    let mut scratch = Vec::with_capacity(window);
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    scratch.clear();
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let (i, j, l) = (zd * stride + kd, zh * stride + kh, zw * stride + kw);
                                scratch.push(base + (i * h + j) * w + l);
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            let mut best = scratch[0];
                            for &idx in &scratch[1..] {
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                            out.push(xd[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let s: T = scratch.iter().map(|&i| xd[i]).sum();
                            out.push(s / T::lit(window as f64));
                            windows.extend_from_slice(&scratch);
                        }
                    }
                }
            }
        }
    }
    x.tape().record(
        &[x],
        Tensor::from_parts(vec![n, c, od, oh, ow], out),
        PoolRule {
            kind,
            window,
            argmax,
            windows,
        },
    )
}

/// Window maximum; the gradient goes to the first maximal voxel in scan order.
pub fn maxpool3d<'t, T: Real>(x: Var<'t, T>, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
    pool(x, kernel, stride, PoolKind::Max)
}

pub fn avgpool3d<'t, T: Real>(x: Var<'t, T>, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
    pool(x, kernel, stride, PoolKind::Avg)
}
