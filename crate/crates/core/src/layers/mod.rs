//! Layer kernels and their parameter records.
//!
//! All volumetric kernels operate on batched tensors `[N, C, D, H, W]`.

mod conv;
mod norm;
mod pool;

pub use conv::{conv3d, conv_transpose3d, output_extent, transposed_extent};
pub use norm::{batchnorm, BatchStats};
pub use pool::{avgpool3d, maxpool3d};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::volcore::{concat, Real, Reduce, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

pub fn relu<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.relu()
}

/// `[N, C, D, H, W] -> [N, C]`, mean over all voxels of each channel.
pub fn global_avg_pool3d<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "global_avg_pool3d expects [N, C, D, H, W], got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let voxels: usize = shape[2..].iter().product();
    x.reshape([n, c, voxels])?.reduce(2, Reduce::Mean)?.reshape([n, c])
}

/// Channel-axis concatenation in argument order; spatial extents must match.
pub fn concat_channels<'t, T: Real>(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    concat(xs, 1)
}

/// Inverse of [`concat_channels`] for the given channel counts.
pub fn split_channels<'t, T: Real>(x: Var<'t, T>, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
    let total: usize = sizes.iter().sum();
    if x.shape().get(1) != Some(&total) {
        return Err(Error::shape("split_channels", &x.shape(), &[total]));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = x.narrow(1, start, len);
            start += len;
            part
        })
        .collect()
}

/// `x[N, n_in] · Wᵀ + b` with `W[n_out, n_in]`.
pub fn fully_connected<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("fully_connected", &xs, &ws));
    }
    x.matmul(w.transpose()?)?.add_channel_bias(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Transposed,
}

/// Convolution parameters. Weight layout is `[C_out, C_in, k, k, k]` for
/// standard and `[C_in, C_out, k, k, k]` for transposed convolutions.
#[derive(Clone, Debug)]
pub struct Conv3dParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub kind: ConvKind,
}

impl Conv3dParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1 && c_in >= 1 && c_out >= 1);
        let k3 = kernel.pow(3);
        let weight = store.add_fan_in_uniform(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel, kernel],
            c_in * k3,
            rng,
        );
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros([c_out]));
        Conv3dParams {
            weight,
            bias: Some(bias),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            kind: ConvKind::Standard,
        }
    }

    /// 3³ kernel, stride 1, padding 1: shape preserving.
    pub fn same3<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    /// 1×1×1 kernel.
    pub fn pointwise<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, c_in, c_out, 1, 1, 0, rng)
    }

    pub fn transposed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output voxel sees ceil(k/s)^3 kernel taps per input channel
        let taps = kernel.div_ceil(stride).pow(3);
        let weight = store.add_fan_in_uniform(
            format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel, kernel],
            c_in * taps,
            rng,
        );
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros([c_out]));
        Conv3dParams {
            weight,
            bias: Some(bias),
            c_in,
            c_out,
            kernel,
            stride,
            padding: 0,
            kind: ConvKind::Transposed,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        match self.kind {
            ConvKind::Standard => conv3d(x, w, b, self.stride, self.padding),
            ConvKind::Transposed => conv_transpose3d(x, w, b, self.stride, self.padding),
        }
    }

    /// Spatial output extent for an input extent, or `None` when the
    /// configuration does not produce an integral size.
    pub fn out_extent(&self, n_in: usize) -> Option<usize> {
        match self.kind {
            ConvKind::Standard => output_extent(n_in, self.kernel, self.stride, self.padding),
            ConvKind::Transposed => transposed_extent(n_in, self.kernel, self.stride, self.padding),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNormParams {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Normalizes `x`; in train mode also queues the running-statistic
    /// update `r ← momentum·r + (1 − momentum)·batch` on the context.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (rm, rv) = (ctx.buffer(self.running_mean), ctx.buffer(self.running_var));
        let (y, stats) = batchnorm(
            x,
            ctx.param(self.gamma),
            ctx.param(self.beta),
            rm,
            rv,
            T::lit(self.eps),
            ctx.mode(),
        )?;
        if let Some(stats) = stats {
            debug_assert_eq!(ctx.mode(), Mode::Train);
            let mom = T::lit(self.momentum);
            let blend = |old: &Tensor<T>, new: &[T]| {
                Tensor::from_fn(old.shape().to_vec(), |i| mom * old.data()[i] + (T::one() - mom) * new[i])
            };
            ctx.push_buffer_update(self.running_mean, blend(rm, &stats.mean));
            ctx.push_buffer_update(self.running_var, blend(rv, &stats.var_unbiased));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct FcParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl FcParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        assert!(n_in >= 1 && n_out >= 1);
        FcParams {
            weight: store.add_fan_in_uniform(format!("{name}.weight"), &[n_out, n_in], n_in, rng),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros([n_out])),
            n_in,
            n_out,
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        fully_connected(x, ctx.param(self.weight), ctx.param(self.bias))
    }
}
