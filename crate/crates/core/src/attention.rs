//! Attention mechanisms: soft additive voxel gating for the segmenter, and
//! spatial, channel and multi-head self-attention for the classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{conv3d, fully_connected, Conv3dParams, FcParams};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::volcore::{concat, Real, Reduce, Var};

pub const DEFAULT_HEADS: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;
pub const DEFAULT_REDUCTION: usize = 4;

/// `mask = σ(W · f)` per voxel, `attended = mask ⊙ f`.
#[derive(Clone, Debug)]
pub struct AdditiveAttnParams {
    pub proj: Conv3dParams,
}

impl AdditiveAttnParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        AdditiveAttnParams {
            proj: Conv3dParams::pointwise(store, &format!("{name}.proj"), channels, 1, rng),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, f: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        soft_additive_attention(
            f,
            ctx.param(self.proj.weight),
            self.proj.bias.map(|b| ctx.param(b)),
        )
    }
}

/// Returns `(attended, mask)` with `mask` of shape `[N, 1, D, H, W]`.
pub fn soft_additive_attention<'t, T: Real>(
    f: Var<'t, T>,
    w: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let mask = conv3d(f, w, bias, 1, 0)?.sigmoid()?;
    Ok((f.gate_voxels(mask)?, mask))
}

/// Per-head query/key/value projections and the shared output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
}

impl MultiHeadParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "multi-head attention: d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let mut proj = |kind: &str, h: usize, rng: &mut _| {
            store.add_fan_in_uniform(format!("{name}.{kind}{h}"), &[d_model, d_k], d_model, rng)
        };
        let w_q = (0..heads).map(|h| proj("w_q", h, rng)).collect();
        let w_k = (0..heads).map(|h| proj("w_k", h, rng)).collect();
        let w_v = (0..heads).map(|h| proj("w_v", h, rng)).collect();
        let w_o = store.add_fan_in_uniform(format!("{name}.w_o"), &[heads * d_k, d_model], heads * d_k, rng);
        Ok(MultiHeadParams {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
            d_k,
            d_model,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, tokens: Var<'t, T>) -> Result<MultiHeadOutput<'t, T>> {
        let heads: Vec<HeadWeights<'t, T>> = (0..self.heads)
            .map(|h| HeadWeights {
                w_q: ctx.param(self.w_q[h]),
                w_k: ctx.param(self.w_k[h]),
                w_v: ctx.param(self.w_v[h]),
            })
            .collect();
        multi_head_attention(tokens, &heads, ctx.param(self.w_o))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights<'t, T: Real> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
}

pub struct MultiHeadOutput<'t, T: Real> {
    /// `[T, d_model]`
    pub output: Var<'t, T>,
    /// Attention weights per head, each `[T, T]` with rows summing to 1.
    pub weights: Vec<Var<'t, T>>,
    /// Pre-softmax logits `QKᵀ/√d_k` per head.
    pub logits: Vec<Var<'t, T>>,
}

/// Self-attention over `tokens[T, d_model]` (queries, keys and values are all
/// the tokens): per head `softmax(X W_q (X W_k)ᵀ / √d_k) X W_v`, heads
/// concatenated and projected by `w_o`.
pub fn multi_head_attention<'t, T: Real>(
    tokens: Var<'t, T>,
    heads: &[HeadWeights<'t, T>],
    w_o: Var<'t, T>,
) -> Result<MultiHeadOutput<'t, T>> {
    let shape = tokens.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "multi_head_attention expects tokens [T, d_model], got {shape:?}"
        )));
    }
    if heads.is_empty() {
        return Err(Error::Config("multi_head_attention needs at least one head".into()));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    let mut logits_all = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tokens.matmul(head.w_q)?;
        let k = tokens.matmul(head.w_k)?;
        let v = tokens.matmul(head.w_v)?;
        let d_k = q.shape()[1];
        let logits = q.matmul(k.transpose()?)?.scale(T::one() / T::lit(d_k as f64).sqrt())?;
        let attn = logits.softmax(1)?;
        outs.push(attn.matmul(v)?);
        weights.push(attn);
        logits_all.push(logits);
    }
    let merged = if outs.len() == 1 { outs[0] } else { concat(&outs, 1)? };
    Ok(MultiHeadOutput {
        output: merged.matmul(w_o)?,
        weights,
        logits: logits_all,
    })
}

/// Spatial mask `σ(conv(max_c F + mean_c F))` and channel mask
/// `σ(W₂ ReLU(W₁ (mean_s F + max_s F)))`.
#[derive(Clone, Debug)]
pub struct SpatialChannelParams {
    pub spatial: Conv3dParams,
    pub fc1: FcParams,
    pub fc2: FcParams,
    pub reduction: usize,
}

impl SpatialChannelParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let pad = SPATIAL_KERNEL / 2;
        Ok(SpatialChannelParams {
            spatial: Conv3dParams::new(store, &format!("{name}.spatial"), 1, 1, SPATIAL_KERNEL, 1, pad, rng),
            fc1: FcParams::new(store, &format!("{name}.fc1"), channels, channels / reduction, rng),
            fc2: FcParams::new(store, &format!("{name}.fc2"), channels / reduction, channels, rng),
            reduction,
        })
    }

    pub fn spatial_mask<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        spatial_attention(
            f,
            ctx.param(self.spatial.weight),
            self.spatial.bias.map(|b| ctx.param(b)),
        )
    }

    pub fn channel_mask<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        channel_attention(
            f,
            [ctx.param(self.fc1.weight), ctx.param(self.fc1.bias)],
            [ctx.param(self.fc2.weight), ctx.param(self.fc2.bias)],
        )
    }
}

/// `[N, C, D, H, W] -> [N, 1, D, H, W]` mask in `[0, 1]`.
pub fn spatial_attention<'t, T: Real>(
    f: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let pooled = f.reduce(1, Reduce::Max)?.add(f.reduce(1, Reduce::Mean)?)?;
    let pad = kernel.shape()[2] / 2;
    conv3d(pooled, kernel, bias, 1, pad)?.sigmoid()
}

/// `[N, C, D, H, W] -> [N, C]` mask in `[0, 1]`. `fc1 = [W₁, b₁]`, `fc2 = [W₂, b₂]`.
pub fn channel_attention<'t, T: Real>(
    f: Var<'t, T>,
    fc1: [Var<'t, T>; 2],
    fc2: [Var<'t, T>; 2],
) -> Result<Var<'t, T>> {
    let shape = f.shape();
    if shape.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "channel_attention expects [N, C, D, H, W], got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let hidden = fc1[0].shape()[0];
    if hidden == 0 || c % hidden != 0 {
        return Err(Error::Config(format!(
            "channel attention: {c} channels not divisible into a bottleneck of {hidden}"
        )));
    }
    let flat = f.reshape([n, c, shape[2..].iter().product()])?;
    let pooled = flat
        .reduce(2, Reduce::Mean)?
        .add(flat.reduce(2, Reduce::Max)?)?
        .reshape([n, c])?;
    let hidden = fully_connected(pooled, fc1[0], fc1[1])?.relu()?;
    fully_connected(hidden, fc2[0], fc2[1])?.sigmoid()
}

/// `F_refined = (A_spatial ⊙ A_channel) ⊙ F`.
pub fn apply_spatial_channel<'t, T: Real>(
    f: Var<'t, T>,
    spatial: Var<'t, T>,
    channel: Var<'t, T>,
) -> Result<Var<'t, T>> {
    f.scale_channels(channel)?.gate_voxels(spatial)
}

#[cfg(test)]
mod tests;
