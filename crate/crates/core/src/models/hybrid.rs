use rand::Rng;

use crate::attention::{apply_spatial_channel, MultiHeadParams, SpatialChannelParams, DEFAULT_HEADS, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::layers::{avgpool3d, concat_channels, maxpool3d, output_extent, BatchNormParams, Conv3dParams, FcParams};
use crate::params::{Ctx, ParamStore};
use crate::volcore::{concat, Real, Reduce, Var};

/// `[C, D, H, W]` of one sample.
pub type FeatureShape = [usize; 4];

fn halve(shape: FeatureShape, channels: usize, what: &str) -> Result<FeatureShape> {
    let mut out = [channels, 0, 0, 0];
    for a in 1..4 {
        out[a] = output_extent(shape[a], 2, 2, 0).ok_or_else(|| {
            Error::Config(format!("{what}: extent {} along axis {a} of {shape:?} does not halve", shape[a]))
        })?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlockConfig {
    pub n_layers: usize,
    pub growth: usize,
}

/// `H_l = conv3(ReLU(BN(·)))` applied to the concatenation of the block
/// input and every earlier layer output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub c0: usize,
    pub growth: usize,
    layers: Vec<(BatchNormParams, Conv3dParams)>,
}

impl DenseBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c0: usize, cfg: &DenseBlockConfig, rng: &mut impl Rng) -> Self {
        let layers: Vec<_> = (0..cfg.n_layers)
            .map(|l| {
                let c_in = c0 + l * cfg.growth;
                (
                    BatchNormParams::new(store, &format!("{name}.layer{l}.bn"), c_in),
                    Conv3dParams::same3(store, &format!("{name}.layer{l}.conv"), c_in, cfg.growth, rng),
                )
            })
            .collect();
        for (l, (_, conv)) in layers.iter().enumerate() {
            assert_eq!(conv.c_in, c0 + l * cfg.growth, "dense layer {l} input channels");
            assert_eq!(conv.c_out, cfg.growth);
        }
        DenseBlock {
            c0,
            growth: cfg.growth,
            layers,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.c0 + self.layers.len() * self.growth
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_ablated(ctx, x, None)
    }

    /// Forward pass with layer `ablate`'s output zeroed in the final
    /// concatenation (later layers still consume it).
    pub fn forward_ablated<'t, T: Real>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
        ablate: Option<usize>,
    ) -> Result<Var<'t, T>> {
        if x.shape().get(1) != Some(&self.c0) {
            return Err(Error::shape("dense_block", &[self.c0], &x.shape()));
        }
        let mut features = vec![x];
        for (bn, conv) in &self.layers {
            let input = if features.len() == 1 { x } else { concat_channels(&features)? };
            features.push(conv.forward(ctx, bn.forward(ctx, input)?.relu()?)?);
        }
        if let Some(j) = ablate {
            let f = features.get_mut(j + 1).ok_or_else(|| {
                Error::InvalidArgument(format!("dense block has no layer {j} to ablate"))
            })?;
            *f = f.scale(T::zero())?;
        }
        let out = if features.len() == 1 { x } else { concat_channels(&features)? };
        debug_assert_eq!(out.shape()[1], self.out_channels());
        Ok(out)
    }
}

/// 1×1×1 convolution to `⌊θ·C⌋` channels, then 2³ average pooling.
#[derive(Clone, Debug)]
pub struct Transition {
    pub conv: Conv3dParams,
}

impl Transition {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, theta: f64, rng: &mut impl Rng) -> Result<Self> {
        let c_out = transition_channels(c, theta)?;
        Ok(Transition {
            conv: Conv3dParams::pointwise(store, &format!("{name}.conv"), c, c_out, rng),
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        avgpool3d(self.conv.forward(ctx, x)?, 2, 2)
    }
}

/// `⌊θ·C⌋`, rejecting θ outside `(0, 1]` and a zero result.
pub fn transition_channels(c: usize, theta: f64) -> Result<usize> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Config(format!("transition compression {theta} outside (0, 1]")));
    }
    let out = (theta * c as f64).floor() as usize;
    if out == 0 {
        return Err(Error::Config(format!(
            "transition compression {theta} leaves no channels out of {c}"
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBranchConfig {
    /// Layers per block; each block is followed by a transition.
    pub blocks: Vec<usize>,
    pub growth: usize,
    pub compression: f64,
}

impl Default for DenseBranchConfig {
    fn default() -> Self {
        DenseBranchConfig {
            blocks: vec![4, 4],
            growth: 8,
            compression: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseBranch {
    stages: Vec<(DenseBlock, Transition)>,
}

impl DenseBranch {
    pub fn new<T: Real>(store: &mut ParamStore<T>, c_in: usize, cfg: &DenseBranchConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut c = c_in;
        let mut stages = Vec::with_capacity(cfg.blocks.len());
        for (i, &n) in cfg.blocks.iter().enumerate() {
            let block_cfg = DenseBlockConfig {
                n_layers: n,
                growth: cfg.growth,
            };
            let block = DenseBlock::new(store, &format!("dense.block{i}"), c, &block_cfg, rng);
            let trans = Transition::new(store, &format!("dense.trans{i}"), block.out_channels(), cfg.compression, rng)?;
            c = trans.conv.c_out;
            stages.push((block, trans));
        }
        Ok(DenseBranch { stages })
    }

    pub fn trace(&self, input: FeatureShape) -> Result<Vec<FeatureShape>> {
        let mut shapes = vec![input];
        let mut s = input;
        for (block, trans) in &self.stages {
            s[0] = block.out_channels();
            shapes.push(s);
            s = halve(s, trans.conv.c_out, "dense transition")?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for (block, trans) in &self.stages {
            h = trans.forward(ctx, block.forward(ctx, h)?)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VggBranchConfig {
    /// `(convolutions, channels)` per stage.
    pub stages: Vec<(usize, usize)>,
}

impl Default for VggBranchConfig {
    fn default() -> Self {
        VggBranchConfig {
            stages: vec![(2, 16), (2, 32)],
        }
    }
}

#[derive(Clone, Debug)]
pub struct VggBranch {
    stages: Vec<Vec<Conv3dParams>>,
}

impl VggBranch {
    pub fn new<T: Real>(store: &mut ParamStore<T>, c_in: usize, cfg: &VggBranchConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.stages.len() < 2 {
            return Err(Error::Config("vgg branch needs at least two stages".into()));
        }
        let mut c = c_in;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (s, &(n, width)) in cfg.stages.iter().enumerate() {
            if n == 0 || width == 0 {
                return Err(Error::Config(format!("vgg stage {s} needs at least one convolution and channel")));
            }
            let convs: Vec<_> = (0..n)
                .map(|i| {
                    let conv = Conv3dParams::same3(store, &format!("vgg.stage{s}.conv{i}"), c, width, rng);
                    c = width;
                    conv
                })
                .collect();
            stages.push(convs);
        }
        Ok(VggBranch { stages })
    }

    pub fn trace(&self, input: FeatureShape) -> Result<Vec<FeatureShape>> {
        let mut shapes = vec![input];
        let mut s = input;
        for convs in &self.stages {
            s = halve(s, convs.last().expect("nonempty stage").c_out, "vgg max-pool")?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Receptive field edge length after each stage.
    pub fn receptive_fields(&self) -> Vec<usize> {
        let (mut rf, mut jump) = (1, 1);
        self.stages
            .iter()
            .map(|convs| {
                rf += convs.len() * 2 * jump;
                rf += jump;
                jump *= 2;
                rf
            })
            .collect()
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for convs in &self.stages {
            for conv in convs {
                h = conv.forward(ctx, h)?.relu()?;
            }
            h = maxpool3d(h, 2, 2)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig {
    /// `[C, D, H, W]` of one input sample.
    pub input: FeatureShape,
    pub dense: DenseBranchConfig,
    pub vgg: VggBranchConfig,
    /// Channels after the 1×1×1 fusion projection; token width for attention.
    pub d_model: usize,
    pub heads: usize,
    pub reduction: usize,
    pub spatial_channel: bool,
    pub n_classes: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            input: [4, 16, 32, 32],
            dense: DenseBranchConfig::default(),
            vgg: VggBranchConfig::default(),
            d_model: 32,
            heads: DEFAULT_HEADS,
            reduction: DEFAULT_REDUCTION,
            spatial_channel: true,
            n_classes: 2,
        }
    }
}

impl HybridConfig {
    /// Small enough for finite-difference checks: `[4, 4, 8, 8]` input.
    pub fn tiny() -> Self {
        HybridConfig {
            input: [4, 4, 8, 8],
            dense: DenseBranchConfig {
                blocks: vec![1, 1],
                growth: 2,
                compression: 0.5,
            },
            vgg: VggBranchConfig {
                stages: vec![(1, 4), (1, 4)],
            },
            d_model: 4,
            heads: 2,
            reduction: 2,
            spatial_channel: true,
            n_classes: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hybrid {
    pub config: HybridConfig,
    pub dense: DenseBranch,
    pub vgg: VggBranch,
    pub fuse: Conv3dParams,
    pub spatial_channel: SpatialChannelParams,
    pub mha: MultiHeadParams,
    pub classifier: FcParams,
    /// Per-sample shape after each branch stage.
    pub dense_trace: Vec<FeatureShape>,
    pub vgg_trace: Vec<FeatureShape>,
}

pub struct HybridOutput<'t, T: Real> {
    /// `[N, n_classes]`, rows summing to 1; column 0 is HGG.
    pub probs: Var<'t, T>,
    pub logits: Var<'t, T>,
    /// `[N, 1, d, h, w]` spatial mask, `None` when disabled.
    pub spatial_mask: Option<Var<'t, T>>,
    /// `[N, d_model]` channel mask, `None` when disabled.
    pub channel_mask: Option<Var<'t, T>>,
    /// Per sample, per head `[T, T]` token attention weights.
    pub token_attention: Vec<Vec<Var<'t, T>>>,
}

impl Hybrid {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: HybridConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        if config.input.contains(&0) {
            return Err(Error::Config(format!("hybrid input shape {:?} has a zero extent", config.input)));
        }
        let c_in = config.input[0];
        let dense = DenseBranch::new(store, c_in, &config.dense, rng)?;
        let vgg = VggBranch::new(store, c_in, &config.vgg, rng)?;
        let dense_trace = dense.trace(config.input)?;
        let vgg_trace = vgg.trace(config.input)?;
        let (d_out, v_out) = (dense_trace[dense_trace.len() - 1], vgg_trace[vgg_trace.len() - 1]);
        if d_out[1..] != v_out[1..] {
            return Err(Error::Config(format!(
                "branch outputs do not align spatially: dense trace {dense_trace:?}, vgg trace {vgg_trace:?}"
            )));
        }
        let fused = d_out[0] + v_out[0];
        let fuse = Conv3dParams::pointwise(store, "fuse", fused, config.d_model, rng);
        let spatial_channel = SpatialChannelParams::new(store, "sca", config.d_model, config.reduction, rng)?;
        let mha = MultiHeadParams::new(store, "mha", config.d_model, config.heads, rng)?;
        let classifier = FcParams::new(store, "classifier", config.d_model, config.n_classes, rng);
        Ok(Hybrid {
            config,
            dense,
            vgg,
            fuse,
            spatial_channel,
            mha,
            classifier,
            dense_trace,
            vgg_trace,
        })
    }

    /// `x[N, C, D, H, W]` (the masked image) to class probabilities.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<HybridOutput<'t, T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1..] != self.config.input {
            return Err(Error::InvalidArgument(format!(
                "hybrid classifier expects [N, {:?}], got {shape:?}",
                self.config.input
            )));
        }
        let n = shape[0];
        let fused = concat_channels(&[self.dense.forward(ctx, x)?, self.vgg.forward(ctx, x)?])?;
        let mut f = self.fuse.forward(ctx, fused)?;

        let (mut spatial_mask, mut channel_mask) = (None, None);
        if self.config.spatial_channel {
            let s = self.spatial_channel.spatial_mask(ctx, f)?;
            let c = self.spatial_channel.channel_mask(ctx, f)?;
            f = apply_spatial_channel(f, s, c)?;
            spatial_mask = Some(s);
            channel_mask = Some(c);
        }

        // every voxel of a sample is one token of width d_model
        let c = self.config.d_model;
        let tokens_per_sample: usize = f.shape()[2..].iter().product();
        let mut pooled = Vec::with_capacity(n);
        let mut token_attention = Vec::with_capacity(n);
        for i in 0..n {
            let tokens = f.narrow(0, i, 1)?.reshape([c, tokens_per_sample])?.transpose()?;
            let attended = self.mha.forward(ctx, tokens)?;
            pooled.push(attended.output.reduce(0, Reduce::Mean)?);
            token_attention.push(attended.weights);
        }
        let pooled = if n == 1 { pooled[0] } else { concat(&pooled, 0)? };
        let logits = self.classifier.forward(ctx, pooled)?;
        Ok(HybridOutput {
            probs: logits.softmax(1)?,
            logits,
            spatial_mask,
            channel_mask,
            token_attention,
        })
    }
}
