use rand::Rng;

use crate::attention::AdditiveAttnParams;
use crate::error::{Error, Result};
use crate::layers::{concat_channels, maxpool3d, Conv3dParams};
use crate::params::{Ctx, ParamStore};
use crate::volcore::{Real, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Encoder levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Gate every skip connection with soft additive attention.
    pub attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 4,
            out_channels: 1,
            attention: true,
        }
    }
}

impl UNetConfig {
    /// The five-level, 64-channel layout with 23 convolutions.
    pub fn full() -> Self {
        UNetConfig {
            depth: 5,
            base_channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("unet depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("unet channel counts must be positive".into()));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("unet depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    /// Channels at encoder level `l`: `base · 2^l`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must halve cleanly `depth − 1` times.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let factor = 1usize << (self.depth - 1);
        for (axis, &n) in ["depth", "height", "width"].iter().zip(&dims) {
            if n == 0 || n % factor != 0 {
                return Err(Error::Config(format!(
                    "unet input {axis} {n} is not divisible by 2^{} = {factor}",
                    self.depth - 1
                )));
            }
        }
        Ok(())
    }

    /// Two per encoder level, one up-convolution and two per decoder level,
    /// plus the final 1×1×1 projection.
    pub fn conv_count(&self) -> usize {
        2 * self.depth + 3 * (self.depth - 1) + 1
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv3dParams,
    gate: Option<AdditiveAttnParams>,
    conv_a: Conv3dParams,
    conv_b: Conv3dParams,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    encoder: Vec<(Conv3dParams, Conv3dParams)>,
    /// Ordered from the deepest decoder level to the shallowest.
    decoder: Vec<DecoderLevel>,
    head: Conv3dParams,
}

/// Values produced alongside the segmentation.
pub struct UNetOutput<'t, T: Real> {
    /// `[N, out, D, H, W]` probabilities.
    pub prob: Var<'t, T>,
    /// Attention masks per decoder level, shallowest first.
    pub attention: Vec<Var<'t, T>>,
}

impl UNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = |l| config.level_channels(l);
        let mut encoder = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let c_in = if l == 0 { config.in_channels } else { c(l - 1) };
            let a = Conv3dParams::same3(store, &format!("unet.enc{l}.conv_a"), c_in, c(l), rng);
            let b = Conv3dParams::same3(store, &format!("unet.enc{l}.conv_b"), c(l), c(l), rng);
            encoder.push((a, b));
        }
        let mut decoder = Vec::with_capacity(config.depth - 1);
        for l in (0..config.depth - 1).rev() {
            let name = format!("unet.dec{l}");
            let up = Conv3dParams::transposed(store, &format!("{name}.up"), c(l + 1), c(l), 2, 2, rng);
            let gate = config
                .attention
                .then(|| AdditiveAttnParams::new(store, &format!("{name}.gate"), c(l), rng));
            let conv_a = Conv3dParams::same3(store, &format!("{name}.conv_a"), 2 * c(l), c(l), rng);
            let conv_b = Conv3dParams::same3(store, &format!("{name}.conv_b"), c(l), c(l), rng);
            decoder.push(DecoderLevel {
                up,
                gate,
                conv_a,
                conv_b,
            });
        }
        let head = Conv3dParams::pointwise(store, "unet.head", c(0), config.out_channels, rng);
        let net = UNet {
            config,
            encoder,
            decoder,
            head,
        };
        net.assert_channel_plan();
        Ok(net)
    }

    /// Channel bookkeeping: doubling per encoder level, halving per decoder
    /// level, skip concatenation doubling the decoder input.
    fn assert_channel_plan(&self) {
        let cfg = &self.config;
        for (l, (a, b)) in self.encoder.iter().enumerate() {
            let expected_in = if l == 0 { cfg.in_channels } else { cfg.base_channels << (l - 1) };
            assert_eq!(a.c_in, expected_in, "encoder level {l} input channels");
            assert_eq!(a.c_out, cfg.base_channels << l, "encoder level {l} width");
            assert_eq!((b.c_in, b.c_out), (a.c_out, a.c_out));
        }
        for (i, d) in self.decoder.iter().enumerate() {
            let l = cfg.depth - 2 - i;
            let width = cfg.base_channels << l;
            assert_eq!((d.up.c_in, d.up.c_out), (2 * width, width), "decoder level {l} up-convolution");
            assert_eq!((d.conv_a.c_in, d.conv_a.c_out), (2 * width, width), "decoder level {l} skip merge");
            assert_eq!((d.conv_b.c_in, d.conv_b.c_out), (width, width));
        }
        assert_eq!(self.head.c_in, cfg.base_channels);
        assert_eq!(self.conv_count(), cfg.conv_count());
    }

    /// Sets the head bias so the untrained network predicts foreground with
    /// probability `prior` everywhere. Starting from the class frequency keeps
    /// the first updates from driving every activation toward background.
    pub fn set_output_prior<T: Real>(&self, store: &mut ParamStore<T>, prior: f64) -> Result<()> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::InvalidArgument(format!("output prior must be in (0, 1), got {prior}")));
        }
        let bias = self.head.bias.expect("head has a bias");
        let logit = (prior / (1.0 - prior)).ln();
        store.value_mut(bias).data_mut().fill(T::lit(logit));
        Ok(())
    }

    pub fn conv_count(&self) -> usize {
        2 * self.encoder.len() + 3 * self.decoder.len() + 1
    }

    /// Encoder output channels per level.
    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoder.iter().map(|(a, _)| a.c_out).collect()
    }

    /// `x[N, in, D, H, W] -> [N, out, D, H, W]` probabilities.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<UNetOutput<'t, T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "unet expects [N, {}, D, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.check_input([shape[2], shape[3], shape[4]])?;

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (l, (a, b)) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = maxpool3d(h, 2, 2)?;
            }
            h = b.forward(ctx, a.forward(ctx, h)?.relu()?)?.relu()?;
            skips.push(h);
        }
        skips.pop();
        let mut masks = Vec::with_capacity(self.decoder.len());
        for level in &self.decoder {
            let up = level.up.forward(ctx, h)?;
            let mut skip = skips.pop().expect("one skip per decoder level");
            if let Some(gate) = &level.gate {
                let (gated, mask) = gate.forward(ctx, skip)?;
                skip = gated;
                masks.push(mask);
            }
            let merged = concat_channels(&[skip, up])?;
            h = level.conv_b.forward(ctx, level.conv_a.forward(ctx, merged)?.relu()?)?.relu()?;
        }
        masks.reverse();
        Ok(UNetOutput {
            prob: self.head.forward(ctx, h)?.sigmoid()?,
            attention: masks,
        })
    }
}
