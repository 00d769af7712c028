//! Batched inference without gradient tracking.

use super::{mask_and_feed, Checkpoint, Handoff, HandoffMode, Hybrid, UNet, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamStore};
use crate::preprocess::Volume;
use crate::volcore::{Tape, Tensor};

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack: no tensors".into()))?;
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Splits the leading axis back into per-sample tensors.
pub fn unstack(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let n = t.shape()[0];
    let inner = t.shape()[1..].to_vec();
    let len = t.len() / n.max(1);
    t.data()
        .chunks(len.max(1))
        .take(n)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

/// Tumor probabilities `[1, D, H, W]` per image, `batch` images at a time.
pub fn segment(net: &UNet, store: &ParamStore<f32>, images: &[&Tensor<f32>], batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Eval, false);
        let prob = net.forward(&ctx, ctx.input(stack(chunk)?))?.prob;
        out.extend(unstack(&prob.value()));
    }
    Ok(out)
}

/// Class probabilities per input, column 0 being HGG.
pub fn classify(net: &Hybrid, store: &ParamStore<f32>, inputs: &[&Tensor<f32>], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Eval, false);
        let probs = net.forward(&ctx, ctx.input(stack(chunk)?))?.probs.value();
        let c = probs.shape()[1];
        out.extend(probs.data().chunks(c).map(|row| row.iter().map(|&p| p as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Index of the largest probability; ties go to the lower class index.
pub fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

/// A trained segmenter held fixed while it feeds the classifier.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub net: UNet,
    pub store: ParamStore<f32>,
    pub threshold: f32,
    pub mode: HandoffMode,
}

impl Segmenter {
    pub fn new(net: UNet, store: ParamStore<f32>) -> Self {
        Segmenter {
            net,
            store,
            threshold: DEFAULT_THRESHOLD,
            mode: HandoffMode::default(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (net, store) = ckpt.load_unet()?;
        Ok(Segmenter::new(net, store))
    }

    /// Segments each image and restricts it to the predicted region.
    pub fn handoff(&self, images: &[&Volume], batch: usize) -> Result<Vec<Handoff>> {
        let tensors: Vec<_> = images.iter().map(|v| v.tensor()).collect();
        let probs = segment(&self.net, &self.store, &tensors, batch)?;
        images
            .iter()
            .zip(&probs)
            .map(|(img, p)| mask_and_feed(img, p, self.threshold, self.mode))
            .collect()
    }
}
