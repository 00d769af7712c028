use crate::error::{Error, Result};
use crate::preprocess::Volume;
use crate::volcore::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// How the thresholded segmentation restricts the classifier input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HandoffMode {
    /// Keep only voxels inside the mask.
    #[default]
    Mask,
    /// Keep every voxel inside the mask's bounding box.
    BoundingBox,
}

impl std::str::FromStr for HandoffMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(HandoffMode::Mask),
            "bbox" => Ok(HandoffMode::BoundingBox),
            _ => Err(Error::Config(format!("unknown handoff mode `{s}` (expected mask or bbox)"))),
        }
    }
}

impl std::fmt::Display for HandoffMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HandoffMode::Mask => "mask",
            HandoffMode::BoundingBox => "bbox",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Handoff {
    /// `[C, D, H, W]` classifier input.
    pub input: Tensor<f32>,
    /// Binary `[1, D, H, W]` region that was kept.
    pub region: Tensor<f32>,
    /// The thresholded mask was empty, so the unmasked image was passed on.
    pub fallback: bool,
}

/// Thresholds `seg_prob[1, D, H, W]` at `tau` (`p ≥ τ` is tumor) and
/// multiplies every image channel by the resulting region.
pub fn mask_and_feed(image: &Volume, seg_prob: &Tensor<f32>, tau: f32, mode: HandoffMode) -> Result<Handoff> {
    let [d, h, w] = image.dims();
    if seg_prob.shape() != [1, d, h, w] {
        return Err(Error::shape("mask_and_feed", image.shape(), seg_prob.shape()));
    }
    let n = d * h * w;
    let mut region: Vec<f32> = seg_prob.data().iter().map(|&p| if p >= tau { 1.0 } else { 0.0 }).collect();
    if !region.contains(&1.0) {
        return Ok(Handoff {
            input: image.tensor().clone(),
            region: Tensor::ones([1, d, h, w]),
            fallback: true,
        });
    }
    if mode == HandoffMode::BoundingBox {
        let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
        for (i, _) in region.iter().enumerate().filter(|(_, &r)| r == 1.0) {
            let p = [i / (h * w), (i / w) % h, i % w];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for (i, r) in region.iter_mut().enumerate() {
            let p = [i / (h * w), (i / w) % h, i % w];
            *r = if (0..3).all(|a| lo[a] <= p[a] && p[a] <= hi[a]) { 1.0 } else { 0.0 };
        }
    }
    let data: Vec<f32> = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if region[i % n] == 1.0 { v } else { 0.0 })
        .collect();
    Ok(Handoff {
        input: Tensor::new(image.shape().to_vec(), data)?,
        region: Tensor::new([1, d, h, w], region)?,
        fallback: false,
    })
}
