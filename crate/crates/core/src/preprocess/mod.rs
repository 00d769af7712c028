//! Volume container and per-case preprocessing: intensity standardization,
//! label binarization, resampling, axial window selection and augmentation.

mod augment;

pub use augment::{augment, AugmentConfig};

use crate::error::{Error, Result};
use crate::volcore::Tensor;

/// Channel names of a four-modality image, in storage order.
pub const MODALITIES: [&str; 4] = ["FLAIR", "T1", "T1ce", "T2"];

pub const ZSCORE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    /// Real-valued intensities (or probabilities), stored as f32.
    Image,
    /// Integer labels, stored as u8; resampled with nearest neighbour.
    Mask,
}

/// Voxel grid `[C, D, H, W]` with per-axis spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Tensor<f32>,
    spacing: [f32; 3],
    modalities: Vec<String>,
    kind: VolumeKind,
}

fn default_names(kind: VolumeKind, channels: usize) -> Vec<String> {
    match (kind, channels) {
        (VolumeKind::Mask, _) => vec!["mask".to_string()],
        (VolumeKind::Image, 4) => MODALITIES.iter().map(|s| s.to_string()).collect(),
        (VolumeKind::Image, _) => (0..channels).map(|c| format!("ch{c}")).collect(),
    }
}

impl Volume {
    pub fn new(data: Tensor<f32>, spacing: [f32; 3], kind: VolumeKind) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "volume data must be [C, D, H, W], got {shape:?}"
            )));
        }
        let c = shape[0];
        let ok = match kind {
            VolumeKind::Mask => c == 1,
            VolumeKind::Image => c == 1 || c == 4,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} volume cannot have {c} channels"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Volume {
            modalities: default_names(kind, c),
            data,
            spacing,
            kind,
        })
    }

    pub fn image(data: Tensor<f32>) -> Result<Self> {
        Self::new(data, [1.0; 3], VolumeKind::Image)
    }

    /// Validates that every voxel is a non-negative integer label.
    pub fn mask(data: Tensor<f32>) -> Result<Self> {
        if let Some(v) = data.data().iter().find(|&&v| !(v >= 0.0 && v.fract() == 0.0 && v <= 255.0)) {
            return Err(Error::InvalidArgument(format!(
                "mask voxels must be integer labels in 0..=255, found {v}"
            )));
        }
        Self::new(data, [1.0; 3], VolumeKind::Mask)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_modalities(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels() {
            return Err(Error::InvalidArgument(format!(
                "{} modality names for {} channels",
                names.len(),
                self.channels()
            )));
        }
        self.modalities = names;
        Ok(self)
    }

    /// Same metadata, new voxel data of identical shape.
    fn with_data(&self, data: Vec<f32>) -> Volume {
        Volume {
            data: Tensor::new(self.data.shape().to_vec(), data).expect("shape preserved"),
            spacing: self.spacing,
            modalities: self.modalities.clone(),
            kind: self.kind,
        }
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.data.data_mut()
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// `[D, H, W]`
    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data.data()[c * n..(c + 1) * n]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// One-channel mask of voxels that are nonzero in any channel of `image`.
pub fn brain_mask(image: &Volume) -> Volume {
    let n = image.voxels();
    let data = (0..n)
        .map(|i| {
            let inside = (0..image.channels()).any(|c| image.data()[c * n + i] != 0.0);
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let [d, h, w] = image.dims();
    Volume::new(Tensor::new([1, d, h, w], data).expect("sized"), image.spacing(), VolumeKind::Mask)
        .expect("valid mask")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Standardizes `values` in place to `(v - μ) / (σ + ε)` with μ and the
/// population σ taken over `inside` entries only; entries outside are set to
/// zero. Returns `None` (and zeros everything) when σ is zero.
pub fn standardize(values: &mut [f64], inside: &[bool]) -> Option<ChannelStats> {
    let count = inside.iter().filter(|&&b| b).count() as f64;
    let selected = || values.iter().zip(inside).filter(|(_, &b)| b).map(|(&v, _)| v);
    let mean = selected().sum::<f64>() / count;
    let var = selected().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let std = var.sqrt();
    let degenerate = std == 0.0;
    for (v, &b) in values.iter_mut().zip(inside) {
        *v = if b && !degenerate { (*v - mean) / (std + ZSCORE_EPS) } else { 0.0 };
    }
    (!degenerate).then_some(ChannelStats { mean, std })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: Volume,
    /// Statistics per channel, `None` for channels that were constant in the mask.
    pub stats: Vec<Option<ChannelStats>>,
}

impl Normalized {
    /// Channels that were constant inside the brain mask and came out as zeros.
    pub fn constant_channels(&self) -> Vec<usize> {
        self.stats
            .iter()
            .enumerate()
            .filter_map(|(c, s)| s.is_none().then_some(c))
            .collect()
    }
}

/// Per-channel z-score standardization inside `brain_mask`. Background
/// voxels are set to zero so the background stays distinguishable.
pub fn zscore_normalize(v: &Volume, brain_mask: &Volume) -> Result<Normalized> {
    if brain_mask.dims() != v.dims() || brain_mask.channels() != 1 {
        return Err(Error::shape("zscore_normalize", v.shape(), brain_mask.shape()));
    }
    let inside: Vec<bool> = brain_mask.data().iter().map(|&m| m != 0.0).collect();
    if !inside.iter().any(|&b| b) {
        return Err(Error::Data("zscore_normalize: brain mask is empty".into()));
    }
    let mut out = Vec::with_capacity(v.data().len());
    let mut stats = Vec::with_capacity(v.channels());
    for c in 0..v.channels() {
        let mut values: Vec<f64> = v.channel(c).iter().map(|&x| x as f64).collect();
        let s = standardize(&mut values, &inside);
        if s.is_none() {
            log::warn!("zscore_normalize: channel {} is constant inside the brain mask", v.modalities[c]);
        }
        stats.push(s);
        out.extend(values.into_iter().map(|x| x as f32));
    }
    Ok(Normalized {
        volume: v.with_data(out),
        stats,
    })
}

/// Maps every label greater than zero to 1.
pub fn binarize_labels(mask: &Volume) -> Result<Volume> {
    if let Some(v) = mask.data().iter().find(|&&v| !(v >= 0.0 && v.fract() == 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "binarize_labels expects non-negative integer labels, found {v}"
        )));
    }
    let data = mask.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(Volume {
        kind: VolumeKind::Mask,
        modalities: default_names(VolumeKind::Mask, 1),
        ..mask.with_data(data)
    })
}

/// Index arithmetic over a `[D, H, W]` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Grid {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn of(v: &Volume) -> Self {
        let [d, h, w] = v.dims();
        Grid { d, h, w }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    /// Trilinear sample at a continuous position; zero outside the grid.
    pub fn trilinear(&self, data: &[f32], p: [f64; 3]) -> f32 {
        let ext = [self.d, self.h, self.w];
        let mut base = [0i64; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            if !(p[a] > -1.0 && p[a] < ext[a] as f64) {
                return 0.0;
            }
            let f = p[a].floor();
            base[a] = f as i64;
            frac[a] = p[a] - f;
        }
        let mut acc = 0.0f64;
        for corner in 0..8 {
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            let mut valid = true;
            for a in 0..3 {
                let bit = (corner >> (2 - a)) & 1;
                let i = base[a] + bit as i64;
                weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                if i < 0 || i >= ext[a] as i64 {
                    valid = false;
                } else {
                    idx[a] = i as usize;
                }
            }
            if valid && weight != 0.0 {
                acc += weight * data[self.index(idx[0], idx[1], idx[2])] as f64;
            }
        }
        acc as f32
    }

    /// Nearest-neighbour sample; zero outside the grid.
    pub fn nearest(&self, data: &[f32], p: [f64; 3]) -> f32 {
        let ext = [self.d, self.h, self.w];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = p[a].round();
            if !(r >= 0.0 && r < ext[a] as f64) {
                return 0.0;
            }
            idx[a] = r as usize;
        }
        data[self.index(idx[0], idx[1], idx[2])]
    }
}

/// Resamples to `target = [D, H, W]` on a corner-aligned grid: output index
/// `i` samples source coordinate `i · (n_in − 1) / (n_out − 1)`. Images use
/// trilinear interpolation, masks nearest neighbour. Spacing is rescaled so
/// the physical extent is preserved.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&t| t < 2) {
        return Err(Error::InvalidArgument(format!(
            "resample target extents must be at least 2, got {target:?}"
        )));
    }
    let src = Grid::of(v);
    let src_ext = [src.d, src.h, src.w];
    let ratio: Vec<f64> = (0..3)
        .map(|a| (src_ext[a].max(1) - 1) as f64 / (target[a] - 1) as f64)
        .collect();
    let dst = Grid {
        d: target[0],
        h: target[1],
        w: target[2],
    };
    let mut data = Vec::with_capacity(v.channels() * dst.len());
    for c in 0..v.channels() {
        let chan = v.channel(c);
        for z in 0..dst.d {
            for y in 0..dst.h {
                for x in 0..dst.w {
                    let p = [z as f64 * ratio[0], y as f64 * ratio[1], x as f64 * ratio[2]];
                    data.push(match v.kind {
                        VolumeKind::Image => src.trilinear(chan, p),
                        VolumeKind::Mask => src.nearest(chan, p),
                    });
                }
            }
        }
    }
    let spacing = std::array::from_fn(|a| {
        if src_ext[a] > 1 {
            (v.spacing[a] as f64 * ratio[a]) as f32
        } else {
            v.spacing[a]
        }
    });
    Ok(Volume {
        data: Tensor::new([v.channels(), dst.d, dst.h, dst.w], data)?,
        spacing,
        modalities: v.modalities.clone(),
        kind: v.kind,
    })
}

/// Start index of the `n`-slice axial window with the most mask voxels.
/// Ties go to the window whose centre is closest to the volume centre, then
/// to the lower start index.
pub fn best_window_start(slice_counts: &[usize], n: usize) -> Result<usize> {
    let depth = slice_counts.len();
    if n == 0 || depth < n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} slices from a depth of {depth}"
        )));
    }
    let mut sum: usize = slice_counts[..n].iter().sum();
    let off_centre = |s: usize| (2 * s + n).abs_diff(depth);
    let mut best = (sum, 0usize);
    for s in 1..=depth - n {
        sum = sum + slice_counts[s + n - 1] - slice_counts[s - 1];
        let better = sum > best.0 || (sum == best.0 && off_centre(s) < off_centre(best.1));
        if better {
            best = (sum, s);
        }
    }
    Ok(best.1)
}

fn crop_depth(v: &Volume, start: usize, n: usize) -> Volume {
    let g = Grid::of(v);
    let plane = g.h * g.w;
    let mut data = Vec::with_capacity(v.channels() * n * plane);
    for c in 0..v.channels() {
        let chan = v.channel(c);
        data.extend_from_slice(&chan[start * plane..(start + n) * plane]);
    }
    Volume {
        data: Tensor::new([v.channels(), n, g.h, g.w], data).expect("sized"),
        spacing: v.spacing,
        modalities: v.modalities.clone(),
        kind: v.kind,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceWindow {
    pub image: Volume,
    pub mask: Volume,
    pub start: usize,
    pub tumor_voxels: usize,
}

/// Keeps the `n` consecutive axial slices holding the most tumor voxels.
pub fn select_central_slices(image: &Volume, mask: &Volume, n: usize) -> Result<SliceWindow> {
    if image.dims() != mask.dims() {
        return Err(Error::shape("select_central_slices", image.shape(), mask.shape()));
    }
    let g = Grid::of(mask);
    let plane = g.h * g.w;
    let counts: Vec<usize> = (0..g.d)
        .map(|z| mask.channel(0)[z * plane..(z + 1) * plane].iter().filter(|&&v| v != 0.0).count())
        .collect();
    let start = best_window_start(&counts, n)?;
    Ok(SliceWindow {
        image: crop_depth(image, start, n),
        mask: crop_depth(mask, start, n),
        start,
        tumor_voxels: counts[start..start + n].iter().sum(),
    })
}
