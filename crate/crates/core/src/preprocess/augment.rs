use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Grid, Volume, VolumeKind};
use crate::config::{join, KvConfig};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Parameter ranges for the training-time augmentations. Every transform
/// with zero magnitude is skipped, so [`AugmentConfig::identity`] leaves
/// its inputs bit-for-bit unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation about each axis drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Translation along each axis drawn from `±translation` voxels.
    pub translation: f64,
    /// Control points per axis of the elastic displacement grid.
    pub elastic_grid: usize,
    /// Largest control-point displacement, in voxels.
    pub elastic_magnitude: f64,
    /// Multiplicative intensity factor drawn from `[lo, hi]`.
    pub scale_range: (f64, f64),
    pub noise_sigma: f64,
    /// Percentiles mapped onto each channel's min and max.
    pub contrast_percentiles: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            translation: 10.0,
            elastic_grid: 4,
            elastic_magnitude: 3.0,
            scale_range: (0.95, 1.05),
            noise_sigma: 0.02,
            contrast_percentiles: Some((2.0, 98.0)),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity(seed: u64) -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            translation: 0.0,
            elastic_grid: 4,
            elastic_magnitude: 0.0,
            scale_range: (1.0, 1.0),
            noise_sigma: 0.0,
            contrast_percentiles: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let bad = |what: &str| Err(Error::Config(format!("augmentation: invalid {what}")));
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return bad("rotation range");
        }
        if !(self.translation >= 0.0 && self.elastic_magnitude >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("magnitude");
        }
        if self.elastic_magnitude > 0.0 && self.elastic_grid < 2 {
            return bad("elastic grid");
        }
        if !(lo > 0.0 && lo <= hi) {
            return bad("intensity scale range");
        }
        if let Some((a, b)) = self.contrast_percentiles {
            if !(0.0 <= a && a < b && b <= 100.0) {
                return bad("contrast percentiles");
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.spatial_active()
            && self.scale_range == (1.0, 1.0)
            && self.noise_sigma == 0.0
            && self.contrast_percentiles.is_none()
    }

    fn spatial_active(&self) -> bool {
        self.rotation_deg > 0.0 || self.translation > 0.0 || self.elastic_magnitude > 0.0
    }

    /// Keys relative to an `augment.` section.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("rotation_deg", self.rotation_deg);
        kv.set("translation", self.translation);
        kv.set("elastic_grid", self.elastic_grid);
        kv.set("elastic_magnitude", self.elastic_magnitude);
        kv.set("scale_range", join(&[self.scale_range.0, self.scale_range.1]));
        kv.set("noise_sigma", self.noise_sigma);
        match self.contrast_percentiles {
            Some((a, b)) => kv.set("contrast_percentiles", join(&[a, b])),
            None => kv.set("contrast_percentiles", "off"),
        }
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = AugmentConfig::default();
        let cfg = kv.read(|r| {
            let pair = |key: &str, default: (f64, f64)| -> Result<(f64, f64)> {
                match r.list_or(key, &[default.0, default.1])?[..] {
                    [a, b] => Ok((a, b)),
                    _ => Err(Error::Config(format!("`{key}` needs two values"))),
                }
            };
            let contrast = match r.string_or("contrast_percentiles", "").as_str() {
                "off" => None,
                "" => d.contrast_percentiles,
                _ => Some(pair("contrast_percentiles", (2.0, 98.0))?),
            };
            Ok(AugmentConfig {
                rotation_deg: r.parse_or("rotation_deg", d.rotation_deg)?,
                translation: r.parse_or("translation", d.translation)?,
                elastic_grid: r.parse_or("elastic_grid", d.elastic_grid)?,
                elastic_magnitude: r.parse_or("elastic_magnitude", d.elastic_magnitude)?,
                scale_range: pair("scale_range", d.scale_range)?,
                noise_sigma: r.parse_or("noise_sigma", d.noise_sigma)?,
                contrast_percentiles: contrast,
                seed: r.parse_or("seed", d.seed)?,
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Independent stream for one case in one epoch.
    pub fn rng_for(&self, case: u64, epoch: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, case, epoch]))
    }
}

type Mat3 = [[f64; 3]; 3];

fn rotation(angles: [f64; 3]) -> Mat3 {
    let axis = |a: usize, t: f64| {
        let (s, c) = t.sin_cos();
        let (i, j) = [(1, 2), (0, 2), (0, 1)][a];
        let mut m = [[0.0; 3]; 3];
        m[a][a] = 1.0;
        m[i][i] = c;
        m[j][j] = c;
        m[i][j] = -s;
        m[j][i] = s;
        m
    };
    let mul = |a: Mat3, b: Mat3| -> Mat3 {
        std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
    };
    mul(axis(0, angles[0]), mul(axis(1, angles[1]), axis(2, angles[2])))
}

/// Uniform cubic B-spline weights for fractional offset `t`.
fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Smooth displacement field defined by a coarse grid of control vectors.
struct Elastic {
    grid: usize,
    /// `[g, g, g]` control vectors.
    control: Vec<[f64; 3]>,
}

impl Elastic {
    fn sample(grid: usize, magnitude: f64, rng: &mut impl Rng) -> Self {
        let control = (0..grid.pow(3))
            .map(|_| std::array::from_fn(|_| rng.random_range(-magnitude..=magnitude)))
            .collect();
        Elastic { grid, control }
    }

    /// Displacement at `p`; the weights form a partition of unity so the
    /// result never exceeds the largest control vector component.
    fn at(&self, p: [f64; 3], ext: [usize; 3]) -> [f64; 3] {
        let g = self.grid;
        let mut idx = [[0usize; 4]; 3];
        let mut wts = [[0f64; 4]; 3];
        for a in 0..3 {
            let u = if ext[a] > 1 {
                p[a] * (g - 1) as f64 / (ext[a] - 1) as f64
            } else {
                0.0
            };
            let base = u.floor();
            wts[a] = bspline_weights(u - base);
            for (k, slot) in idx[a].iter_mut().enumerate() {
                *slot = (base as i64 + k as i64 - 1).clamp(0, g as i64 - 1) as usize;
            }
        }
        let mut out = [0.0; 3];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let w = wts[0][i] * wts[1][j] * wts[2][k];
                    let c = self.control[(idx[0][i] * g + idx[1][j]) * g + idx[2][k]];
                    for a in 0..3 {
                        out[a] += w * c[a];
                    }
                }
            }
        }
        out
    }
}

fn percentile(sorted: &[f32], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t
}

fn contrast_stretch(channel: &mut [f32], lo_q: f64, hi_q: f64) {
    let mut sorted = channel.to_vec();
    sorted.sort_by(f32::total_cmp);
    let (min, max) = (sorted[0] as f64, sorted[sorted.len() - 1] as f64);
    let (lo, hi) = (percentile(&sorted, lo_q), percentile(&sorted, hi_q));
    if hi <= lo {
        return;
    }
    for v in channel {
        let t = ((*v as f64).clamp(lo, hi) - lo) / (hi - lo);
        *v = (min + t * (max - min)) as f32;
    }
}

/// Applies the spatial transforms (rotation, translation, elastic) to both
/// volumes, with trilinear sampling for the image and nearest neighbour for
/// the mask, then the intensity transforms (scale, noise, contrast) to the
/// image only. Parameters are drawn from `rng` in a fixed order.
pub fn augment(image: &Volume, mask: &Volume, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Volume, Volume)> {
    cfg.validate()?;
    if image.dims() != mask.dims() {
        return Err(Error::shape("augment", image.shape(), mask.shape()));
    }
    let mut image = image.clone();
    let mut mask = mask.clone();

    if cfg.spatial_active() {
        let deg = cfg.rotation_deg.to_radians();
        let angles: [f64; 3] = std::array::from_fn(|_| if deg > 0.0 { rng.random_range(-deg..=deg) } else { 0.0 });
        let shift: [f64; 3] = std::array::from_fn(|_| {
            if cfg.translation > 0.0 {
                rng.random_range(-cfg.translation..=cfg.translation)
            } else {
                0.0
            }
        });
        let elastic =
            (cfg.elastic_magnitude > 0.0).then(|| Elastic::sample(cfg.elastic_grid, cfg.elastic_magnitude, rng));
        let rot = rotation(angles);
        let g = Grid::of(&image);
        let ext = [g.d, g.h, g.w];
        let centre: [f64; 3] = std::array::from_fn(|a| (ext[a] - 1) as f64 / 2.0);
        // inverse map: output voxel -> source position
        let mut sources = Vec::with_capacity(g.len());
        for z in 0..g.d {
            for y in 0..g.h {
                for x in 0..g.w {
                    let p = [z as f64, y as f64, x as f64];
                    let rel: [f64; 3] = std::array::from_fn(|a| p[a] - centre[a] - shift[a]);
                    let mut q: [f64; 3] =
                        std::array::from_fn(|a| (0..3).map(|k| rot[k][a] * rel[k]).sum::<f64>() + centre[a]);
                    if let Some(e) = &elastic {
                        let d = e.at(p, ext);
                        for a in 0..3 {
                            q[a] += d[a];
                        }
                    }
                    sources.push(q);
                }
            }
        }
        let warp = |v: &mut Volume| {
            let n = g.len();
            let mut out = vec![0f32; v.data().len()];
            for c in 0..v.channels() {
                let chan = v.channel(c);
                for (o, &q) in out[c * n..(c + 1) * n].iter_mut().zip(&sources) {
                    *o = match v.kind() {
                        VolumeKind::Image => g.trilinear(chan, q),
                        VolumeKind::Mask => g.nearest(chan, q),
                    };
                }
            }
            v.data_mut().copy_from_slice(&out);
        };
        warp(&mut image);
        warp(&mut mask);
    }

    let (lo, hi) = cfg.scale_range;
    if (lo, hi) != (1.0, 1.0) {
        let s = if lo < hi { rng.random_range(lo..=hi) } else { lo } as f32;
        image.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in image.data_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    if let Some((lo_q, hi_q)) = cfg.contrast_percentiles {
        let n = image.voxels();
        for c in 0..image.channels() {
            contrast_stretch(&mut image.data_mut()[c * n..(c + 1) * n], lo_q, hi_q);
        }
    }
    Ok((image, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_partition_of_unity() {
        for i in 0..=20 {
            let w = bspline_weights(i as f64 / 20.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation([0.2, -0.1, 0.25]);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elastic_displacement_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = Elastic::sample(4, 3.0, &mut rng);
        for z in 0..8 {
            for y in 0..8 {
                let d = e.at([z as f64, y as f64, 3.5], [8, 8, 8]);
                assert!(d.iter().all(|v| v.abs() <= 3.0));
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert!((percentile(&v, 10.0) - 0.4).abs() < 1e-12);
    }
}
