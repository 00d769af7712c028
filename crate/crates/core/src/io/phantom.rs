//! Synthetic four-modality brain phantoms with exactly known tumor masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{join, KvConfig};
use crate::error::{Error, Result};
use crate::models::{HGG, LGG};
use crate::preprocess::{Volume, MODALITIES};
use crate::seed::derive_seed;
use crate::volcore::Tensor;

/// Brain semi-axes as a fraction of the grid extent.
const BRAIN_FRACTION: f64 = 0.42;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Grade name as written in manifests.
pub fn grade_name(grade: usize) -> &'static str {
    if grade == HGG {
        "HGG"
    } else {
        "LGG"
    }
}

pub fn parse_grade(s: &str) -> Result<usize> {
    match s {
        "HGG" => Ok(HGG),
        "LGG" => Ok(LGG),
        _ => Err(Error::Data(format!("unknown grade `{s}` (expected HGG or LGG)"))),
    }
}

/// Intensity offsets a tumor adds to each modality, in FLAIR, T1, T1ce, T2
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorProfile {
    pub core: [f64; 4],
    /// Added on top of `core` in the outer shell of the tumor.
    pub rim: [f64; 4],
    /// Relative thickness of the shell, in (0, 1].
    pub rim_width: f64,
    /// Standard deviation of the per-voxel texture inside the tumor.
    pub heterogeneity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// `[D, H, W]`.
    pub grid: [usize; 3],
    pub spacing: [f32; 3],
    pub tumors: (usize, usize),
    /// Tumor radius range in voxels.
    pub radius: (f64, f64),
    pub hgg: TumorProfile,
    pub lgg: TumorProfile,
    /// Brain tissue intensity per modality.
    pub tissue: [f64; 4],
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: [16, 32, 32],
            spacing: [1.0; 3],
            tumors: (1, 1),
            radius: (2.5, 4.0),
            hgg: TumorProfile {
                core: [0.6, -0.2, -0.1, 0.6],
                rim: [0.0, 0.0, 1.0, 0.0],
                rim_width: 0.35,
                heterogeneity: 0.15,
            },
            lgg: TumorProfile {
                core: [0.35, -0.1, 0.0, 0.35],
                rim: [0.0; 4],
                rim_width: 0.35,
                heterogeneity: 0.03,
            },
            tissue: [0.5, 0.6, 0.5, 0.45],
            texture: 0.05,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.grid.iter().any(|&n| n < 4) {
            return bad(format!("grid {:?} is smaller than 4 per axis", self.grid));
        }
        if self.tumors.0 == 0 || self.tumors.0 > self.tumors.1 {
            return bad(format!("invalid tumor count range {:?}", self.tumors));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("invalid radius range {:?}", self.radius));
        }
        if hi >= self.brain_axes().into_iter().fold(f64::INFINITY, f64::min) {
            return bad(format!("tumor radius {hi} does not fit inside the brain ellipsoid"));
        }
        for p in [&self.hgg, &self.lgg] {
            if !(p.rim_width > 0.0 && p.rim_width <= 1.0 && p.heterogeneity >= 0.0) {
                return bad("invalid tumor profile".into());
            }
        }
        if !(self.texture >= 0.0 && self.noise >= 0.0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("texture, noise and spacing must be non-negative / positive".into());
        }
        Ok(())
    }

    fn centre(&self) -> [f64; 3] {
        self.grid.map(|n| (n as f64 - 1.0) / 2.0)
    }

    fn brain_axes(&self) -> [f64; 3] {
        self.grid.map(|n| n as f64 * BRAIN_FRACTION)
    }

    /// Normalized radial coordinate of voxel `p` in the brain ellipsoid.
    fn brain_radius(&self, p: [f64; 3]) -> f64 {
        let (c, a) = (self.centre(), self.brain_axes());
        (0..3).map(|k| ((p[k] - c[k]) / a[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// Keys relative to a `phantom.` section.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("grid", join(&self.grid));
        kv.set("spacing", join(&self.spacing));
        kv.set("tumors", join(&[self.tumors.0, self.tumors.1]));
        kv.set("radius", join(&[self.radius.0, self.radius.1]));
        for (name, p) in [("hgg", &self.hgg), ("lgg", &self.lgg)] {
            kv.set(&format!("{name}.core"), join(&p.core));
            kv.set(&format!("{name}.rim"), join(&p.rim));
            kv.set(&format!("{name}.rim_width"), p.rim_width);
            kv.set(&format!("{name}.heterogeneity"), p.heterogeneity);
        }
        kv.set("tissue", join(&self.tissue));
        kv.set("texture", self.texture);
        kv.set("noise", self.noise);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = PhantomSpec::default();
        let spec = kv.read(|r| {
            fn fixed<V: Copy, const N: usize>(key: &str, v: Vec<V>) -> Result<[V; N]> {
                v.try_into()
                    .map_err(|v: Vec<V>| Error::Config(format!("`{key}` needs {N} values, got {}", v.len())))
            }
            let profile = |name: &str, d: &TumorProfile| -> Result<TumorProfile> {
                let key = |k: &str| format!("{name}.{k}");
                Ok(TumorProfile {
                    core: fixed(&key("core"), r.list_or(&key("core"), &d.core)?)?,
                    rim: fixed(&key("rim"), r.list_or(&key("rim"), &d.rim)?)?,
                    rim_width: r.parse_or(&key("rim_width"), d.rim_width)?,
                    heterogeneity: r.parse_or(&key("heterogeneity"), d.heterogeneity)?,
                })
            };
            let [t0, t1] = fixed("tumors", r.list_or("tumors", &[d.tumors.0, d.tumors.1])?)?;
            let [r0, r1] = fixed("radius", r.list_or("radius", &[d.radius.0, d.radius.1])?)?;
            Ok(PhantomSpec {
                grid: fixed("grid", r.list_or("grid", &d.grid)?)?,
                spacing: fixed("spacing", r.list_or("spacing", &d.spacing)?)?,
                tumors: (t0, t1),
                radius: (r0, r1),
                hgg: profile("hgg", &d.hgg)?,
                lgg: profile("lgg", &d.lgg)?,
                tissue: fixed("tissue", r.list_or("tissue", &d.tissue)?)?,
                texture: r.parse_or("texture", d.texture)?,
                noise: r.parse_or("noise", d.noise)?,
                seed: r.parse_or("seed", d.seed)?,
            })
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub patient_id: String,
    /// Four channels in FLAIR, T1, T1ce, T2 order.
    pub image: Volume,
    pub mask: Volume,
    pub grade: usize,
}

struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Blob {
    /// Normalized radial coordinate; < 1 inside.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| ((p[k] - self.centre[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn coords(i: usize, [_, h, w]: [usize; 3]) -> [f64; 3] {
    [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64]
}

/// Generates case `index` of grade `grade`. The result depends only on
/// `(spec, grade, index)`.
pub fn generate_phantom(spec: &PhantomSpec, grade: usize, index: u64) -> Result<CaseRecord> {
    spec.validate()?;
    if grade != HGG && grade != LGG {
        return Err(Error::InvalidArgument(format!("unknown grade {grade}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, index, grade as u64]));
    let n: usize = spec.grid.iter().product();
    let centre = spec.centre();

    // smooth texture: a few random low-frequency plane waves per modality
    let waves: Vec<[f64; 5]> = (0..4 * 3)
        .map(|_| {
            [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            ]
        })
        .collect();

    let count = rng.random_range(spec.tumors.0..=spec.tumors.1);
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        blobs.push(place_blob(spec, &mut rng)?);
    }

    let profile = if grade == HGG { &spec.hgg } else { &spec.lgg };
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let texture = Normal::new(0.0, profile.heterogeneity.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut image = vec![0f32; 4 * n];
    let mut mask = vec![0f32; n];
    for i in 0..n {
        let p = coords(i, spec.grid);
        if spec.brain_radius(p) >= 1.0 {
            continue;
        }
        let r = blobs.iter().map(|b| b.radius(p)).fold(f64::INFINITY, f64::min);
        let tumor = r < 1.0;
        mask[i] = tumor as u8 as f32;
        let rim = tumor && r >= 1.0 - profile.rim_width;
        let grain = if tumor && profile.heterogeneity > 0.0 { texture.sample(&mut rng) } else { 0.0 };
        for c in 0..4 {
            let mut v = spec.tissue[c];
            for w in &waves[3 * c..3 * c + 3] {
                let phase = w[0] * (p[0] - centre[0]) + w[1] * (p[1] - centre[1]) + w[2] * (p[2] - centre[2]) + w[3];
                v += spec.texture * w[4] * phase.cos();
            }
            if tumor {
                v += profile.core[c] + grain;
                if rim {
                    v += profile.rim[c];
                }
            }
            if spec.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            // keep brain voxels distinguishable from the zero background
            image[c * n + i] = if v == 0.0 { f32::MIN_POSITIVE } else { v as f32 };
        }
    }
    let [d, h, w] = spec.grid;
    let image = Volume::image(Tensor::new([4, d, h, w], image)?)?
        .with_spacing(spec.spacing)?
        .with_modalities(MODALITIES.iter().map(|s| s.to_string()).collect())?;
    let mask = Volume::mask(Tensor::new([1, d, h, w], mask)?)?.with_spacing(spec.spacing)?;
    Ok(CaseRecord {
        patient_id: format!("PH{index:04}"),
        image,
        mask,
        grade,
    })
}

/// Draws a tumor ellipsoid whose every voxel lies strictly inside the brain
/// and that covers at least one voxel.
fn place_blob(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Blob> {
    let axes = spec.brain_axes();
    let centre = spec.centre();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let radii = [0; 3].map(|_| rng.random_range(spec.radius.0..=spec.radius.1));
        let c = [0, 1, 2].map(|k| {
            let span = (axes[k] - radii[k]).max(0.0) * 0.7;
            centre[k] + rng.random_range(-span..=span)
        });
        let blob = Blob { centre: c, radii };
        let mut any = false;
        let mut contained = true;
        for k in 0..spec.grid.iter().product() {
            let p = coords(k, spec.grid);
            if blob.radius(p) < 1.0 {
                any = true;
                if spec.brain_radius(p) >= 0.95 {
                    contained = false;
                    break;
                }
            }
        }
        if any && contained {
            return Ok(blob);
        }
    }
    Err(Error::Config(format!(
        "phantom: could not place a tumor of radius {:?} inside the brain",
        spec.radius
    )))
}

/// HGG/LGG counts for `n` cases in the 259:76 proportion, each class
/// getting at least one case when `n >= 2`.
pub fn class_counts(n: usize) -> (usize, usize) {
    let hgg = ((n as f64) * 259.0 / 335.0).round() as usize;
    let hgg = if n >= 2 { hgg.clamp(1, n - 1) } else { hgg.min(n) };
    (hgg, n - hgg)
}
