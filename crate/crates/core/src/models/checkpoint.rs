//! `VCKP` checkpoint files: a configuration echo plus named f32 tensors.
//!
//! | field        | type                 |
//! |--------------|----------------------|
//! | magic        | `VCKP`               |
//! | version      | u16 (1)              |
//! | config bytes | u32 length + UTF-8 `key = value` text |
//! | tensor count | u32                  |
//! | per tensor   | u16 name length, name, u8 rank, rank × u32 dims, f32 payload |
//! | checksum     | u32 CRC-32 of every preceding byte |
//!
//! Little-endian throughout. The configuration echo is sufficient to rebuild
//! the network before the tensors are loaded by name.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hybrid::{DenseBranchConfig, Hybrid, HybridConfig, VggBranchConfig};
use super::unet::{UNet, UNetConfig};
use crate::config::{join, KvConfig};
use crate::error::{Error, FormatError, Result};
use crate::io::bytes::{put_f32s, put_u16, put_u32, ByteReader};
use crate::params::ParamStore;
use crate::volcore::{Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VCKP";
pub const CHECKPOINT_VERSION: u16 = 1;
const MAX_RANK: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KvConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(config: KvConfig, store: &ParamStore<T>) -> Self {
        Checkpoint {
            config,
            tensors: store.entries().iter().map(|e| (e.name.clone(), e.value.cast())).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u16(&mut out, CHECKPOINT_VERSION);
        let text = self.config.to_text();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if r.remaining() < 4 {
            r.take(4)?;
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        let mut r = ByteReader::new(&bytes[..body_len]);
        r.take(6)?;
        let invalid = |m: String| FormatError::InvalidHeader(m);

        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| invalid("config echo is not UTF-8".into()))?;
        let config = KvConfig::parse(text)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(r.remaining()));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| invalid("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()?;
            if rank > MAX_RANK {
                return Err(invalid(format!("tensor `{name}` has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| invalid(format!("tensor `{name}` size overflows")))?;
            let data = r.f32_vec(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| invalid(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.remaining() > 0 {
            return Err(FormatError::TrailingBytes { len: r.remaining() });
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }

    pub fn model_kind(&self) -> Option<&str> {
        self.config.get("model")
    }

    fn expect_model(&self, kind: &str) -> Result<()> {
        match self.model_kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Data(format!("checkpoint holds model {other:?}, expected `{kind}`"))),
        }
    }

    /// Rebuilds a segmenter from the echo and loads its weights.
    pub fn load_unet<T: Real>(&self) -> Result<(UNet, ParamStore<T>)> {
        self.expect_model("unet")?;
        let cfg = UNetConfig::from_kv(&self.config.section("unet"))?;
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(&mut store)?;
        Ok((net, store))
    }

    pub fn load_hybrid<T: Real>(&self) -> Result<(Hybrid, ParamStore<T>)> {
        self.expect_model("hybrid")?;
        let cfg = HybridConfig::from_kv(&self.config.section("hybrid"))?;
        let mut store = ParamStore::new();
        let net = Hybrid::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.fill(&mut store)?;
        Ok((net, store))
    }

    fn fill<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let cast: Vec<(String, Tensor<T>)> = self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        store.load_from(&cast)
    }
}


impl UNetConfig {
    /// Keys relative to the `unet.` section.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("depth", self.depth);
        kv.set("base_channels", self.base_channels);
        kv.set("in_channels", self.in_channels);
        kv.set("out_channels", self.out_channels);
        kv.set("attention", self.attention);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = UNetConfig::default();
        let cfg = kv.read(|r| {
            Ok(UNetConfig {
                depth: r.parse_or("depth", d.depth)?,
                base_channels: r.parse_or("base_channels", d.base_channels)?,
                in_channels: r.parse_or("in_channels", d.in_channels)?,
                out_channels: r.parse_or("out_channels", d.out_channels)?,
                attention: r.parse_or("attention", d.attention)?,
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_stages(items: &[String]) -> Result<Vec<(usize, usize)>> {
    items
        .iter()
        .map(|s| {
            let (n, c) = s
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("vgg stage `{s}` is not `<convs>x<channels>`")))?;
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("vgg stage `{s}`")));
            Ok((parse(n)?, parse(c)?))
        })
        .collect()
}

impl HybridConfig {
    /// Keys relative to the `hybrid.` section.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("input", join(&self.input));
        kv.set("dense.blocks", join(&self.dense.blocks));
        kv.set("dense.growth", self.dense.growth);
        kv.set("dense.compression", self.dense.compression);
        let stages: Vec<String> = self.vgg.stages.iter().map(|(n, c)| format!("{n}x{c}")).collect();
        kv.set("vgg.stages", join(&stages));
        kv.set("d_model", self.d_model);
        kv.set("heads", self.heads);
        kv.set("reduction", self.reduction);
        kv.set("spatial_channel", self.spatial_channel);
        kv.set("n_classes", self.n_classes);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = HybridConfig::default();
        kv.read(|r| {
            let input: Vec<usize> = r.list_or("input", &d.input)?;
            let input: [usize; 4] = input
                .try_into()
                .map_err(|v: Vec<usize>| Error::Config(format!("hybrid.input needs 4 extents, got {}", v.len())))?;
            let default_stages: Vec<String> = d.vgg.stages.iter().map(|(n, c)| format!("{n}x{c}")).collect();
            Ok(HybridConfig {
                input,
                dense: DenseBranchConfig {
                    blocks: r.list_or("dense.blocks", &d.dense.blocks)?,
                    growth: r.parse_or("dense.growth", d.dense.growth)?,
                    compression: r.parse_or("dense.compression", d.dense.compression)?,
                },
                vgg: VggBranchConfig {
                    stages: parse_stages(&r.list_or("vgg.stages", &default_stages)?)?,
                },
                d_model: r.parse_or("d_model", d.d_model)?,
                heads: r.parse_or("heads", d.heads)?,
                reduction: r.parse_or("reduction", d.reduction)?,
                spatial_channel: r.parse_or("spatial_channel", d.spatial_channel)?,
                n_classes: r.parse_or("n_classes", d.n_classes)?,
            })
        })
    }
}

/// Prefixes every key of `section` with `prefix.` into `out`.
pub fn nest(out: &mut KvConfig, prefix: &str, section: &KvConfig) {
    for (k, v) in section.entries() {
        out.set(&format!("{prefix}.{k}"), v);
    }
}

pub fn unet_checkpoint<T: Real>(net: &UNet, store: &ParamStore<T>, extra: &KvConfig) -> Checkpoint {
    let mut cfg = KvConfig::new();
    cfg.set("model", "unet");
    nest(&mut cfg, "unet", &net.config.to_kv());
    cfg.extend(extra);
    Checkpoint::from_store(cfg, store)
}

pub fn hybrid_checkpoint<T: Real>(net: &Hybrid, store: &ParamStore<T>, extra: &KvConfig) -> Checkpoint {
    let mut cfg = KvConfig::new();
    cfg.set("model", "hybrid");
    nest(&mut cfg, "hybrid", &net.config.to_kv());
    cfg.extend(extra);
    Checkpoint::from_store(cfg, store)
}
