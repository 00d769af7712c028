//! `VVOL` volume files.
//!
//! | field    | type      | notes                          |
//! |----------|-----------|--------------------------------|
//! | magic    | `[u8; 4]` | `VVOL`                         |
//! | version  | u16       | currently 1                    |
//! | dtype    | u8        | 1 = f32 image, 2 = u8 mask     |
//! | channels | u16       | 1 or 4 (masks: 1)              |
//! | dims     | 3 × u32   | D, H, W                        |
//! | spacing  | 3 × f32   | mm per voxel, positive         |
//! | payload  | C·D·H·W   | row-major `[C, D, H, W]`       |
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::bytes::{put_f32s, put_u16, put_u32, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::preprocess::{Volume, VolumeKind};
use crate::volcore::Tensor;

pub const VOLUME_MAGIC: [u8; 4] = *b"VVOL";
pub const VOLUME_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + v.data().len() * 4);
    out.extend_from_slice(&VOLUME_MAGIC);
    put_u16(&mut out, VOLUME_VERSION);
    out.push(match v.kind() {
        VolumeKind::Image => DTYPE_F32,
        VolumeKind::Mask => DTYPE_U8,
    });
    put_u16(&mut out, v.channels() as u16);
    for d in v.dims() {
        put_u32(&mut out, d as u32);
    }
    put_f32s(&mut out, &v.spacing());
    match v.kind() {
        VolumeKind::Image => put_f32s(&mut out, v.data()),
        // mask constructors guarantee integral labels in 0..=255
        VolumeKind::Mask => out.extend(v.data().iter().map(|&x| x as u8)),
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> std::result::Result<Volume, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != VOLUME_MAGIC {
        return Err(FormatError::BadMagic {
            expected: VOLUME_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u16()?;
    if version != VOLUME_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            supported: VOLUME_VERSION,
        });
    }
    let dtype = r.u8()?;
    let kind = match dtype {
        DTYPE_F32 => VolumeKind::Image,
        DTYPE_U8 => VolumeKind::Mask,
        other => return Err(FormatError::UnknownDtype(other)),
    };
    let channels = r.u16()? as usize;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let invalid = |m: String| FormatError::InvalidHeader(m);
    if dims.contains(&0) || channels == 0 {
        return Err(invalid(format!("zero extent in {channels} x {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("voxel count overflows".into()))?;
    let data = match kind {
        VolumeKind::Image => r.f32_vec(count)?,
        VolumeKind::Mask => r.take(count)?.iter().map(|&b| b as f32).collect(),
    };
    if r.remaining() > 0 {
        return Err(FormatError::TrailingBytes { len: r.remaining() });
    }
    let tensor = Tensor::new([channels, dims[0], dims[1], dims[2]], data).map_err(|e| invalid(e.to_string()))?;
    let volume = Volume::new(tensor, [1.0; 3], kind).map_err(|e| invalid(e.to_string()))?;
    volume.with_spacing(spacing).map_err(|e| invalid(e.to_string()))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_volume(&bytes)?)
}
