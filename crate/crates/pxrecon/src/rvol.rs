//! RVOL: a raw little-endian float32 volume with a fixed binary header.
//!
//! ```text
//! "RVOL1"            5 bytes
//! dims               3 x u32 LE, slowest axis first
//! spacing_mm         3 x f64 LE, same axis order as dims
//! dtype              "F32L"
//! axis order         3 bytes, "DHW" or "HWD"
//! value range        2 x f32 LE (min, max of the payload)
//! payload            dims product x f32 LE, C order
//! ```

use std::path::Path;

use pxrecon_core::volume::{AxisOrder, Volume};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 5] = b"RVOL1";
pub const DTYPE: &[u8; 4] = b"F32L";
pub const HEADER_LEN: usize = 5 + 12 + 24 + 4 + 3 + 8;

pub fn encode(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.data.len() * 4);
    out.extend_from_slice(MAGIC);
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing_mm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(DTYPE);
    out.extend_from_slice(v.axes.tag().as_bytes());
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (lo, hi) = if v.data.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "header", format!("{} bytes, need {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::format(path, "magic", format!("{:?}", String::from_utf8_lossy(&bytes[..5]))));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let dims = [u32_at(5), u32_at(9), u32_at(13)];
    let spacing_mm = [f64_at(17), f64_at(25), f64_at(33)];
    if &bytes[41..45] != DTYPE {
        return Err(Error::format(path, "dtype", String::from_utf8_lossy(&bytes[41..45])));
    }
    let tag = std::str::from_utf8(&bytes[45..48]).unwrap_or("");
    let axes = AxisOrder::from_tag(tag).ok_or_else(|| Error::format(path, "axis order", tag.to_string()))?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| Error::format(path, "dims", format!("{dims:?} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            "payload",
            format!("{} bytes for dims {dims:?}, expected {}", payload.len(), n * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume::from_vec(dims, spacing_mm, axes, data)?)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode(&fsutil::read(path)?, path)
}
