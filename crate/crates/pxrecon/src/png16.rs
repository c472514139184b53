//! 16-bit grayscale PNG images (`sample = round(v * 65535)`, v clamped to
//! [0,1]) with a JSON sidecar next to each file.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use pxrecon_core::volume::Image;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub height: usize,
    pub width: usize,
    pub encoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_phantom_id: Option<u64>,
}

impl Sidecar {
    pub fn for_image(img: &Image) -> Self {
        Sidecar {
            height: img.h,
            width: img.w,
            encoding: "gray16, value = sample / 65535".into(),
            label: None,
            degrees: None,
            source_phantom_id: None,
        }
    }
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

pub fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.w as u32, img.h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let raw: Vec<u8> = img.data.iter().flat_map(|&v| quantize(v).to_be_bytes()).collect();
    w.write_image_data(&raw).map_err(|e| Error::Png(e.to_string()))?;
    w.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::format(path, "png", e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            "png",
            format!("{:?} {:?}, expected 16-bit grayscale", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; 2 * w * h];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, "png", e.to_string()))?;
    let data = buf
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Ok(Image::from_vec(h, w, data)?)
}

pub fn write_png16(img: &Image, path: &Path, sidecar: &Sidecar) -> Result<()> {
    fsutil::write_atomic(path, &encode(img)?)?;
    fsutil::write_json(&sidecar_path(path), sidecar)
}

pub fn read_png16(path: &Path) -> Result<Image> {
    decode(&fsutil::read(path)?, path)
}
