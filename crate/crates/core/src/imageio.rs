//! Grayscale PNG input/output and the raw tensor dump format.
//!
//! Dump layout: 8-byte little-endian `u64` header length, a UTF-8 JSON header
//! `{"dtype": "f32", "shape": [...], "order": "row-major"}`, then the values as
//! little-endian `f32`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::conv::Plane;
use crate::error::{Error, Result};

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Reads an 8- or 16-bit grayscale PNG scaled to `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Plane> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(image_error(path, format!("expected grayscale PNG, got {:?}", other.color())));
        }
    };
    Plane::new(h, w, data)
}

/// Writes `plane` (clipped to `[0, 1]`) as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, plane: &Plane) -> Result<()> {
    let raw: Vec<u16> = plane.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(plane.width as u32, plane.height as u32, raw).expect("buffer size matches plane");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes `plane` (clipped to `[0, 1]`) as an 8-bit grayscale PNG.
pub fn write_gray8(path: &Path, plane: &Plane) -> Result<()> {
    let raw: Vec<u8> = plane.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(plane.width as u32, plane.height as u32, raw).expect("buffer size matches plane");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes interleaved RGB values in `[0, 1]` as an 8-bit PNG.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let raw: Vec<u8> =
        rgb.iter().flat_map(|px| px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer size matches pixel count");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Bilinear resize (pixel centers aligned).
pub fn resize(plane: &Plane, height: usize, width: usize) -> Plane {
    if plane.height == height && plane.width == width {
        return plane.clone();
    }
    let sy = plane.height as f64 / height as f64;
    let sx = plane.width as f64 / width as f64;
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (plane.height - 1) as f64);
        for c in 0..width {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (plane.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(plane.height - 1), (x0 + 1).min(plane.width - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = plane.get(y0, x0) * (1.0 - fx) + plane.get(y0, x1) * fx;
            let bottom = plane.get(y1, x0) * (1.0 - fx) + plane.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane { height, width, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
}

pub fn write_dump(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(Error::Shape(format!("shape {shape:?} needs {expected} values, got {}", values.len())));
    }
    let header = DumpHeader { dtype: "f32".into(), shape: shape.to_vec(), order: "row-major".into() };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<(DumpHeader, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| Error::Shape(format!("{}: malformed dump ({why})", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
    let header: DumpHeader = serde_json::from_slice(body)?;
    let data = &bytes[8 + len..];
    let count: usize = header.shape.iter().product();
    if header.dtype != "f32" || data.len() != 4 * count {
        return Err(bad("payload does not match header"));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, values))
}
