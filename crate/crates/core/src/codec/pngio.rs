//! 8-bit RGBA PNG I/O with the linear map `[0, 255] ↔ [-1, +1]`.

use std::io::Cursor;
use std::path::Path;

use super::image::RgbaImage;
use crate::error::{io_err, Error, Result};

#[inline]
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[inline]
pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Rounds every channel to the nearest 8-bit level.
pub fn quantize(img: &RgbaImage) -> RgbaImage {
    let data = img.data().iter().map(|&v| from_byte(to_byte(v))).collect();
    RgbaImage::new(img.height(), img.width(), data).expect("same size")
}

pub fn encode_png(img: &RgbaImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    encode_bytes(&bytes, img, png::ColorType::Rgba)
}

/// Encodes the colour channels only; alpha is dropped.
pub fn encode_png_rgb(img: &RgbaImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img
        .data()
        .chunks(4)
        .flat_map(|p| [to_byte(p[0]), to_byte(p[1]), to_byte(p[2])])
        .collect();
    encode_bytes(&bytes, img, png::ColorType::Rgb)
}

fn encode_bytes(bytes: &[u8], img: &RgbaImage, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes any 8-bit (or palette/16-bit, normalized) PNG into RGBA; images
/// without alpha are opaque.
pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgba: Vec<u8> = match info.color_type {
        png::ColorType::Rgba => buf.to_vec(),
        png::ColorType::Rgb => buf
            .chunks(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks(2)
            .flat_map(|p| [p[0], p[0], p[0], p[1]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::Indexed => {
            return Err(Error::Png("unexpanded palette image".into()));
        }
    };
    RgbaImage::new(h, w, rgba.into_iter().map(from_byte).collect())
}

pub fn write_png(path: &Path, img: &RgbaImage) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_png(path: &Path) -> Result<RgbaImage> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_png(&bytes)
}
