//! 8-bit PNG encoding and decoding for images and masks.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{Error, Result};
use crate::segmenter::{check_dims, Image, Mask};

struct Raw {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> std::result::Result<Raw, String> {
    let mut decoder = Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| e.to_string())?;
    data.truncate(info.buffer_size());
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err("indexed colour was not expanded".into()),
    };
    if info.bit_depth != BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    Ok(Raw { width: info.width as usize, height: info.height as usize, channels, data })
}

fn encode(width: usize, height: usize, color: ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut encoder = Encoder::new(&mut out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().expect("writing to a Vec cannot fail");
    writer.write_image_data(data).expect("buffer length matches the header");
    writer.finish().expect("writing to a Vec cannot fail");
    out
}

/// Width and height from the PNG header, without decoding pixel data.
pub fn png_dimensions(bytes: &[u8]) -> std::result::Result<(usize, usize), String> {
    let reader = Decoder::new(Cursor::new(bytes)).read_info().map_err(|e| e.to_string())?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

/// Decodes any 8-bit PNG to an RGB image with values `v / 255`. Grey images
/// are replicated to three channels; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<Image, String> {
    let raw = decode(bytes)?;
    check_dims(raw.width, raw.height).map_err(|e| e.to_string())?;
    let mut px = Vec::with_capacity(raw.width * raw.height * 3);
    for chunk in raw.data.chunks_exact(raw.channels) {
        let rgb = if raw.channels >= 3 { [chunk[0], chunk[1], chunk[2]] } else { [chunk[0]; 3] };
        px.extend(rgb.iter().map(|&v| v as f64 / 255.0));
    }
    Image::new(raw.width, raw.height, px).map_err(|e| e.to_string())
}

/// Decodes a mask PNG: any non-zero sample in the first channel is set.
pub fn decode_mask(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let labels = decode_labels(bytes)?;
    let (w, h) = (labels.0, labels.1);
    Mask::from_bits(w, h, labels.2.iter().map(|&v| v != 0).collect()).map_err(|e| e.to_string())
}

/// Width, height and the first-channel value of every pixel.
pub fn decode_labels(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let raw = decode(bytes)?;
    check_dims(raw.width, raw.height).map_err(|e| e.to_string())?;
    let values = raw.data.chunks_exact(raw.channels).map(|c| c[0]).collect();
    Ok((raw.width, raw.height, values))
}

/// Channel value to byte, `round(v * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    let data: Vec<u8> = image.pixels().iter().map(|&v| quantize(v)).collect();
    encode(image.width(), image.height(), ColorType::Rgb, &data)
}

/// Grey PNG with 255 for set pixels.
pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), ColorType::Grayscale, &data)
}

fn dataset_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), message: message.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| dataset_error(path, e.to_string()))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read(path)?).map_err(|m| dataset_error(path, m))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read(path)?).map_err(|m| dataset_error(path, m))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    Ok(std::fs::write(path, encode_image(image))?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(mask))?)
}
