//! Image and tensor file formats: binary PGM (P5) masks/slices and a raw
//! little-endian float32 tensor container for multi-slice stacks.
//!
//! Tensor container layout: magic `TNS1`, u32 ndim, u32 dims[ndim], then
//! ndim-product f32 values, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const TENSOR_MAGIC: &[u8; 4] = b"TNS1";

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major samples; 16-bit sources are kept at full range.
    pub pixels: Vec<u16>,
    pub max_value: u16,
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height {
        return Err(Error::Shape(format!(
            "pixel count {} does not match {}x{}",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    if img.max_value == 0 {
        return Err(Error::Domain("PGM max value must be positive".into()));
    }
    let mut bytes = format!("P5\n{} {}\n{}\n", img.width, img.height, img.max_value).into_bytes();
    if img.max_value > 255 {
        for &p in &img.pixels {
            bytes.extend_from_slice(&p.to_be_bytes());
        }
    } else {
        bytes.extend(img.pixels.iter().map(|&p| p as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (P5) file".into()));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Format("malformed PGM header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| Error::Format("bad PGM header number".into()))?;
    }
    let [width, height, max_value] = fields;
    if max_value == 0 || max_value > 65_535 {
        return Err(Error::Format(format!("unsupported PGM max value {max_value}")));
    }
    pos += 1; // single whitespace after maxval
    let n = width * height;
    let wide = max_value > 255;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(Error::Truncated(format!(
            "PGM payload: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let payload = &bytes[pos..pos + need];
    let pixels = if wide {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload.iter().map(|&b| b as u16).collect()
    };
    Ok(GrayImage { width, height, pixels, max_value: max_value as u16 })
}

pub fn write_tensor(path: &Path, tensor: &DenseTensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + tensor.len() * 4);
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let bytes = fs::read(path)?;
    parse_tensor(&bytes)
}

fn parse_tensor(bytes: &[u8]) -> Result<DenseTensor> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("not a raw tensor file".into()));
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(Error::Truncated(format!(
                "tensor file: need {n} bytes at offset {pos}",
                pos = *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Format(format!("unreasonable tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let len: usize = shape.iter().product();
    let payload = take(&mut pos, len * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseTensor::from_vec(&shape, data)
}
