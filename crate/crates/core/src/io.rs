//! Bi-temporal raster file formats.
//!
//! `HSC1` cube: 28-byte header then band-sequential little-endian `f32`.
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `HSC1`                   |
//! | 4      | 4    | height, u32 LE                 |
//! | 8      | 4    | width, u32 LE                  |
//! | 12     | 4    | bands, u32 LE                  |
//! | 16     | 8    | dtype tag `f32le`, NUL padded  |
//! | 24     | 4    | layout tag `bsq`, NUL padded   |
//! | 28     | H·W·B·4 | payload, band by band, rows top to bottom |
//!
//! `CHL1` label raster: magic, height and width (u32 LE), then `H·W` bytes
//! in row-major order with values 0 (unchanged), 1 (changed), 255
//! (unlabeled). Predicted binary maps use the same container with values 0/1.

use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};
use crate::raster::{BinaryMap, HyperCube, LabelRaster};
use crate::tensor::Tensor;

pub const HSC_MAGIC: &[u8; 4] = b"HSC1";
pub const CHL_MAGIC: &[u8; 4] = b"CHL1";
pub const HSC_HEADER_LEN: usize = 28;
pub const CHL_HEADER_LEN: usize = 12;
const DTYPE_TAG: &[u8; 8] = b"f32le\0\0\0";
const LAYOUT_TAG: &[u8; 4] = b"bsq\0";

/// Payload bytes an `HSC1` file of the given dims must carry.
pub fn hsc_payload_len(h: u64, w: u64, b: u64) -> u64 {
    h * w * b * 4
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn tag_str(tag: &[u8]) -> String {
    String::from_utf8_lossy(tag).trim_end_matches('\0').to_string()
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<(), FormatError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: tag_str(magic),
            found: tag_str(&bytes[..bytes.len().min(4)]),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: u64) -> Result<(), FormatError> {
    let found = bytes.len() as u64;
    if found < expected {
        return Err(FormatError::Truncated { expected, found });
    }
    if found > expected {
        return Err(FormatError::TrailingBytes(found - expected));
    }
    Ok(())
}

pub fn encode_hsc(cube: &HyperCube) -> Vec<u8> {
    let (h, w, b) = cube.dims();
    let mut out = Vec::with_capacity(HSC_HEADER_LEN + h * w * b * 4);
    out.extend_from_slice(HSC_MAGIC);
    for d in [h, w, b] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(DTYPE_TAG);
    out.extend_from_slice(LAYOUT_TAG);
    let data = cube.tensor().data();
    for band in 0..b {
        for px in 0..h * w {
            out.extend_from_slice(&data[px * b + band].to_le_bytes());
        }
    }
    out
}

pub fn decode_hsc(bytes: &[u8]) -> Result<HyperCube> {
    check_magic(bytes, HSC_MAGIC)?;
    if bytes.len() < HSC_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HSC_HEADER_LEN as u64,
            found: bytes.len() as u64,
        }
        .into());
    }
    let (h, w, b) = (u32_at(bytes, 4), u32_at(bytes, 8), u32_at(bytes, 12));
    if &bytes[16..24] != DTYPE_TAG {
        return Err(FormatError::Dtype(tag_str(&bytes[16..24])).into());
    }
    if &bytes[24..28] != LAYOUT_TAG {
        return Err(FormatError::Layout(tag_str(&bytes[24..28])).into());
    }
    if h == 0 || w == 0 || b == 0 {
        return Err(FormatError::Malformed(format!("empty cube {h}×{w}×{b}")).into());
    }
    let payload = hsc_payload_len(h as u64, w as u64, b as u64);
    check_len(bytes, HSC_HEADER_LEN as u64 + payload)?;
    let (h, w, b) = (h as usize, w as usize, b as usize);
    let body = &bytes[HSC_HEADER_LEN..];
    let mut data = vec![0f32; h * w * b];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (band, px) = (i / (h * w), i % (h * w));
        data[px * b + band] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    HyperCube::new(Tensor::new(&[h, w, b], data)?)
}

pub fn write_hsc(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_hsc(cube))?;
    Ok(())
}

pub fn read_hsc(path: impl AsRef<Path>) -> Result<HyperCube> {
    decode_hsc(&fs::read(path)?)
}

fn encode_chl(h: usize, w: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHL_HEADER_LEN + data.len());
    out.extend_from_slice(CHL_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(data);
    out
}

fn decode_chl(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    check_magic(bytes, CHL_MAGIC)?;
    if bytes.len() < CHL_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: CHL_HEADER_LEN as u64,
            found: bytes.len() as u64,
        }
        .into());
    }
    let (h, w) = (u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize);
    check_len(bytes, (CHL_HEADER_LEN + h * w) as u64)?;
    Ok((h, w, bytes[CHL_HEADER_LEN..].to_vec()))
}

pub fn encode_labels(labels: &LabelRaster) -> Vec<u8> {
    encode_chl(labels.height(), labels.width(), labels.data())
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelRaster> {
    let (h, w, data) = decode_chl(bytes)?;
    LabelRaster::new(h, w, data)
}

pub fn write_labels(labels: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelRaster> {
    decode_labels(&fs::read(path)?)
}

pub fn write_binary_map(map: &BinaryMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_chl(map.height(), map.width(), map.data()))?;
    Ok(())
}

pub fn read_binary_map(path: impl AsRef<Path>) -> Result<BinaryMap> {
    let (h, w, data) = decode_chl(&fs::read(path)?)?;
    BinaryMap::new(h, w, data)
}
