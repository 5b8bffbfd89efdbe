//! Model checkpoints.
//!
//! Layout, all integers u32 little-endian:
//! magic `GMCK`, version, config length, config as JSON, parameter count,
//! then per parameter: name length, UTF-8 name, rank, dims, and the values
//! as little-endian `f32`. Parameters appear in declaration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::network::{GlobalMindModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &GlobalMindModel<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, config.len());
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params.len());
    for p in model.params.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.ndim());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(FormatError::Truncated {
            expected: (self.pos as u64).saturating_add(n as u64),
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GlobalMindModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| FormatError::BadMagic {
        expected: "GMCK".into(),
        found: String::from_utf8_lossy(bytes).into_owned(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "GMCK".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| FormatError::Malformed(format!("config record: {e}")))?;
    let count = r.u32()? as usize;
    let mut values = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or(FormatError::Malformed(format!("{name}: too large")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes((bytes.len() - r.pos) as u64).into());
    }
    // the seed is irrelevant: every value is overwritten below
    let mut model = GlobalMindModel::init_he_normal(config, 0)?;
    model.params.load_values(values)?;
    Ok(model)
}

pub fn save_checkpoint(model: &GlobalMindModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GlobalMindModel<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GlobalMindModel<f32> {
        let cfg = ModelConfig {
            channels: 4,
            ..ModelConfig::with_bands(3)
        };
        GlobalMindModel::init_he_normal(cfg, 7).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&small()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(FormatError::Version(9)))));
        let mut long = bytes;
        long.push(1);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }
}
