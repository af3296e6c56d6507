//! `SPXW` weight files.
//!
//! Layout (little-endian): magic `SPXW`, u32 version, u32 tensor count, then
//! per tensor: u16 name length, name bytes, u8 rank, rank x u32 dims, f32
//! data. The first tensor is a rank-1 pseudo-tensor `config` holding the
//! six size fields as f32 values followed by the seed as two raw u32 words
//! (low, high) stored bit-for-bit in f32 slots.

use std::fs;
use std::path::Path;

use super::{tensor_specs, ModelConfig, TransformerModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPXW";
pub const VERSION: u32 = 1;
const CONFIG_LEN: usize = 8;

pub fn save_weights(model: &TransformerModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<TransformerModel> {
    from_bytes(&fs::read(path)?)
}

fn config_tensor(config: &ModelConfig) -> Vec<u32> {
    let sizes = [
        config.vocab_size,
        config.hidden_dim,
        config.num_layers,
        config.num_heads,
        config.ffn_dim,
        config.max_context,
    ];
    let mut words: Vec<u32> = sizes.iter().map(|v| (*v as f32).to_bits()).collect();
    words.push(config.seed as u32);
    words.push((config.seed >> 32) as u32);
    words
}

fn write_header(out: &mut Vec<u8>, name: &str, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
}

pub(crate) fn to_bytes(model: &TransformerModel) -> Vec<u8> {
    let specs = tensor_specs(model.config());
    let mut out = Vec::with_capacity(model.parameter_count() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((specs.len() + 1) as u32).to_le_bytes());
    write_header(&mut out, "config", &[CONFIG_LEN]);
    for w in config_tensor(model.config()) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for (spec, data) in specs.iter().zip(model.tensors()) {
        write_header(&mut out, &spec.name, &spec.dims);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Bounds-checked little-endian reader; every short read is a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "unexpected end of file at byte {} (need {n} more)",
                    self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(Error::Format(format!(
                "unsupported version {v}, expected {expected}"
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }

    fn header(&mut self) -> Result<(String, Vec<usize>)> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = self.u8()? as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        Ok((name, dims))
    }
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<TransformerModel> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let count = r.u32()? as usize;

    let (name, dims) = r.header()?;
    if name != "config" || dims != [CONFIG_LEN] {
        return Err(Error::ShapeMismatch(format!(
            "first tensor must be config[{CONFIG_LEN}], got {name}{dims:?}"
        )));
    }
    let words: Vec<u32> = (0..CONFIG_LEN).map(|_| r.u32()).collect::<Result<_>>()?;
    let size = |i: usize| -> Result<usize> {
        let v = f32::from_bits(words[i]);
        if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Format(format!(
                "config field {i} is not a count: {v}"
            )))
        }
    };
    let config = ModelConfig {
        vocab_size: size(0)?,
        hidden_dim: size(1)?,
        num_layers: size(2)?,
        num_heads: size(3)?,
        ffn_dim: size(4)?,
        max_context: size(5)?,
        seed: words[6] as u64 | (words[7] as u64) << 32,
    };
    config.validate()?;

    let specs = tensor_specs(&config);
    if count != specs.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "config implies {} tensors, file declares {}",
            specs.len() + 1,
            count
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (name, dims) = r.header()?;
        if name != spec.name || dims != spec.dims {
            return Err(Error::ShapeMismatch(format!(
                "expected {}{:?}, found {name}{dims:?}",
                spec.name, spec.dims
            )));
        }
        tensors.push(r.f32s(spec.len())?);
    }
    r.finish()?;
    TransformerModel::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerModel {
        TransformerModel::init(ModelConfig {
            vocab_size: 20,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_context: 16,
            seed: u64::MAX - 3,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spxw");
        save_weights(&m, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.config().seed, u64::MAX - 3);
        assert_eq!(to_bytes(&loaded), fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = to_bytes(&model());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = to_bytes(&model());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = to_bytes(&model());
        bytes[4] = 2;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn edited_dims_header_is_a_shape_mismatch() {
        let bytes = to_bytes(&model());
        // Locate the embedding header: name "embedding", rank 2, dims [20, 8].
        let at = bytes.windows(9).position(|w| w == b"embedding").unwrap();
        let dim0 = at + 9 + 1;
        let mut edited = bytes.clone();
        edited[dim0..dim0 + 4].copy_from_slice(&21u32.to_le_bytes());
        assert!(matches!(from_bytes(&edited), Err(Error::ShapeMismatch(_))));
    }
}
