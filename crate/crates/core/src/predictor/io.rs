//! `SPXP` predictor files.
//!
//! Layout (little-endian): magic `SPXP`, u32 version, u32 k, u32 hidden
//! width, u32 block count, then per block: u32 layer id, f32 threshold, and
//! the f32 tensors w1 (`hidden x 3k`, output-major), b1, w2, b2.

use std::fs;
use std::path::Path;

use super::{PredictorBank, PredictorWeights};
use crate::error::{Error, Result};
use crate::model::io::Reader;

pub const MAGIC: &[u8; 4] = b"SPXP";
pub const VERSION: u32 = 1;

impl PredictorBank {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for word in [
            VERSION,
            self.k as u32,
            self.hidden_dim as u32,
            self.predictors.len() as u32,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for (&layer, w) in &self.predictors {
            out.extend_from_slice(&(layer as u32).to_le_bytes());
            out.extend_from_slice(&w.threshold.to_le_bytes());
            for v in
                w.w1.iter()
                    .chain(&w.b1)
                    .chain(&w.w2)
                    .chain(std::iter::once(&w.b2))
            {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let k = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let count = r.u32()? as usize;
        if k == 0 || hidden == 0 {
            return Err(Error::Format(format!(
                "degenerate predictor shape k={k}, hidden={hidden}"
            )));
        }
        let input = 3 * k;
        let mut bank = PredictorBank::new(k, hidden);
        for _ in 0..count {
            let layer = r.u32()? as usize;
            let threshold = r.f32()?;
            let w = PredictorWeights {
                input_dim: input,
                hidden_dim: hidden,
                w1: r.f32s(input * hidden)?,
                b1: r.f32s(hidden)?,
                w2: r.f32s(hidden)?,
                b2: r.f32()?,
                threshold,
            };
            w.validate()?;
            if bank.predictors.contains_key(&layer) {
                return Err(Error::Format(format!(
                    "duplicate predictor block for layer {layer}"
                )));
            }
            bank.insert(layer, w)?;
        }
        r.finish()?;
        Ok(bank)
    }
}

pub fn save_predictors(bank: &PredictorBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bank.to_bytes())?;
    Ok(())
}

pub fn load_predictors(path: impl AsRef<Path>) -> Result<PredictorBank> {
    PredictorBank::from_bytes(&fs::read(path)?)
}
