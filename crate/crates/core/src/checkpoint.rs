//! Versioned binary checkpoints: policy parameters plus optimizer state.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then the parameters, Adam first and second moments as
//! little-endian `f64` arrays.

use crate::optim::{AdamConfig, AdamW};
use crate::policy::{PolicyParams, PARAM_COUNT};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RLRFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Sft,
    Grpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    /// Steps completed in `stage`.
    pub step: usize,
    pub seed: u64,
    pub param_count: usize,
    pub adam: AdamConfig,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: PolicyParams,
    pub optimizer: AdamW,
}

fn write_f64s(out: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    v.iter()
        .for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    out.write_all(&buf)
}

fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut buf = vec![0u8; n * 8];
    input
        .read_exact(&mut buf)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        step: usize,
        seed: u64,
        params: PolicyParams,
        optimizer: AdamW,
    ) -> Self {
        let header = CheckpointHeader {
            stage,
            step,
            seed,
            param_count: PARAM_COUNT,
            adam: optimizer.config,
            adam_t: optimizer.t,
        };
        Self {
            header,
            params,
            optimizer,
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<(), CheckpointError> {
        let header = serde_json::to_vec(&CheckpointHeader {
            adam: self.optimizer.config,
            adam_t: self.optimizer.t,
            ..self.header.clone()
        })
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        write_f64s(out, self.params.as_slice())?;
        write_f64s(out, &self.optimizer.m)?;
        write_f64s(out, &self.optimizer.v)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        input.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.param_count != PARAM_COUNT {
            return Err(CheckpointError::Corrupt(format!(
                "{} parameters, this build expects {}",
                header.param_count, PARAM_COUNT
            )));
        }
        let params = PolicyParams::from_vec(read_f64s(input, PARAM_COUNT)?)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let m = read_f64s(input, PARAM_COUNT)?;
        let v = read_f64s(input, PARAM_COUNT)?;
        let optimizer = AdamW {
            config: header.adam,
            m,
            v,
            t: header.adam_t,
        };
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    /// Writes to a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
