//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"RFBRIDGE"
//! version  u32      FORMAT_VERSION
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     JSON: model config, schedule, step, config echo, tensor table
//! payload  ...      f32 values of every tensor, in tensor-table order
//! ```
//!
//! In-memory parameters are `f64`; the payload stores them as `f32`. A model
//! whose parameters are already `f32`-representable (fresh initialisation, or
//! anything that went through a checkpoint) round-trips bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::networks::{ModelConfig, RefineBridgeModel};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RFBRIDGE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: Schedule,
    train_step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A model together with the schedule it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: RefineBridgeModel,
    pub schedule: Schedule,
    pub train_step: u64,
    /// Resolved run configuration, echoed for provenance.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            model: self.model.config().clone(),
            schedule: self.schedule,
            train_step: self.train_step,
            config: self.config.clone(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 12 {
            return Err(CheckpointError::Truncated {
                expected: MAGIC.len() + 12,
                found: bytes.len(),
            }
            .into());
        }
        let version = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnknownVersion(version).into());
        }
        let hlen = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes")) as usize;
        let rest = &rest[12..];
        if rest.len() < hlen {
            return Err(CheckpointError::CorruptHeader(format!(
                "header length {hlen} exceeds file size {}",
                bytes.len()
            ))
            .into());
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let payload = &rest[hlen..];

        let numel: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if payload.len() < 4 * numel {
            return Err(CheckpointError::Truncated {
                expected: 4 * numel,
                found: payload.len(),
            }
            .into());
        }
        if payload.len() > 4 * numel {
            return Err(CheckpointError::TrailingBytes(payload.len() - 4 * numel).into());
        }

        let mut model = RefineBridgeModel::new(header.model.clone(), 0)
            .map_err(|e| CheckpointError::CorruptHeader(format!("model config: {e}")))?;
        if header.tensors.len() != model.params().len() {
            return Err(CheckpointError::CorruptHeader(format!(
                "{} tensors listed, model has {}",
                header.tensors.len(),
                model.params().len()
            ))
            .into());
        }
        let mut offset = 0;
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(CheckpointError::CorruptHeader(format!(
                    "unsupported dtype {}",
                    entry.dtype
                ))
                .into());
            }
            let n: usize = entry.shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            offset += 4 * n;
            let tensor = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| CheckpointError::CorruptHeader(format!("{}: {e}", entry.name)))?;
            model
                .params_mut()
                .assign(&entry.name, tensor)
                .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        }
        Ok(Self {
            model,
            schedule: header.schedule,
            train_step: header.train_step,
            config: header.config,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            base_channels: 8,
            embed_dim: 4,
            time_embed_dim: 16,
            time_hidden: 16,
            ..ModelConfig::new(8, 16)
        };
        let mut model = RefineBridgeModel::new(cfg, 7).unwrap();
        model.randomize(8);
        Checkpoint {
            model,
            schedule: Schedule::SHORT_HORIZON,
            train_step: 42,
            config: serde_json::json!({"note": "test"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.train_step, 42);
        assert_eq!(back.schedule, ck.schedule);
        assert_eq!(back.model.config(), ck.model.config());
        for ((n1, a), (n2, b)) in ck.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(n1, n2);
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn distinct_errors_for_each_corruption() {
        let bytes = sample().to_bytes().unwrap();

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::Truncated { .. })),
            "{err}"
        );

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(
            err,
            Error::Checkpoint(CheckpointError::UnknownVersion(99))
        ));

        let mut bad = bytes.clone();
        bad[21] = b'#';
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::CorruptHeader(_))),
            "{err}"
        );

        let mut bad = bytes.clone();
        bad.extend_from_slice(&[0, 0, 0, 0]);
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(
            err,
            Error::Checkpoint(CheckpointError::TrailingBytes(4))
        ));
    }
}
