//! Parameter checkpoints: a `u32` little-endian header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{model_init, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(config: ModelConfig, seed: u64, epoch: usize, params: &Params<S>) -> Self {
        Checkpoint {
            config,
            seed,
            epoch,
            params: params.cast(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let named = self.params.named_tensors();
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            tensors: named
                .iter()
                .map(|(name, t, _)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = named.iter().map(|(_, t, _)| t.len()).sum();
        let mut out = Vec::with_capacity(4 + json.len() + 4 * n_values);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t, _) in &named {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let len_bytes: [u8; 4] = bytes
            .get(..4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("truncated header length".into()))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(4..4 + header_len)
            .ok_or_else(|| bad(format!("header of {header_len} bytes exceeds file")))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        header.config.validate()?;
        // Fresh parameters give the expected layout; values are overwritten.
        let mut params: Params<f32> = model_init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut offset = 4 + header_len;
        {
            let mut named = params.named_tensors_mut();
            if named.len() != header.tensors.len() {
                return Err(bad(format!(
                    "header lists {} tensors, configuration has {}",
                    header.tensors.len(),
                    named.len()
                )));
            }
            for ((name, t, _), entry) in named.iter_mut().zip(&header.tensors) {
                if *name != entry.name || t.shape != entry.shape {
                    return Err(bad(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        entry.name, entry.shape, name, t.shape
                    )));
                }
                let n = t.len() * 4;
                let block = bytes
                    .get(offset..offset + n)
                    .ok_or_else(|| bad(format!("tensor {name} truncated at byte {offset}")))?;
                for (v, chunk) in t.data.iter_mut().zip(block.chunks_exact(4)) {
                    *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                }
                offset += n;
            }
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
