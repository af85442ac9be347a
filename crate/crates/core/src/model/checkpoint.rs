//! Checkpoint file layout (little-endian):
//!
//! ```text
//! magic    "HCKP"
//! version  u32 (= 1)
//! config   9 × u32: input_dim, hidden_dim, split_dim, proj_dim, attn_dim,
//!          n_coarse, n_fine, integration code, aggregator code
//! count    u64 total number of parameters
//! params   count × f64, blocks in BLOCK_NAMES order, each row-major
//! ```
//!
//! Integration codes: 0 none, 1 fine_to_coarse, 2 coarse_to_fine,
//! 3 bidirectional. Aggregator codes: 0 attention, 1 max, 2 mean.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Aggregator, IntegrationMode, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 9 * 4 + 8;

impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.num_params());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.input_dim as u32,
            c.hidden_dim as u32,
            c.split_dim as u32,
            c.proj_dim as u32,
            c.attn_dim as u32,
            c.n_coarse as u32,
            c.n_fine as u32,
            c.integration.code(),
            c.aggregator.code(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for (_, block) in self.blocks() {
            for x in block.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::PayloadSize {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                version,
            });
        }
        let dim = |i: usize| word(i) as usize;
        let integration = IntegrationMode::from_code(word(8))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown integration code {}", word(8))))?;
        let aggregator = Aggregator::from_code(word(9))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown aggregator code {}", word(9))))?;
        let config = ModelConfig {
            input_dim: dim(1),
            hidden_dim: dim(2),
            split_dim: dim(3),
            proj_dim: dim(4),
            attn_dim: dim(5),
            n_coarse: dim(6),
            n_fine: dim(7),
            integration,
            aggregator,
        };
        config.validate()?;
        let count = u64::from_le_bytes(bytes[HEADER_LEN - 8..HEADER_LEN].try_into().unwrap()) as usize;
        let mut params = ModelParams::zeros(&config);
        if count != params.num_params() {
            return Err(Error::DimensionMismatch {
                context: "checkpoint parameter count",
                expected: params.num_params(),
                got: count,
            });
        }
        let expected = HEADER_LEN + 8 * count;
        if bytes.len() != expected {
            return Err(Error::PayloadSize {
                expected,
                found: bytes.len(),
            });
        }
        let flat: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !flat.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        params.assign_flat(&flat)?;
        Ok(params)
    }
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, params.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_bytes(&bytes)
}
