//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "DYADCKPT"
//! version   u32
//! meta_len  u64       length of the JSON metadata block
//! body_len  u64       length of the tensor payload
//! sha256    32 bytes  digest of metadata ‖ payload
//! metadata  JSON      configs, epoch, loss history, normalization stats, tensor names/shapes
//! payload   f32 LE    tensors in declared order, each row-major
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::config::{ModelConfig, TrainConfig};
use crate::datamodel::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::DualSpeakerModel;

pub const MAGIC: &[u8; 8] = b"DYADCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    /// Epoch (1-based) whose weights are stored.
    pub epoch: usize,
    pub history: Vec<EpochLosses>,
    pub norm_stats: NormalizationStats,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    epoch: usize,
    history: Vec<EpochLosses>,
    norm_stats: NormalizationStats,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DualSpeakerModel<f32>> {
        DualSpeakerModel::from_params(self.model_cfg.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            model_cfg: self.model_cfg.clone(),
            train_cfg: self.train_cfg.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            norm_stats: self.norm_stats.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, v)| TensorEntry {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut body = Vec::with_capacity(self.params.num_scalars() * 4);
        for (_, _, v) in self.params.iter() {
            for x in v.as_standard_layout().iter() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(&meta);
        hasher.update(&body);
        let digest = hasher.finalize();

        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&meta);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad magic; not a checkpoint file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let meta_len = u64_at(12) as usize;
        let body_len = u64_at(20) as usize;
        let digest = &bytes[28..60];
        let expected = HEADER_LEN.checked_add(meta_len).and_then(|n| n.checked_add(body_len));
        if expected != Some(bytes.len()) {
            return Err(Error::Integrity(format!(
                "declared {meta_len} + {body_len} bytes after the header, file has {}",
                bytes.len() - HEADER_LEN
            )));
        }
        let meta_bytes = &bytes[HEADER_LEN..HEADER_LEN + meta_len];
        let body = &bytes[HEADER_LEN + meta_len..];
        let mut hasher = Sha256::new();
        hasher.update(meta_bytes);
        hasher.update(body);
        if hasher.finalize().as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let meta: Meta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
        let total: usize = meta.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        if total * 4 != body.len() {
            return Err(Error::Integrity(format!(
                "tensor table needs {} bytes, payload has {}",
                total * 4,
                body.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut offset = 0;
        for t in &meta.tensors {
            let n = t.shape[0] * t.shape[1];
            let values: Vec<f32> = body[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            params.push(
                t.name.clone(),
                Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("sized above"),
            );
        }
        meta.model_cfg.validate()?;
        meta.train_cfg.validate()?;
        meta.norm_stats.validate()?;
        // validates names and shapes against the configuration
        DualSpeakerModel::from_params(meta.model_cfg.clone(), params.clone())?;
        Ok(Self {
            model_cfg: meta.model_cfg,
            train_cfg: meta.train_cfg,
            epoch: meta.epoch,
            history: meta.history,
            norm_stats: meta.norm_stats,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::tiny();
        let model = DualSpeakerModel::<f32>::new(cfg.clone(), 3).unwrap();
        Checkpoint {
            model_cfg: cfg,
            train_cfg: TrainConfig::toy(),
            epoch: 2,
            history: vec![
                EpochLosses { epoch: 1, train_loss: 0.5, val_loss: Some(0.6) },
                EpochLosses { epoch: 2, train_loss: 0.25, val_loss: None },
            ],
            norm_stats: NormalizationStats::new(vec![0.0; 56], vec![1.0; 56]).unwrap(),
            params: model.into_params(),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Integrity(_))));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));

        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&versioned),
            Err(Error::UnsupportedVersion { found: 7, supported: 1 })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"short"), Err(Error::Integrity(_))));
    }
}
