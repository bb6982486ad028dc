//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes   "HDAFLCKP"
//! version  u32 LE
//! length   u64 LE    manifest byte length
//! manifest JSON      names, shapes, dtype, offsets, config hash
//! payload  f64 LE    tensors concatenated in manifest order
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HeadParams, ModelConfig};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"HDAFLCKP";
pub const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "params/";
const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_completed: usize,
    pub episodes_completed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: HeadParams,
    /// Momentum buffers, present when saved by the trainer.
    pub velocity: Option<HeadParams>,
    pub progress: TrainProgress,
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub config_hash: String,
    pub model: ModelConfig,
    pub progress: TrainProgress,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 of the canonical JSON form of a model configuration.
pub fn config_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_vec(model).expect("serialize model config");
    hex::encode(Sha256::digest(&json))
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: HeadParams) -> Self {
        Self {
            model,
            params,
            velocity: None,
            progress: TrainProgress::default(),
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |prefix: &str, params: &HeadParams| {
            params.for_each(&mut |name, t| {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: [t.nrows(), t.ncols()],
                    offset: payload.len(),
                });
                payload.extend(t.iter());
            });
        };
        push(PARAM_PREFIX, &self.params);
        if let Some(v) = &self.velocity {
            push(VELOCITY_PREFIX, v);
        }
        let manifest = Manifest {
            dtype: "f64".into(),
            config_hash: config_hash(&self.model),
            model: self.model.clone(),
            progress: self.progress,
            train_config: self.train_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("serialize manifest");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Load {
            name: "checkpoint".into(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if manifest.dtype != "f64" {
            return Err(bad(format!("unsupported dtype {}", manifest.dtype)));
        }
        if manifest.config_hash != config_hash(&manifest.model) {
            return Err(bad("config hash does not match the stored model config".into()));
        }
        let payload = &bytes[20 + len..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();

        let lookup: std::collections::HashMap<&str, &TensorEntry> =
            manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let template = HeadParams::init(
            &ModelConfig {
                hidden_width: 1,
                ..manifest.model.clone()
            },
            0,
        )?;
        let read = |prefix: &str| -> Result<Option<HeadParams>> {
            if !lookup.keys().any(|k| k.starts_with(prefix)) {
                return Ok(None);
            }
            let mut missing = None;
            let params = template.map(&mut |name, _| {
                let key = format!("{prefix}{name}");
                match lookup.get(key.as_str()) {
                    Some(e) if e.offset + e.shape[0] * e.shape[1] <= data.len() => Array2::from_shape_vec(
                        (e.shape[0], e.shape[1]),
                        data[e.offset..e.offset + e.shape[0] * e.shape[1]].to_vec(),
                    )
                    .expect("shape matches slice"),
                    _ => {
                        missing.get_or_insert(key);
                        Array2::zeros((0, 0))
                    }
                }
            });
            if let Some(key) = missing {
                return Err(bad(format!("tensor `{key}` missing or truncated")));
            }
            params.validate(&manifest.model)?;
            Ok(Some(params))
        };
        let params = read(PARAM_PREFIX)?.ok_or_else(|| bad("no parameter tensors".into()))?;
        let velocity = read(VELOCITY_PREFIX)?;
        Ok(Self {
            model: manifest.model,
            params,
            velocity,
            progress: manifest.progress,
            train_config: manifest.train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("ckpt.partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile {
                    name: "checkpoint".into(),
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            hidden_width: 6,
            heads: 2,
            ..ModelConfig::new(3, 4, 3, 2)
        };
        let params = HeadParams::init(&cfg, 4).unwrap();
        Checkpoint::new(cfg, params)
    }

    #[test]
    fn bytes_round_trip() {
        let mut ck = tiny();
        ck.velocity = Some(ck.params.map(&mut |_, t| t * 0.5));
        ck.progress = TrainProgress {
            epochs_completed: 2,
            episodes_completed: 40,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_hash_rejected() {
        let ck = tiny();
        let mut bytes = ck.to_bytes();
        let pos = bytes.windows(11).position(|w| w == b"config_hash").unwrap();
        // Flip a hex digit of the stored hash.
        let digit = pos + 14;
        bytes[digit] = if bytes[digit] == b'0' { b'1' } else { b'0' };
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = Checkpoint::load("/nonexistent/dir/x.ckpt").unwrap_err();
        assert!(matches!(err, Error::MissingFile { .. }));
    }

    #[test]
    fn bad_magic() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT000000000000000").is_err());
    }
}
