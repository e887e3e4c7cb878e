//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order. Writes
//! go to a temporary sibling and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"PRISMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Adapted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form run metadata (head config, metrics).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    model_config: ModelConfig,
    optimizer: Option<AdamWConfig>,
    optimizer_step: usize,
    step: usize,
    epoch: usize,
    seed: u64,
    config_hash: String,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    fn groups(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut g = vec![("params", &self.params)];
        if let Some(opt) = &self.optimizer {
            g.push(("adam_m", &opt.m));
            g.push(("adam_v", &opt.v));
        }
        g
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        for (group, store) in self.groups() {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: name.into(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                });
                for v in t.iter() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            kind: self.kind,
            model_config: self.model_config,
            optimizer: self.optimizer.as_ref().map(|o| o.config),
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
            step: self.step,
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            extra: self.extra.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", t.name)))?;
            pos += 8 * n;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array2::from_shape_vec((t.rows, t.cols), vals).unwrap();
            match t.group.as_str() {
                "params" => params.insert(t.name.clone(), arr),
                "adam_m" => m.insert(t.name.clone(), arr),
                "adam_v" => v.insert(t.name.clone(), arr),
                g => return Err(Error::Checkpoint(format!("unknown tensor group {g}"))),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        let optimizer = header.optimizer.map(|config| AdamW {
            config,
            m,
            v,
            step: header.optimizer_step,
        });
        Ok(Self {
            kind: header.kind,
            model_config: header.model_config,
            params,
            optimizer,
            step: header.step,
            epoch: header.epoch,
            seed: header.seed,
            config_hash: header.config_hash,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The model described by this checkpoint (head tensors are ignored).
    pub fn model(&self) -> Result<super::Model> {
        super::Model::from_params(self.model_config, self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn sample_checkpoint() -> Checkpoint {
        let model = Model::init(crate::model::ModelConfig::tiny(), 3).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = model.params.clone();
        let mut params = model.params.clone();
        opt.update(&mut params, &grads, |n| n.starts_with("enc."));
        Checkpoint {
            kind: CheckpointKind::Pretrain,
            model_config: model.config,
            params,
            optimizer: Some(opt),
            step: 7,
            epoch: 2,
            seed: 42,
            config_hash: config_hash(&model.config),
            extra: serde_json::json!({"note": "x"}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        assert!(!dir.path().join("a/b.ckpt.tmp").exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = crate::model::ModelConfig::tiny();
        let b = crate::model::ModelConfig { lambda: 0.2, ..a };
        assert_eq!(config_hash(&a), config_hash(&a));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
