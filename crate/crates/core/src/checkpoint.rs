//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` length of a JSON header,
//! the header, then every parameter as little-endian `f32`, then optimiser
//! moments as little-endian `f64`. Files are written to a temporary name and
//! renamed into place.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, AdamSlot};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VSSLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} is not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path} has format version {found}, expected {FORMAT_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint config hash {found} does not match {expected}; pass --force to load anyway")]
    HashMismatch { found: String, expected: String },
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub param: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimisation steps completed.
    pub step: usize,
    pub best_loss: Option<f64>,
    /// Free-form run metadata (resolved config and similar).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub slots: Vec<SlotEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub store: ParamStore<f32>,
    pub adam_slots: Vec<AdamSlot>,
}

impl Checkpoint {
    pub fn new(
        config_hash: &str,
        epoch: usize,
        step: usize,
        best_loss: Option<f64>,
        meta: serde_json::Value,
        store: &ParamStore<f32>,
        adam: Option<&Adam>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), group: p.group, shape: p.value.shape().to_vec() })
            .collect();
        let (slots, adam_slots) = match adam {
            Some(a) => (
                a.slots.iter().map(|(&param, s)| SlotEntry { param, step: s.step }).collect(),
                a.slots.values().cloned().collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        Checkpoint {
            header: Header { config_hash: config_hash.to_string(), epoch, step, best_loss, meta, params, slots },
            store: store.clone(),
            adam_slots,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("tmp");
        let result = (|| {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            let header = serde_json::to_vec(&self.header).expect("header serialises");
            f.write_all(MAGIC)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes())?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            for (_, p) in self.store.iter() {
                for &v in p.value.data() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            for s in &self.adam_slots {
                for &v in s.m.iter().chain(&s.v) {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        result.map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let corrupt = |reason: &str| CheckpointError::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io)?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { path: path.to_path_buf(), found: version });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        let mut pos = 20 + hlen;
        let mut store = ParamStore::new();
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| corrupt("truncated parameters"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            store.add(p.name.clone(), p.group, Tensor::new(p.shape.clone(), data));
            pos += 4 * n;
        }
        let mut adam_slots = Vec::new();
        for s in &header.slots {
            let n = header.params.get(s.param).ok_or_else(|| corrupt("slot for unknown parameter"))?;
            let n: usize = n.shape.iter().product();
            let raw = bytes.get(pos..pos + 16 * n).ok_or_else(|| corrupt("truncated optimiser state"))?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            adam_slots.push(AdamSlot { step: s.step, m: vals[..n].to_vec(), v: vals[n..].to_vec() });
            pos += 16 * n;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { header, store, adam_slots })
    }

    /// Fails unless `expected` matches the stored hash or `force` is set.
    pub fn check_hash(&self, expected: &str, force: bool) -> Result<(), CheckpointError> {
        if self.header.config_hash != expected {
            if force {
                log::warn!("loading checkpoint with config hash {} (expected {expected})", self.header.config_hash);
            } else {
                return Err(CheckpointError::HashMismatch {
                    found: self.header.config_hash.clone(),
                    expected: expected.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Copies stored values into `target` by name, requiring identical names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        if target.len() != self.store.len() {
            return Err(CheckpointError::Param {
                name: "*".into(),
                reason: format!("model has {} tensors, checkpoint has {}", target.len(), self.store.len()),
            });
        }
        for (id, p) in self.store.iter() {
            let tid = target.find(&p.name).ok_or_else(|| CheckpointError::Param {
                name: p.name.clone(),
                reason: "not present in model".into(),
            })?;
            if tid != id || target.get(tid).shape() != p.value.shape() {
                return Err(CheckpointError::Param { name: p.name.clone(), reason: "layout differs from model".into() });
            }
            *target.get_mut(tid) = p.value.clone();
        }
        Ok(())
    }

    pub fn restore_adam(&self, adam: &mut Adam) {
        adam.slots = self.header.slots.iter().zip(&self.adam_slots).map(|(e, s)| (e.param, s.clone())).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;

    #[test]
    fn round_trip_and_hash_guard() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", ParamGroup::Encoder, Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]));
        store.add("b", ParamGroup::MiHead, Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.slots.insert(1, AdamSlot { step: 7, m: vec![0.5, 0.25, 1e-9], v: vec![1.0, 2.0, 3.0] });
        let ck = Checkpoint::new("abc", 3, 42, Some(1.5), serde_json::json!({"k": 1}), &store, Some(&adam));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.store.fingerprint(), store.fingerprint());
        let mut a2 = Adam::new(AdamConfig::default());
        back.restore_adam(&mut a2);
        assert_eq!(a2.slots, adam.slots);
        assert!(back.check_hash("abc", false).is_ok());
        assert!(matches!(back.check_hash("xyz", false), Err(CheckpointError::HashMismatch { .. })));
        assert!(back.check_hash("xyz", true).is_ok());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::BadMagic { .. })));
        let mut store = ParamStore::<f32>::new();
        store.add("a", ParamGroup::Encoder, Tensor::new(vec![4], vec![1.0; 4]));
        Checkpoint::new("h", 0, 0, None, serde_json::Value::Null, &store, None).save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::Corrupt { .. })));
    }
}
