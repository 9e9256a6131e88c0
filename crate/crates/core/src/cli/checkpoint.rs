//! `.ssck` parameter checkpoints.
//!
//! Layout (little-endian): `b"SSCK"`, `u32` version, `u64` training step,
//! 32-byte configuration hash, `u32` entry count, then per entry `u32` name
//! length, UTF-8 name, `u32` rank, `u64` extents, `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use numcore::{ParamStore, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated checkpoint")]
    Truncated { path: PathBuf },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// Named parameter table with the step and configuration it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    pub params: ParamStore<f32>,
}

/// SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated {
                path: self.path.to_path_buf(),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn malformed(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

impl Checkpoint {
    pub fn new(step: u64, config_hash: [u8; 32], params: ParamStore<f32>) -> Self {
        Self {
            step,
            config_hash,
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint image. Parameters named `*.bias` are marked exempt.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.malformed("parameter name is not UTF-8"))?
                .to_owned();
            if params.find(&name).is_some() {
                return Err(r.malformed(format!("duplicate parameter {name}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.malformed(format!("{name}: shape {shape:?} overflows")))?;
            let data: Vec<f32> = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.malformed(format!("{name} contains non-finite values")));
            }
            let value = Tensor::new(shape, data).map_err(|e| r.malformed(e.to_string()))?;
            let exempt = name.ends_with(".bias");
            params.add(name, value, exempt);
        }
        if r.pos != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            step,
            config_hash,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes, path)?)
    }

    /// Parameters whose names start with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> ParamStore<f32> {
        let head = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (name, p) in self.params.iter() {
            if let Some(rest) = name.strip_prefix(&head) {
                let id = out.add(rest, p.value.clone(), p.exempt);
                out.get_mut(id).trainable = p.trainable;
            }
        }
        out
    }

    /// Appends every parameter of `store` under `prefix.`.
    pub fn insert_section(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, p) in store.iter() {
            self.params.add(format!("{prefix}.{name}"), p.value.clone(), p.exempt);
        }
    }
}
