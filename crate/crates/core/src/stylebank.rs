//! Style references: precomputed embedding banks with a binary file format,
//! in-batch circular pairing and Gaussian noise moments.
//!
//! File layout (little-endian): `b"SSBK"`, `u32` version (1), `u32` D,
//! `u64` count, then `count·D` `f32` values row-major.

use std::fs;
use std::path::{Path, PathBuf};

use numcore::{Real, Tensor};
use rand::Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nst::{StyleEmbedding, StyleExtractor};
use crate::rng::SampleRng;

pub const BANK_MAGIC: [u8; 4] = *b"SSBK";
pub const BANK_VERSION: u32 = 1;
pub const BANK_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("{path}: not a style bank (bad magic {found:?})")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported style bank version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated style bank ({len} bytes, expected {expected})")]
    Truncated { path: PathBuf, len: usize, expected: usize },
    #[error("{path}: style bank length {len} does not match header (expected {expected})")]
    LengthMismatch { path: PathBuf, len: usize, expected: usize },
    #[error("{path}: style bank contains non-finite values")]
    NonFinite { path: PathBuf },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

/// Immutable collection of style codes of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBank {
    dim: usize,
    data: Vec<f32>,
    source_tag: String,
}

impl StyleBank {
    pub fn new(dim: usize, data: Vec<f32>, source_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "bank of {} values cannot hold rows of length {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("bank contains non-finite values"));
        }
        Ok(Self {
            dim,
            data,
            source_tag: source_tag.into(),
        })
    }

    pub fn from_embeddings(rows: &[StyleEmbedding], source_tag: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, StyleEmbedding::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("bank rows have different lengths"));
        }
        Self::new(dim, rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect(), source_tag)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding(&self, i: usize) -> StyleEmbedding {
        StyleEmbedding::new(self.row(i).to_vec()).expect("bank rows are finite")
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    /// Same embeddings, bitwise.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BANK_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a bank image; `path` only labels errors and the source tag.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, BankError> {
        let path_buf = path.to_path_buf();
        if bytes.len() < 4 {
            return Err(BankError::Truncated {
                path: path_buf,
                len: bytes.len(),
                expected: BANK_HEADER_LEN,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != BANK_MAGIC {
            return Err(BankError::BadMagic { path: path_buf, found: magic });
        }
        if bytes.len() < BANK_HEADER_LEN {
            return Err(BankError::Truncated {
                path: path_buf,
                len: bytes.len(),
                expected: BANK_HEADER_LEN,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != BANK_VERSION {
            return Err(BankError::UnsupportedVersion { path: path_buf, version });
        }
        let dim = u32_at(8) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if dim == 0 || count == 0 {
            return Err(BankError::Invalid {
                path: path_buf,
                reason: format!("empty bank (D = {dim}, count = {count})"),
            });
        }
        let expected = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(BANK_HEADER_LEN))
            .ok_or_else(|| BankError::Invalid {
                path: path_buf.clone(),
                reason: format!("header size D = {dim}, count = {count} overflows"),
            })?;
        if bytes.len() < expected {
            return Err(BankError::Truncated {
                path: path_buf,
                len: bytes.len(),
                expected,
            });
        }
        if bytes.len() > expected {
            return Err(BankError::LengthMismatch {
                path: path_buf,
                len: bytes.len(),
                expected,
            });
        }
        let data: Vec<f32> = bytes[BANK_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BankError::NonFinite { path: path_buf });
        }
        Ok(Self {
            dim,
            data,
            source_tag: format!("file:{}", path.display()),
        })
    }
}

/// Codes of every image, in input order.
pub fn build_bank<'a, T: Real + 'a>(
    images: impl IntoIterator<Item = &'a Tensor<T>>,
    extractor: &StyleExtractor<T>,
    source_tag: impl Into<String>,
) -> Result<StyleBank> {
    let rows = images
        .into_iter()
        .map(|img| extractor.extract(img))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::invalid("cannot build a style bank from zero images"));
    }
    StyleBank::from_embeddings(&rows, source_tag)
}

pub fn save_bank(bank: &StyleBank, path: &Path) -> Result<()> {
    fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: &Path) -> Result<StyleBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(StyleBank::from_bytes(&bytes, path)?)
}

/// Row index picked uniformly with replacement from substream `style.pick`.
pub fn pick_style(bank: &StyleBank, rng: &SampleRng) -> usize {
    rng.sub("style.pick").random_range(0..bank.count())
}

/// One uniformly drawn row per substream.
pub fn sample_styles(bank: &StyleBank, rngs: &[SampleRng]) -> Vec<StyleEmbedding> {
    rngs.iter().map(|r| bank.embedding(pick_style(bank, r))).collect()
}

/// Style index of each sample under the circular shift `(b − b0) mod B`.
pub fn inbatch_pairing(batch: usize, offset: usize) -> Vec<usize> {
    if batch == 1 {
        log::warn!("in-batch stylization with a batch of one pairs the sample with itself");
    }
    if batch == 0 {
        return Vec::new();
    }
    let shift = offset % batch;
    (0..batch).map(|b| (b + batch - shift) % batch).collect()
}

/// Per-coordinate mean and population standard deviation over the bank rows.
pub fn noise_style_params(bank: &StyleBank) -> (Vec<f32>, Vec<f32>) {
    let n = bank.count() as f64;
    let mut mean = vec![0.0f64; bank.dim()];
    for row in bank.rows() {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; bank.dim()];
    for row in bank.rows() {
        var.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, &v), &m)| *s += (v as f64 - m).powi(2));
    }
    (
        mean.iter().map(|&m| m as f32).collect(),
        var.iter().map(|&s| (s / n).sqrt() as f32).collect(),
    )
}
