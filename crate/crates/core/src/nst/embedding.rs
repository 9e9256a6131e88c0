use crate::error::{Error, Result};

/// Default style code length.
pub const DEFAULT_EMBEDDING_DIM: usize = 100;

/// Compact style code of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding(Vec<f32>);

impl StyleEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("style embedding must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("style embedding contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// `(1 − α)·z_c + α·z_s`.
pub fn blend_embeddings(content: &StyleEmbedding, style: &StyleEmbedding, alpha: f64) -> Result<StyleEmbedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("blending factor {alpha} outside [0, 1]")));
    }
    if content.len() != style.len() {
        return Err(Error::invalid(format!(
            "cannot blend embeddings of length {} and {}",
            content.len(),
            style.len()
        )));
    }
    if alpha == 0.0 {
        return Ok(content.clone());
    }
    if alpha == 1.0 {
        return Ok(style.clone());
    }
    let a = alpha as f32;
    let values = content
        .0
        .iter()
        .zip(&style.0)
        .map(|(&c, &s)| (1.0 - a) * c + a * s)
        .collect();
    Ok(StyleEmbedding(values))
}
