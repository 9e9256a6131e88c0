use numcore::{kernels, Tensor};

use super::synth::LabeledDataset;
use crate::augpipe::StyleContext;
use crate::error::{Error, Result};
use crate::nst::{SasslParams, StyleSource};
use crate::rng::{RngStream, SampleRng};
use crate::ssltrain::{cosine_similarity, SslModel};

/// Anything that maps `[N,3,H,W]` images to `[N,R]` features.
pub trait Representation {
    fn represent(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Representation for SslModel {
    fn represent(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.encode(images)
    }
}

/// Bilinear resize of every image in `[N,C,H,W]` to `size×size`.
pub fn resize_batch(images: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = match *images.shape() {
        [n, c, h, w] => [n, c, h, w],
        ref s => return Err(Error::invalid(format!("expected [N,C,H,W], got {s:?}"))),
    };
    if (h, w) == (size, size) {
        return Ok(images.clone());
    }
    let out = kernels::resize_bilinear(images.data(), n * c, h, w, size, size);
    Ok(Tensor::new([n, c, size, size], out)?)
}

/// Encoder features of every dataset image after a deterministic resize.
pub fn encode_dataset(model: &impl Representation, dataset: &LabeledDataset, size: usize) -> Result<Tensor<f32>> {
    model.represent(&resize_batch(&dataset.images, size)?)
}

/// Mean cosine similarity between the features of the first `n` images and
/// of their stylized versions. Pass `p = 1` to stylize every image.
pub fn texture_invariance_score(
    model: &impl Representation,
    images: &Tensor<f32>,
    ctx: &StyleContext,
    params: &SasslParams,
    n: usize,
    stream: &RngStream,
) -> Result<f64> {
    let total = images.shape().first().copied().unwrap_or(0);
    if images.ndim() != 4 || n == 0 || n > total {
        return Err(Error::invalid(format!("cannot score {n} of {total} images")));
    }
    let originals: Vec<Tensor<f32>> = (0..n).map(|i| images.index_outer(i)).collect::<numcore::Result<_>>()?;
    let rngs: Vec<SampleRng> = (0..n as u64).map(|i| stream.sample(i, None)).collect();
    let batch = Tensor::stack(&originals)?;
    let codes = match params.style_source {
        StyleSource::InBatch => Some(ctx.engine.extractor.extract_batch(&batch)?),
        _ => None,
    };
    let refs = ctx.resolve(params.style_source, &rngs, codes.as_deref())?;
    let styled = ctx.engine.style_augment_batch(&batch, &refs, params, &rngs)?;
    let a = model.represent(&batch)?;
    let b = model.represent(&styled)?;
    let r = a.shape()[1];
    let mut total_sim = 0.0;
    for i in 0..n {
        let u: Vec<f64> = a.data()[i * r..(i + 1) * r].iter().map(|&v| v as f64).collect();
        let v: Vec<f64> = b.data()[i * r..(i + 1) * r].iter().map(|&v| v as f64).collect();
        total_sim += cosine_similarity(&u, &v)?;
    }
    Ok(total_sim / n as f64)
}
