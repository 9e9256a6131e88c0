use numcore::{Bound, Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::embedding::{blend_embeddings, StyleEmbedding};
use super::extractor::StyleExtractor;
use super::stylizer::Stylizer;
use crate::error::{Error, Result};
use crate::rng::SampleRng;

/// Where style codes come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    /// Rows sampled from a precomputed bank.
    #[default]
    ExternalBank,
    /// Another sample of the same minibatch, by circular shift.
    InBatch,
    /// The content's own code: the stylizer acts as an autoencoder.
    ContentSelf,
    /// A Gaussian draw with moments estimated from a bank.
    GaussianNoise,
}

/// Probability and ranges of the style augmentation block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SasslParams {
    pub p: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub style_source: StyleSource,
}

impl Default for SasslParams {
    fn default() -> Self {
        Self {
            p: 0.8,
            alpha_min: 0.1,
            alpha_max: 0.3,
            beta_min: 0.1,
            beta_max: 0.3,
            style_source: StyleSource::ExternalBank,
        }
    }
}

impl SasslParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("sassl p = {} is outside [0, 1]", self.p)));
        }
        for (name, lo, hi) in [
            ("alpha", self.alpha_min, self.alpha_max),
            ("beta", self.beta_min, self.beta_max),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "sassl {name} range [{lo}, {hi}] must satisfy 0 <= min <= max <= 1"
                )));
            }
        }
        Ok(())
    }
}

/// A resolved style reference for one sample.
#[derive(Clone, Debug)]
pub enum StyleRef {
    Embedding(StyleEmbedding),
    /// A style image; its code is extracted first.
    Image(Tensor<f32>),
    /// `ẑ = z_c`.
    ContentSelf,
    /// `ẑ ~ N(μ, diag σ²)`, replacing the blend entirely.
    Noise { mu: Vec<f32>, sigma: Vec<f32> },
}

/// Realized random decisions of one application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleDraw {
    pub applied: bool,
    pub alpha: f64,
    pub beta: f64,
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Apply decision from `style.apply`; `α` and `β` are drawn from their own
/// substreams only when the block is applied.
pub fn draw_style_params(params: &SasslParams, rng: &SampleRng) -> StyleDraw {
    let applied = rng.sub("style.apply").random::<f64>() < params.p;
    if !applied {
        return StyleDraw {
            applied,
            alpha: 0.0,
            beta: 0.0,
        };
    }
    StyleDraw {
        applied,
        alpha: uniform(&mut rng.sub("style.alpha"), params.alpha_min, params.alpha_max),
        beta: uniform(&mut rng.sub("style.beta"), params.beta_min, params.beta_max),
    }
}

/// One draw of `N(μ, diag σ²)`.
pub fn draw_noise_style<R: Rng>(mu: &[f32], sigma: &[f32], rng: &mut R) -> Result<StyleEmbedding> {
    if mu.len() != sigma.len() {
        return Err(Error::invalid("noise mean and deviation lengths differ"));
    }
    let values = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let n = Normal::new(m as f64, s as f64).map_err(|e| Error::invalid(e.to_string()))?;
            Ok(n.sample(rng) as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    StyleEmbedding::new(values)
}

/// `(1 − β)·content + β·stylized`, kept inside the per-pixel hull of its endpoints.
pub fn interpolate_pixels<T: Real>(content: &Tensor<T>, stylized: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("interpolation factor {beta} outside [0, 1]")));
    }
    if content.shape() != stylized.shape() {
        return Err(Error::invalid(format!(
            "cannot interpolate images shaped {:?} and {:?}",
            content.shape(),
            stylized.shape()
        )));
    }
    if beta == 0.0 {
        return Ok(content.clone());
    }
    if beta == 1.0 {
        return Ok(stylized.clone());
    }
    let b = T::lit(beta);
    Ok(content.zip_map(stylized, "interpolate_pixels", |c, s| {
        let v = c + b * (s - c);
        v.max(c.min(s)).min(c.max(s))
    })?)
}

/// Intermediate values of one application, for inspection.
#[derive(Clone, Debug)]
pub struct StyleTrace<T: Real = f32> {
    pub draw: StyleDraw,
    pub blended: Option<StyleEmbedding>,
    pub stylized: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Style extractor and stylizer bundled as the augmentation block.
#[derive(Clone, Debug)]
pub struct StyleTransfer<T: Real = f32> {
    pub extractor: StyleExtractor<T>,
    pub stylizer: Stylizer<T>,
}

impl<T: Real> StyleTransfer<T> {
    pub fn new(extractor: StyleExtractor<T>, stylizer: Stylizer<T>) -> Result<Self> {
        if extractor.dim() != stylizer.embedding_dim() {
            return Err(Error::invalid(format!(
                "extractor produces length {} codes but the stylizer expects {}",
                extractor.dim(),
                stylizer.embedding_dim()
            )));
        }
        Ok(Self { extractor, stylizer })
    }

    pub fn cast<U: Real>(&self) -> StyleTransfer<U> {
        StyleTransfer {
            extractor: self.extractor.cast(),
            stylizer: self.stylizer.cast(),
        }
    }

    pub fn extract_style(&self, image: &Tensor<T>) -> Result<StyleEmbedding> {
        self.extractor.extract(image)
    }

    fn blended_code(
        &self,
        z_c: &StyleEmbedding,
        style: &StyleRef,
        alpha: f64,
        rng: &SampleRng,
    ) -> Result<StyleEmbedding> {
        match style {
            StyleRef::ContentSelf => Ok(z_c.clone()),
            StyleRef::Noise { mu, sigma } => draw_noise_style(mu, sigma, &mut rng.sub("style.noise")),
            StyleRef::Embedding(z_s) => blend_embeddings(z_c, z_s, alpha),
            StyleRef::Image(img) => {
                let z_s = self.extractor.extract(&img.cast())?;
                blend_embeddings(z_c, &z_s, alpha)
            }
        }
    }

    /// Style augmentation of a `[B,3,H,W]` batch, one keyed substream per
    /// sample. `content_codes`, when given, must be the extractor codes of the
    /// batch images and spares recomputing them.
    pub fn style_augment_batch_traced(
        &self,
        batch: &Tensor<T>,
        styles: &[StyleRef],
        params: &SasslParams,
        rngs: &[SampleRng],
        content_codes: Option<&[StyleEmbedding]>,
    ) -> Result<Vec<StyleTrace<T>>> {
        params.validate()?;
        let b = batch.shape().first().copied().unwrap_or(0);
        if batch.ndim() != 4 || b == 0 || styles.len() != b || rngs.len() != b {
            return Err(Error::invalid(format!(
                "batch {:?} with {} styles and {} substreams",
                batch.shape(),
                styles.len(),
                rngs.len()
            )));
        }
        if content_codes.is_some_and(|c| c.len() != b) {
            return Err(Error::invalid("content code count does not match the batch"));
        }
        let images: Vec<Tensor<T>> = (0..b).map(|i| batch.index_outer(i)).collect::<numcore::Result<_>>()?;
        let draws: Vec<StyleDraw> = rngs.iter().map(|r| draw_style_params(params, r)).collect();
        let applied: Vec<usize> = (0..b).filter(|&i| draws[i].applied).collect();

        let mut blended = vec![None; b];
        let mut stylized = vec![None; b];
        if !applied.is_empty() {
            let subset = Tensor::stack(&applied.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
            let codes = match content_codes {
                Some(c) => applied.iter().map(|&i| c[i].clone()).collect(),
                None => self.extractor.extract_batch(&subset)?,
            };
            for (k, &i) in applied.iter().enumerate() {
                blended[i] = Some(self.blended_code(&codes[k], &styles[i], draws[i].alpha, &rngs[i])?);
            }
            let refs: Vec<&StyleEmbedding> = applied.iter().map(|&i| blended[i].as_ref().expect("set")).collect();
            let out = self.stylizer.run_batch(&subset, &refs)?;
            for (k, &i) in applied.iter().enumerate() {
                stylized[i] = Some(out.index_outer(k)?);
            }
        }

        images
            .into_iter()
            .zip(draws)
            .zip(blended.into_iter().zip(stylized))
            .map(|((content, draw), (blended, stylized))| {
                let output = match &stylized {
                    Some(s) => interpolate_pixels(&content, s, draw.beta)?,
                    None => content,
                };
                Ok(StyleTrace {
                    draw,
                    blended,
                    stylized,
                    output,
                })
            })
            .collect()
    }

    pub fn style_augment_batch(
        &self,
        batch: &Tensor<T>,
        styles: &[StyleRef],
        params: &SasslParams,
        rngs: &[SampleRng],
    ) -> Result<Tensor<T>> {
        let traces = self.style_augment_batch_traced(batch, styles, params, rngs, None)?;
        let outs: Vec<Tensor<T>> = traces.into_iter().map(|t| t.output).collect();
        Ok(Tensor::stack(&outs)?)
    }

    pub fn style_augment_traced(
        &self,
        content: &Tensor<T>,
        style: &StyleRef,
        params: &SasslParams,
        rng: &SampleRng,
    ) -> Result<StyleTrace<T>> {
        if content.ndim() != 3 {
            return Err(Error::invalid(format!("expected a [3,H,W] image, got {:?}", content.shape())));
        }
        let mut traces = self.style_augment_batch_traced(
            &content.unsqueeze0(),
            std::slice::from_ref(style),
            params,
            std::slice::from_ref(rng),
            None,
        )?;
        let mut t = traces.remove(0);
        t.output = t.output.reshape(content.shape().to_vec())?;
        Ok(t)
    }

    /// The augmentation block on one `[3,H,W]` image.
    pub fn style_augment(
        &self,
        content: &Tensor<T>,
        style: &StyleRef,
        params: &SasslParams,
        rng: &SampleRng,
    ) -> Result<Tensor<T>> {
        Ok(self.style_augment_traced(content, style, params, rng)?.output)
    }

    /// Differentiable block with fixed `α`, `β`: `x` is `[N,3,H,W]`, `z_s` is `[N,D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_fixed(
        &self,
        g: &mut Graph<T>,
        extractor_params: &Bound,
        stylizer_params: &Bound,
        x: Var,
        z_s: Var,
        alpha: f64,
        beta: f64,
    ) -> Result<Var> {
        let z_c = self.extractor.forward(g, extractor_params, x)?;
        let zc = g.scale(z_c, 1.0 - alpha)?;
        let zs = g.scale(z_s, alpha)?;
        let z_hat = g.add(zc, zs)?;
        let stylized = self.stylizer.forward(g, stylizer_params, x, z_hat)?;
        let keep = g.scale(x, 1.0 - beta)?;
        let mixed = g.scale(stylized, beta)?;
        Ok(g.add(keep, mixed)?)
    }
}
