//! Two-view augmentation: crop, optional style transfer, flip, colour
//! jitter, grayscale, blur and solarize, in that order. Every transform reads
//! its own keyed substream, so enabling, disabling or reconfiguring one
//! transform never changes another's random draws.

mod policy;
pub mod transforms;

use numcore::Tensor;

pub use policy::{AugPolicy, PerView};
pub use transforms::CropRect;

use crate::error::{Error, Result};
use crate::nst::{StyleEmbedding, StyleRef, StyleSource, StyleTrace, StyleTransfer};
use crate::rng::{RngStream, SampleRng, View};
use crate::stylebank::{inbatch_pairing, noise_style_params, pick_style, StyleBank};

/// Pipeline stages in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Crop,
    Style,
    Flip,
    ColorJitter,
    Grayscale,
    Blur,
    Solarize,
}

pub const PIPELINE: [Stage; 7] = [
    Stage::Crop,
    Stage::Style,
    Stage::Flip,
    Stage::ColorJitter,
    Stage::Grayscale,
    Stage::Blur,
    Stage::Solarize,
];

/// What happened to one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewTrace {
    pub crop: Option<CropRect>,
    pub stylized: bool,
    pub flipped: bool,
    pub jittered: bool,
    pub grayscaled: bool,
    pub blurred: bool,
    pub solarized: bool,
}

/// Stylization engine plus the material needed to resolve style references.
#[derive(Clone, Debug)]
pub struct StyleContext<'a> {
    pub engine: &'a StyleTransfer,
    pub bank: Option<&'a StyleBank>,
    /// Circular shift `b0` of in-batch pairing.
    pub inbatch_offset: usize,
    noise: Option<(Vec<f32>, Vec<f32>)>,
}

impl<'a> StyleContext<'a> {
    pub fn new(engine: &'a StyleTransfer, bank: Option<&'a StyleBank>, inbatch_offset: usize) -> Result<Self> {
        if let Some(b) = bank {
            if b.dim() != engine.stylizer.embedding_dim() {
                return Err(Error::Config(format!(
                    "style bank holds length {} codes but the stylizer expects {}",
                    b.dim(),
                    engine.stylizer.embedding_dim()
                )));
            }
        }
        Ok(Self {
            engine,
            bank,
            inbatch_offset,
            noise: bank.map(noise_style_params),
        })
    }

    fn bank(&self, source: StyleSource) -> Result<&'a StyleBank> {
        self.bank
            .ok_or_else(|| Error::Config(format!("style source {source:?} requires a style bank")))
    }

    /// Style references for a batch whose content codes are `codes` (needed
    /// only for in-batch pairing).
    pub(crate) fn resolve(
        &self,
        source: StyleSource,
        rngs: &[SampleRng],
        codes: Option<&[StyleEmbedding]>,
    ) -> Result<Vec<StyleRef>> {
        Ok(match source {
            StyleSource::ExternalBank => {
                let bank = self.bank(source)?;
                rngs.iter().map(|r| StyleRef::Embedding(bank.embedding(pick_style(bank, r)))).collect()
            }
            StyleSource::GaussianNoise => {
                self.bank(source)?;
                let (mu, sigma) = self.noise.clone().expect("computed with the bank");
                vec![StyleRef::Noise { mu, sigma }; rngs.len()]
            }
            StyleSource::ContentSelf => vec![StyleRef::ContentSelf; rngs.len()],
            StyleSource::InBatch => {
                let codes = codes.expect("in-batch pairing needs content codes");
                inbatch_pairing(rngs.len(), self.inbatch_offset)
                    .into_iter()
                    .map(|j| StyleRef::Embedding(codes[j].clone()))
                    .collect()
            }
        })
    }
}

fn apply_post_style(
    stage: Stage,
    image: Tensor<f32>,
    policy: &AugPolicy,
    view: View,
    rng: &SampleRng,
    trace: &mut ViewTrace,
) -> Result<Tensor<f32>> {
    Ok(match stage {
        Stage::Flip => {
            let (out, hit) = transforms::hflip(&image, policy.hflip_p, rng);
            trace.flipped = hit;
            out
        }
        Stage::ColorJitter => {
            let (out, hit) = transforms::color_jitter(&image, policy, rng)?;
            trace.jittered = hit;
            out
        }
        Stage::Grayscale => {
            let (out, hit) = transforms::grayscale(&image, policy.grayscale_p, rng)?;
            trace.grayscaled = hit;
            out
        }
        Stage::Blur => {
            let (out, hit) = transforms::gaussian_blur(&image, policy, view, rng)?;
            trace.blurred = hit;
            out
        }
        Stage::Solarize => {
            let (out, hit) = transforms::solarize(&image, policy, view, rng);
            trace.solarized = hit;
            out
        }
        Stage::Crop | Stage::Style => unreachable!("handled by the caller"),
    })
}

fn finish(
    image: Tensor<f32>,
    policy: &AugPolicy,
    view: View,
    rng: &SampleRng,
    stages: usize,
    trace: &mut ViewTrace,
) -> Result<Tensor<f32>> {
    PIPELINE[2..stages.max(2)]
        .iter()
        .try_fold(image, |img, &stage| apply_post_style(stage, img, policy, view, rng, trace))
}

/// Runs the first `stages` stages of the pipeline on one image. `style`
/// supplies the engine and the resolved reference when the policy stylizes
/// this view; a single-image in-batch source pairs the image with itself.
pub fn augment_view_prefix(
    image: &Tensor<f32>,
    policy: &AugPolicy,
    view: View,
    rng: &SampleRng,
    style: Option<(&StyleTransfer, &StyleRef)>,
    stages: usize,
) -> Result<(Tensor<f32>, ViewTrace)> {
    let mut trace = ViewTrace::default();
    if stages == 0 {
        return Ok((image.clone(), trace));
    }
    let (mut img, rect) = transforms::random_resized_crop(image, policy, rng)?;
    trace.crop = Some(rect);
    if stages >= 2 {
        if let Some(params) = policy.sassl_for(view) {
            let (engine, style) = style.ok_or_else(|| {
                Error::Config("the policy stylizes this view but no style engine was supplied".into())
            })?;
            let t = engine.style_augment_traced(&img, style, params, rng)?;
            trace.stylized = t.draw.applied;
            img = t.output;
        }
    }
    let out = finish(img, policy, view, rng, stages.min(PIPELINE.len()), &mut trace)?;
    Ok((out, trace))
}

pub fn augment_view_traced(
    image: &Tensor<f32>,
    policy: &AugPolicy,
    view: View,
    rng: &SampleRng,
    style: Option<(&StyleTransfer, &StyleRef)>,
) -> Result<(Tensor<f32>, ViewTrace)> {
    augment_view_prefix(image, policy, view, rng, style, PIPELINE.len())
}

/// The full pipeline on one image.
pub fn augment_view(
    image: &Tensor<f32>,
    policy: &AugPolicy,
    view: View,
    rng: &SampleRng,
    style: Option<(&StyleTransfer, &StyleRef)>,
) -> Result<Tensor<f32>> {
    Ok(augment_view_traced(image, policy, view, rng, style)?.0)
}

/// Left views, right views and the per-sample traces.
pub type TracedViews = (Tensor<f32>, Tensor<f32>, Vec<[ViewTrace; 2]>);

/// Two augmented views of every image in `[B,C,H,W]`, sample `b` keyed by `(b, view)`.
pub fn make_views_traced(
    batch: &Tensor<f32>,
    policy: &AugPolicy,
    style: Option<&StyleContext>,
    stream: &RngStream,
) -> Result<TracedViews> {
    policy.validate()?;
    let b = match batch.shape() {
        [b, _, _, _] if *b > 0 => *b,
        s => return Err(Error::invalid(format!("expected a non-empty [B,C,H,W] batch, got {s:?}"))),
    };
    let images: Vec<Tensor<f32>> = (0..b).map(|i| batch.index_outer(i)).collect::<numcore::Result<_>>()?;
    let mut outputs: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(2);
    let mut traces: Vec<[ViewTrace; 2]> = vec![Default::default(); b];
    for (vi, view) in [View::Left, View::Right].into_iter().enumerate() {
        let rngs: Vec<SampleRng> = (0..b as u64).map(|i| stream.sample(i, Some(view))).collect();
        let mut crops = Vec::with_capacity(b);
        for (i, img) in images.iter().enumerate() {
            let (c, rect) = transforms::random_resized_crop(img, policy, &rngs[i])?;
            traces[i][vi].crop = Some(rect);
            crops.push(c);
        }
        if let Some(params) = policy.sassl_for(view) {
            let ctx = style.ok_or_else(|| {
                Error::Config("the policy stylizes a view but no style engine was supplied".into())
            })?;
            let stacked = Tensor::stack(&crops)?;
            let codes = match params.style_source {
                StyleSource::InBatch => Some(ctx.engine.extractor.extract_batch(&stacked)?),
                _ => None,
            };
            let refs = ctx.resolve(params.style_source, &rngs, codes.as_deref())?;
            let styled: Vec<StyleTrace> =
                ctx.engine
                    .style_augment_batch_traced(&stacked, &refs, params, &rngs, codes.as_deref())?;
            for (i, t) in styled.into_iter().enumerate() {
                traces[i][vi].stylized = t.draw.applied;
                crops[i] = t.output;
            }
        }
        let mut done = Vec::with_capacity(b);
        for (i, c) in crops.into_iter().enumerate() {
            done.push(finish(c, policy, view, &rngs[i], PIPELINE.len(), &mut traces[i][vi])?);
        }
        outputs.push(done);
    }
    let right = Tensor::stack(&outputs.pop().expect("two views"))?;
    let left = Tensor::stack(&outputs.pop().expect("two views"))?;
    Ok((left, right, traces))
}

pub fn make_views(
    batch: &Tensor<f32>,
    policy: &AugPolicy,
    style: Option<&StyleContext>,
    stream: &RngStream,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (l, r, _) = make_views_traced(batch, policy, style, stream)?;
    Ok((l, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nst::{SasslParams, StyleExtractor, Stylizer, StylizerConfig};

    fn image(k: usize) -> Tensor<f32> {
        Tensor::from_fn([3, 40, 36], |i| ((i * (k + 3) + 7 * k) % 97) as f32 / 96.0)
    }

    fn engine() -> StyleTransfer {
        StyleTransfer::new(
            StyleExtractor::with_defaults(1),
            Stylizer::new(&StylizerConfig::default(), 2).unwrap(),
        )
        .unwrap()
    }

    fn bank() -> StyleBank {
        StyleBank::new(100, (0..300).map(|i| (i as f32 * 0.37).sin()).collect(), "t").unwrap()
    }

    #[test]
    fn zero_probability_style_equals_no_style() {
        let e = engine();
        let policy = AugPolicy {
            sassl: Some(SasslParams {
                p: 0.0,
                ..Default::default()
            }),
            ..Default::default()
        };
        let plain = policy.without_sassl();
        let s = RngStream::new(5);
        let style = StyleRef::Embedding(bank().embedding(0));
        for i in 0..8 {
            let rng = s.sample(i, Some(View::Left));
            let a = augment_view(&image(i as usize), &policy, View::Left, &rng, Some((&e, &style))).unwrap();
            let b = augment_view(&image(i as usize), &plain, View::Left, &rng, None).unwrap();
            assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn right_view_never_stylized_by_default() {
        let e = engine();
        let bank = bank();
        let ctx = StyleContext::new(&e, Some(&bank), 1).unwrap();
        let batch = Tensor::stack(&(0..6).map(image).collect::<Vec<_>>()).unwrap();
        let policy = AugPolicy {
            sassl: Some(SasslParams {
                p: 1.0,
                ..Default::default()
            }),
            ..Default::default()
        };
        let (l, r, traces) = make_views_traced(&batch, &policy, Some(&ctx), &RngStream::new(1)).unwrap();
        assert_eq!(l.shape(), &[6, 3, 32, 32]);
        assert_eq!(r.shape(), &[6, 3, 32, 32]);
        assert!(traces.iter().all(|t| t[0].stylized && !t[1].stylized));
    }

    #[test]
    fn batch_views_match_single_views() {
        let e = engine();
        let bank = bank();
        let ctx = StyleContext::new(&e, Some(&bank), 1).unwrap();
        let policy = AugPolicy::default();
        let batch = Tensor::stack(&(0..4).map(image).collect::<Vec<_>>()).unwrap();
        let stream = RngStream::new(9);
        let (l, r) = make_views(&batch, &policy, Some(&ctx), &stream).unwrap();
        for i in 0..4u64 {
            let rng = stream.sample(i, Some(View::Left));
            let style = StyleRef::Embedding(bank.embedding(pick_style(&bank, &rng)));
            let single = augment_view(&image(i as usize), &policy, View::Left, &rng, Some((&e, &style))).unwrap();
            assert!(l.index_outer(i as usize).unwrap().bit_eq(&single));
            let rng = stream.sample(i, Some(View::Right));
            let single = augment_view(&image(i as usize), &policy, View::Right, &rng, None).unwrap();
            assert!(r.index_outer(i as usize).unwrap().bit_eq(&single));
        }
    }

    #[test]
    fn in_batch_and_noise_sources_run() {
        let e = engine();
        let bank = bank();
        let ctx = StyleContext::new(&e, Some(&bank), 1).unwrap();
        let batch = Tensor::stack(&(0..3).map(image).collect::<Vec<_>>()).unwrap();
        for source in [StyleSource::InBatch, StyleSource::GaussianNoise, StyleSource::ContentSelf] {
            let policy = AugPolicy {
                sassl: Some(SasslParams {
                    p: 1.0,
                    style_source: source,
                    ..Default::default()
                }),
                ..Default::default()
            };
            let (l, _) = make_views(&batch, &policy, Some(&ctx), &RngStream::new(2)).unwrap();
            assert!(l.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn missing_bank_is_a_config_error() {
        let e = engine();
        let ctx = StyleContext::new(&e, None, 1).unwrap();
        let batch = Tensor::stack(&[image(0)]).unwrap();
        let err = make_views(&batch, &AugPolicy::default(), Some(&ctx), &RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn degenerate_policy_gives_resized_input() {
        let policy = AugPolicy {
            crop_area_range: [1.0, 1.0],
            crop_aspect_range: [1.0, 1.0],
            hflip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: PerView { left: 0.0, right: 0.0 },
            solarize_p: PerView { left: 0.0, right: 0.0 },
            sassl: None,
            output_size: 16,
            ..Default::default()
        };
        let img = Tensor::from_fn([3, 24, 24], |i| (i % 13) as f32 / 13.0);
        let batch = Tensor::stack(std::slice::from_ref(&img)).unwrap();
        let (l, r) = make_views(&batch, &policy, None, &RngStream::new(4)).unwrap();
        let full = CropRect { top: 0, left: 0, height: 24, width: 24 };
        let expect = transforms::crop_resize(&img, full, 16).unwrap().unsqueeze0();
        assert!(l.bit_eq(&expect) && r.bit_eq(&expect));
    }
}
