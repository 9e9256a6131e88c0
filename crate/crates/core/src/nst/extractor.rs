use numcore::{Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::embedding::{StyleEmbedding, DEFAULT_EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::nets::{ConvEncoder, Linear};

/// Stride-2 conv+relu stages, global average pooling, then a linear map to `D`.
#[derive(Clone, Debug)]
pub struct StyleExtractor<T: Real = f32> {
    encoder: ConvEncoder,
    head: Linear,
    params: ParamStore<T>,
}

impl<T: Real> StyleExtractor<T> {
    /// Smallest accepted spatial extent.
    pub const MIN_SIZE: usize = 16;
    pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];

    pub fn new(widths: &[usize], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = ConvEncoder::new(&mut params, "extractor", 3, widths, &mut rng);
        let last = *widths.last().expect("at least one stage");
        let head = Linear::new(
            &mut params,
            "extractor.head",
            last,
            dim,
            (1.0 / last as f64).sqrt(),
            &mut rng,
        );
        Self { encoder, head, params }
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(&Self::DEFAULT_WIDTHS, DEFAULT_EMBEDDING_DIM, seed)
    }

    /// Rebuilds the network from parameters named `extractor.*`.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let encoder = ConvEncoder::attach(&params, "extractor")?;
        let head = Linear::attach(&params, "extractor.head")?;
        if head.dims(&params).0 != encoder.out_width(&params) {
            return Err(Error::invalid("extractor head does not match the last stage width"));
        }
        Ok(Self { encoder, head, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.head.dims(&self.params).1
    }

    pub fn cast<U: Real>(&self) -> StyleExtractor<U> {
        StyleExtractor {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid(format!("style extractor expects [N,3,H,W], got {shape:?}")));
        }
        if shape[2] < Self::MIN_SIZE || shape[3] < Self::MIN_SIZE {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the extractor minimum {}",
                shape[2],
                shape[3],
                Self::MIN_SIZE
            )));
        }
        Ok(())
    }

    /// `[N,3,H,W] → [N,D]` on a graph where this extractor's parameters are bound as `p`.
    pub fn forward(&self, g: &mut Graph<T>, p: &numcore::Bound, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let h = self.encoder.forward(g, p, x)?;
        self.head.forward(g, p, h)
    }

    /// Embeddings for every image of a `[N,3,H,W]` batch.
    pub fn extract_batch(&self, images: &Tensor<T>) -> Result<Vec<StyleEmbedding>> {
        self.check_input(images.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let z = self.forward(&mut g, &p, x)?;
        g.value(z)
            .data()
            .chunks(self.dim())
            .map(|row| StyleEmbedding::new(row.iter().map(|v| v.as_f64() as f32).collect()))
            .collect()
    }

    /// Embedding of one `[3,H,W]` image.
    pub fn extract(&self, image: &Tensor<T>) -> Result<StyleEmbedding> {
        if image.ndim() != 3 {
            return Err(Error::invalid(format!("expected a [3,H,W] image, got {:?}", image.shape())));
        }
        Ok(self.extract_batch(&image.unsqueeze0())?.remove(0))
    }
}
