use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use numcore::{Bound, Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::StyleEmbedding;
use crate::error::{Error, Result};
use crate::nets::{normal_tensor, Conv, Linear};

/// Guard added to the standard deviation in normalization denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Total number of layers: 2 downsampling, 10 residual, 3 upsampling, 1 output.
pub const LAYER_COUNT: usize = 16;
const RESIDUAL_BLOCKS: usize = 5;
const FIRST_RESIDUAL: usize = 3;
const FIRST_UPSAMPLE: usize = 13;
const OUTPUT_LAYER: usize = 16;

/// Which layers receive conditional instance normalization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyledLayers {
    /// All residual and upsampling layers (13).
    #[default]
    All,
    First4,
    First8,
    First10,
    None,
    Custom(Vec<usize>),
}

impl StyledLayers {
    /// Sorted layer ids, 1-based.
    pub fn ids(&self) -> Result<Vec<usize>> {
        let first = |n: usize| (FIRST_RESIDUAL..FIRST_RESIDUAL + n).collect::<Vec<_>>();
        let ids = match self {
            StyledLayers::All => first(13),
            StyledLayers::First4 => first(4),
            StyledLayers::First8 => first(8),
            StyledLayers::First10 => first(10),
            StyledLayers::None => Vec::new(),
            StyledLayers::Custom(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                if let Some(&bad) = v.iter().find(|&&l| l == 0 || l >= OUTPUT_LAYER) {
                    return Err(Error::invalid(format!(
                        "layer {bad} cannot be styled (valid ids are 1..={})",
                        OUTPUT_LAYER - 1
                    )));
                }
                v
            }
        };
        Ok(ids)
    }
}

/// Shape of a stylization network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizerConfig {
    pub width: usize,
    pub embedding_dim: usize,
    pub styled_layers: StyledLayers,
}

impl Default for StylizerConfig {
    fn default() -> Self {
        Self {
            width: 16,
            embedding_dim: super::DEFAULT_EMBEDDING_DIM,
            styled_layers: StyledLayers::All,
        }
    }
}

/// Per-layer predictors of the CIN scale and offset.
#[derive(Clone, Debug)]
struct CinPredictor {
    gamma: Linear,
    lambda: Linear,
}

impl CinPredictor {
    /// `γ = softplus(zW+b) + 0.01`, `λ = zW+b`, both `[N,C]`.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let gamma = self.gamma.forward(g, p, z)?;
        let gamma = g.softplus(gamma)?;
        let gamma = g.affine(gamma, 1.0, 0.01)?;
        let lambda = self.lambda.forward(g, p, z)?;
        Ok((gamma, lambda))
    }
}

/// `γ·(x − mean)/(std + eps) + λ` per channel of `[N,C,H,W]`, with `γ`, `λ` shaped `[N,C]`.
pub fn cin_graph<T: Real>(g: &mut Graph<T>, x: Var, gamma: Var, lambda: Var, eps: f64) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || g.shape(gamma) != [s[0], s[1]] || g.shape(lambda) != [s[0], s[1]] {
        return Err(Error::invalid(format!(
            "conditional normalization width mismatch: input {:?}, scale {:?}, offset {:?}",
            s,
            g.shape(gamma),
            g.shape(lambda)
        )));
    }
    let col = [s[0], s[1], 1, 1];
    let (mean, std) = g.instance_stats(x)?;
    let mean = g.reshape(mean, &col)?;
    let std = g.affine(std, 1.0, eps)?;
    let std = g.reshape(std, &col)?;
    let centered = g.sub(x, mean)?;
    let normed = g.div(centered, std)?;
    let gamma = g.reshape(gamma, &col)?;
    let lambda = g.reshape(lambda, &col)?;
    let scaled = g.mul(normed, gamma)?;
    Ok(g.add(scaled, lambda)?)
}

/// Conditional instance normalization of one `[C,H,W]` tensor with explicit per-channel scale and offset.
pub fn cin_affine<T: Real>(x: &Tensor<T>, gamma: &[f64], lambda: &[f64], eps: f64) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(Error::invalid(format!("expected [C,H,W], got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    if gamma.len() != c || lambda.len() != c {
        return Err(Error::invalid(format!(
            "predictor width {}/{} does not match {c} channels",
            gamma.len(),
            lambda.len()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.unsqueeze0());
    let gv = g.constant(Tensor::from_f64([1, c], gamma)?);
    let lv = g.constant(Tensor::from_f64([1, c], lambda)?);
    let y = cin_graph(&mut g, xv, gv, lv, eps)?;
    Ok(g.value(y).clone().reshape(x.shape().to_vec())?)
}

/// Image-to-image network with conditional instance normalization on a chosen layer subset.
#[derive(Debug)]
pub struct Stylizer<T: Real = f32> {
    layers: Vec<Conv>,
    cin: BTreeMap<usize, CinPredictor>,
    embedding_dim: usize,
    params: ParamStore<T>,
    invocations: AtomicU64,
}

impl<T: Real> Clone for Stylizer<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            cin: self.cin.clone(),
            embedding_dim: self.embedding_dim,
            params: self.params.clone(),
            invocations: AtomicU64::new(self.invocations()),
        }
    }
}

fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// `(in, out, stride)` of every layer for base width `w`.
fn layer_plan(w: usize) -> Vec<(usize, usize, usize)> {
    let mut plan = vec![(3, w, 2), (w, 2 * w, 2)];
    plan.extend(std::iter::repeat_n((2 * w, 2 * w, 1), 2 * RESIDUAL_BLOCKS));
    plan.extend([(2 * w, w, 1), (w, w, 1), (w, w, 1), (w, 3, 1)]);
    plan
}

impl<T: Real> Stylizer<T> {
    pub fn new(config: &StylizerConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.embedding_dim == 0 {
            return Err(Error::invalid("stylizer width and embedding length must be positive"));
        }
        let styled = config.styled_layers.ids()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(LAYER_COUNT);
        for (i, (cin, cout, stride)) in layer_plan(config.width).into_iter().enumerate() {
            let l = i + 1;
            let second_in_block = (FIRST_RESIDUAL..FIRST_UPSAMPLE).contains(&l) && (l - FIRST_RESIDUAL) % 2 == 1;
            let gain = if l == OUTPUT_LAYER || second_in_block { 0.5 } else { 1.0 };
            layers.push(Conv::new(&mut params, &format!("stylizer.layer{l}"), cin, cout, 3, stride, gain, &mut rng));
        }
        let out_bias = layers[OUTPUT_LAYER - 1].bias;
        params.get_mut(out_bias).value = Tensor::full([3], T::lit(0.5));

        let d = config.embedding_dim;
        let std = 0.5 / (d as f64).sqrt();
        let mut cin = BTreeMap::new();
        for l in styled {
            let c = layers[l - 1].out_channels(&params);
            let gamma = Linear::new(&mut params, &format!("stylizer.cin{l}.gamma"), d, c, std, &mut rng);
            params.get_mut(gamma.bias).value = Tensor::full([c], T::lit(softplus_inverse(0.99)));
            let lambda = Linear::new(&mut params, &format!("stylizer.cin{l}.lambda"), d, c, std, &mut rng);
            cin.insert(l, CinPredictor { gamma, lambda });
        }
        Ok(Self {
            layers,
            cin,
            embedding_dim: d,
            params,
            invocations: AtomicU64::new(0),
        })
    }

    /// Rebuilds the network from parameters named `stylizer.*`; styled layers
    /// are those with predictor parameters present.
    pub fn from_params(params: ParamStore<T>, embedding_dim: usize) -> Result<Self> {
        let width = params
            .find("stylizer.layer1.weight")
            .map(|id| params.get(id).value.shape()[0])
            .ok_or_else(|| Error::invalid("missing parameter stylizer.layer1.weight"))?;
        let plan = layer_plan(width);
        let mut layers = Vec::with_capacity(LAYER_COUNT);
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let conv = Conv::attach(&params, &format!("stylizer.layer{}", i + 1), stride)?;
            if conv.in_channels(&params) != cin || conv.out_channels(&params) != cout {
                return Err(Error::invalid(format!("stylizer.layer{} has unexpected channel counts", i + 1)));
            }
            layers.push(conv);
        }
        let mut cin = BTreeMap::new();
        for l in 1..OUTPUT_LAYER {
            if params.find(&format!("stylizer.cin{l}.gamma.weight")).is_none() {
                continue;
            }
            let gamma = Linear::attach(&params, &format!("stylizer.cin{l}.gamma"))?;
            let lambda = Linear::attach(&params, &format!("stylizer.cin{l}.lambda"))?;
            let c = layers[l - 1].out_channels(&params);
            if gamma.dims(&params) != (embedding_dim, c) || lambda.dims(&params) != (embedding_dim, c) {
                return Err(Error::invalid(format!("stylizer.cin{l} predictor width mismatch")));
            }
            cin.insert(l, CinPredictor { gamma, lambda });
        }
        Ok(Self {
            layers,
            cin,
            embedding_dim,
            params,
            invocations: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn styled_layers(&self) -> Vec<usize> {
        self.cin.keys().copied().collect()
    }

    pub fn layer_channels(&self, layer: usize) -> Option<usize> {
        self.layers.get(layer.wrapping_sub(1)).map(|c| c.out_channels(&self.params))
    }

    /// Number of images passed through the network so far.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn cast<U: Real>(&self) -> Stylizer<U> {
        Stylizer {
            layers: self.layers.clone(),
            cin: self.cin.clone(),
            embedding_dim: self.embedding_dim,
            params: self.params.cast(),
            invocations: AtomicU64::new(0),
        }
    }

    fn layer(&self, g: &mut Graph<T>, p: &Bound, l: usize, x: Var, z: Var) -> Result<Var> {
        let h = self.layers[l - 1].forward(g, p, x)?;
        match self.cin.get(&l) {
            Some(pred) => {
                let (gamma, lambda) = pred.forward(g, p, z)?;
                cin_graph(g, h, gamma, lambda, NORM_EPS)
            }
            None => Ok(h),
        }
    }

    /// `[N,3,H,W]` images and `[N,D]` codes to `[N,3,H,W]` stylized images in `[0,1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, z: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(Error::invalid(format!("stylizer expects [N,3,H,W], got {xs:?}")));
        }
        if g.shape(z) != [xs[0], self.embedding_dim] {
            return Err(Error::invalid(format!(
                "style code shape {:?} does not match [{}, {}]",
                g.shape(z),
                xs[0],
                self.embedding_dim
            )));
        }
        let (h, w) = (xs[2], xs[3]);
        let mut a = self.layer(g, p, 1, x, z)?;
        a = g.relu(a)?;
        let (h1, w1) = (g.shape(a)[2], g.shape(a)[3]);
        a = self.layer(g, p, 2, a, z)?;
        a = g.relu(a)?;
        for b in 0..RESIDUAL_BLOCKS {
            let l = FIRST_RESIDUAL + 2 * b;
            let r = self.layer(g, p, l, a, z)?;
            let r = g.relu(r)?;
            let r = self.layer(g, p, l + 1, r, z)?;
            a = g.add(a, r)?;
        }
        for (i, (th, tw)) in [(h1, w1), (h, w), (h, w)].into_iter().enumerate() {
            if g.shape(a)[2..] != [th, tw] {
                a = g.resize_bilinear(a, th, tw)?;
            }
            a = self.layer(g, p, FIRST_UPSAMPLE + i, a, z)?;
            a = g.relu(a)?;
        }
        let y = self.layers[OUTPUT_LAYER - 1].forward(g, p, a)?;
        Ok(g.clamp(y, 0.0, 1.0)?)
    }

    fn code_tensor(&self, zs: &[&StyleEmbedding]) -> Result<Tensor<T>> {
        let d = self.embedding_dim;
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::invalid(format!("style code has length {}, expected {d}", z.len())));
        }
        let values: Vec<T> = zs.iter().flat_map(|z| z.as_slice().iter().map(|&v| T::lit(v as f64))).collect();
        Ok(Tensor::new([zs.len(), d], values)?)
    }

    /// Stylizes every image of a `[N,3,H,W]` batch with its own code.
    pub fn run_batch(&self, images: &Tensor<T>, codes: &[&StyleEmbedding]) -> Result<Tensor<T>> {
        if images.ndim() != 4 || images.shape()[0] != codes.len() {
            return Err(Error::invalid(format!(
                "{} style codes for a batch shaped {:?}",
                codes.len(),
                images.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let z = g.constant(self.code_tensor(codes)?);
        let y = self.forward(&mut g, &p, x, z)?;
        self.invocations.fetch_add(codes.len() as u64, Ordering::Relaxed);
        Ok(g.value(y).clone())
    }

    /// Stylizes one `[3,H,W]` image.
    pub fn run(&self, image: &Tensor<T>, z: &StyleEmbedding) -> Result<Tensor<T>> {
        if image.ndim() != 3 {
            return Err(Error::invalid(format!("expected a [3,H,W] image, got {:?}", image.shape())));
        }
        let y = self.run_batch(&image.unsqueeze0(), &[z])?;
        Ok(y.reshape(image.shape().to_vec())?)
    }

    /// Scale and offset predicted for `layer` from `z`.
    pub fn predict_affine(&self, z: &StyleEmbedding, layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let pred = self
            .cin
            .get(&layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} is not styled")))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(self.code_tensor(&[z])?);
        let (gamma, lambda) = pred.forward(&mut g, &p, zv)?;
        let f = |v: Var| g.value(v).data().iter().map(|e| e.as_f64()).collect::<Vec<_>>();
        Ok((f(gamma), f(lambda)))
    }

    /// Conditional instance normalization of a `[C,H,W]` activation at styled layer `layer`.
    pub fn cin(&self, x: &Tensor<T>, z: &StyleEmbedding, layer: usize) -> Result<Tensor<T>> {
        let (gamma, lambda) = self.predict_affine(z, layer)?;
        cin_affine(x, &gamma, &lambda, NORM_EPS)
    }
}

/// Draws a fresh random tensor, used by tests and benchmarks for synthetic codes.
pub fn random_code<R: rand::Rng>(rng: &mut R, dim: usize, std: f64) -> StyleEmbedding {
    StyleEmbedding::new(normal_tensor::<f32, R>(rng, &[dim], std).into_data()).expect("finite draw")
}
