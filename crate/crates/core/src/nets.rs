//! Layer building blocks shared by the stylizer, the style extractor and the
//! contrastive model. Layers only hold [`ParamId`]s; values live in a
//! [`ParamStore`] so one architecture can be evaluated in either precision.

use numcore::{Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub(crate) fn normal_tensor<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

fn shape_of<T: Real>(store: &ParamStore<T>, id: ParamId) -> Vec<usize> {
    store.get(id).value.shape().to_vec()
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain * (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[cout, cin, kernel, kernel], std),
            false,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), true);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn attach<T: Real>(store: &ParamStore<T>, name: &str, stride: usize) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let bias = lookup(store, &format!("{name}.bias"))?;
        let ws = shape_of(store, weight);
        if ws.len() != 4 || shape_of(store, bias) != [ws[0]] {
            return Err(Error::invalid(format!("{name}: malformed convolution parameters")));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            pad: ws[2] / 2,
        })
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).value.shape()[0]
    }

    pub fn in_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).value.shape()[1]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)?)
    }
}

/// Affine map `x·W + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], std), false);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), true);
        Self { weight, bias }
    }

    pub fn attach<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let bias = lookup(store, &format!("{name}.bias"))?;
        let ws = shape_of(store, weight);
        if ws.len() != 2 || shape_of(store, bias) != [ws[1]] {
            return Err(Error::invalid(format!("{name}: malformed linear parameters")));
        }
        Ok(Self { weight, bias })
    }

    pub fn dims<T: Real>(&self, store: &ParamStore<T>) -> (usize, usize) {
        let s = store.get(self.weight).value.shape();
        (s[0], s[1])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        Ok(g.add(y, p[self.bias])?)
    }
}

/// Two-layer perceptron with a relu in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let h = Linear::new(store, &format!("{name}.fc0"), fan_in, hidden, (2.0 / fan_in as f64).sqrt(), rng);
        let o = Linear::new(store, &format!("{name}.fc1"), hidden, fan_out, (1.0 / hidden as f64).sqrt(), rng);
        Self { hidden: h, out: o }
    }

    pub fn attach<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            hidden: Linear::attach(store, &format!("{name}.fc0"))?,
            out: Linear::attach(store, &format!("{name}.fc1"))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }
}

/// Stride-2 conv+relu stages followed by global average pooling.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub stages: Vec<Conv>,
}

impl ConvEncoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(store, &format!("{name}.conv{i}"), cin, w, 3, 2, 1.0, rng);
                cin = w;
                c
            })
            .collect();
        Self { stages }
    }

    /// Rebuilds the encoder from every `{name}.conv{i}` present in `store`.
    pub fn attach<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let mut stages = Vec::new();
        while store.find(&format!("{name}.conv{}.weight", stages.len())).is_some() {
            stages.push(Conv::attach(store, &format!("{name}.conv{}", stages.len()), 2)?);
        }
        if stages.is_empty() {
            return Err(Error::invalid(format!("no {name} stages found")));
        }
        Ok(Self { stages })
    }

    pub fn widths<T: Real>(&self, store: &ParamStore<T>) -> Vec<usize> {
        self.stages.iter().map(|c| c.out_channels(store)).collect()
    }

    pub fn out_width<T: Real>(&self, store: &ParamStore<T>) -> usize {
        self.stages.last().map_or(0, |c| c.out_channels(store))
    }

    /// `[N,C,H,W] → [N, width]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        Ok(g.global_avg_pool(h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_output_width_and_reattach() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = ConvEncoder::new(&mut store, "enc", 3, &[4, 8], &mut rng);
        let again = ConvEncoder::attach(&store, "enc").unwrap();
        assert_eq!(again.widths(&store), vec![4, 8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::full([2, 3, 9, 9], 0.5));
        let y = enc.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8]);
    }

    #[test]
    fn biases_are_exempt_weights_are_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut store, "fc", 3, 2, 0.1, &mut rng);
        assert!(store.get(l.bias).exempt);
        assert!(!store.get(l.weight).exempt);
    }
}
