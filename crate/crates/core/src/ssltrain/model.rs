use numcore::{Bound, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nets::{ConvEncoder, Mlp};
use crate::rng::RngStream;

/// Architecture of the contrastive model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub projector_hidden: usize,
    pub projector_out: usize,
    /// Momentum target tower with a predictor on the online side; when off
    /// the loss is the symmetric two-view NT-Xent.
    pub momentum_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![32, 64, 128, 128],
            projector_hidden: 256,
            projector_out: 64,
            momentum_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder_widths must be non-empty and positive".into()));
        }
        if self.projector_hidden == 0 || self.projector_out == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder `h`, projector `g`, optional predictor `q`, and the momentum copy
/// of `h` and `g`. Online parameters are ordered encoder, projector,
/// predictor, so the target is a prefix of the online table.
#[derive(Clone, Debug)]
pub struct SslModel {
    encoder: ConvEncoder,
    projector: Mlp,
    predictor: Option<Mlp>,
    pub online: ParamStore<f32>,
    pub target: Option<ParamStore<f32>>,
}

impl SslModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed).substream(0, None, "model.init");
        let mut online = ParamStore::new();
        let encoder = ConvEncoder::new(&mut online, "encoder", 3, &config.encoder_widths, &mut rng);
        let r = *config.encoder_widths.last().expect("validated");
        let projector = Mlp::new(
            &mut online,
            "projector",
            r,
            config.projector_hidden,
            config.projector_out,
            &mut rng,
        );
        let shared = online.len();
        let predictor = config.momentum_encoder.then(|| {
            Mlp::new(
                &mut online,
                "predictor",
                config.projector_out,
                config.projector_hidden,
                config.projector_out,
                &mut rng,
            )
        });
        let target = config.momentum_encoder.then(|| online.truncated(shared));
        Ok(Self {
            encoder,
            projector,
            predictor,
            online,
            target,
        })
    }

    fn attach(online: ParamStore<f32>, target: Option<ParamStore<f32>>) -> Result<Self> {
        let encoder = ConvEncoder::attach(&online, "encoder")?;
        let projector = Mlp::attach(&online, "projector")?;
        let predictor = online
            .find("predictor.fc0.weight")
            .map(|_| Mlp::attach(&online, "predictor"))
            .transpose()?;
        if let Some(t) = &target {
            let shared = online.len() - if predictor.is_some() { 4 } else { 0 };
            if t.len() != shared || t.iter().zip(online.iter()).any(|((a, p), (b, q))| a != b || p.value.shape() != q.value.shape()) {
                return Err(Error::invalid("momentum tower does not mirror the online encoder and projector"));
            }
        }
        Ok(Self {
            encoder,
            projector,
            predictor,
            online,
            target,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let online = ckpt.section("online");
        if online.is_empty() {
            return Err(Error::invalid("checkpoint holds no model parameters"));
        }
        let target = ckpt.section("target");
        Self::attach(online, (!target.is_empty()).then_some(target))
    }

    pub fn to_checkpoint(&self, step: u64, config_hash: [u8; 32]) -> Checkpoint {
        let mut c = Checkpoint::new(step, config_hash, ParamStore::new());
        c.insert_section("online", &self.online);
        if let Some(t) = &self.target {
            c.insert_section("target", t);
        }
        c
    }

    pub fn config(&self) -> ModelConfig {
        let (_, hidden) = self.projector.hidden.dims(&self.online);
        let (_, out) = self.projector.out.dims(&self.online);
        ModelConfig {
            encoder_widths: self.encoder.widths(&self.online),
            projector_hidden: hidden,
            projector_out: out,
            momentum_encoder: self.target.is_some(),
        }
    }

    /// Representation width `R`.
    pub fn width(&self) -> usize {
        self.encoder.out_width(&self.online)
    }

    pub fn has_momentum(&self) -> bool {
        self.target.is_some()
    }

    pub fn encode_graph(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        self.encoder.forward(g, p, x)
    }

    /// `g∘h` with the parameters bound as `p` (online or target: ids coincide).
    pub fn project_graph(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.encoder.forward(g, p, x)?;
        self.projector.forward(g, p, h)
    }

    /// `q∘g∘h` on the online tower.
    pub fn query_graph(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        let z = self.project_graph(g, p, x)?;
        match &self.predictor {
            Some(q) => q.forward(g, p, z),
            None => Ok(z),
        }
    }

    /// Frozen encoder features of `[N,3,H,W]` images, evaluated in chunks.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.ndim() != 4 || n == 0 {
            return Err(Error::invalid(format!("expected a non-empty [N,3,H,W] batch, got {:?}", images.shape())));
        }
        let per = images.numel() / n;
        let mut out = Vec::with_capacity(n * self.width());
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let p = self.online.bind(&mut g, false);
            let x = g.constant(chunk);
            let h = self.encode_graph(&mut g, &p, x)?;
            out.extend_from_slice(g.value(h).data());
        }
        Ok(Tensor::new([n, self.width()], out)?)
    }

    /// Momentum-tower projections of `[N,3,H,W]` images.
    pub fn target_keys(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let target = self.target.as_ref().ok_or_else(|| Error::invalid("model has no momentum tower"))?;
        let mut g = Graph::new();
        let p = target.bind(&mut g, false);
        let x = g.constant(images.clone());
        let z = self.project_graph(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder_widths: vec![4, 8],
            projector_hidden: 16,
            projector_out: 6,
            momentum_encoder: true,
        }
    }

    #[test]
    fn target_mirrors_online_prefix() {
        let m = SslModel::new(&small(), 1).unwrap();
        let t = m.target.as_ref().unwrap();
        assert_eq!(t.len() + 4, m.online.len());
        for ((a, p), (b, q)) in t.iter().zip(m.online.iter()) {
            assert_eq!(a, b);
            assert_eq!(p.value.shape(), q.value.shape());
        }
        assert_eq!(m.width(), 8);
        assert_eq!(m.config(), small());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_features() {
        let m = SslModel::new(&small(), 3).unwrap();
        let bytes = m.to_checkpoint(5, [1; 32]).to_bytes();
        let back = SslModel::from_checkpoint(&Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap()).unwrap();
        let x = Tensor::from_fn([3, 3, 16, 16], |i| (i % 19) as f32 / 19.0);
        assert!(m.encode(&x).unwrap().bit_eq(&back.encode(&x).unwrap()));
        assert_eq!(back.config(), small());
    }

    #[test]
    fn symmetric_model_has_no_target() {
        let m = SslModel::new(&ModelConfig { momentum_encoder: false, ..small() }, 0).unwrap();
        assert!(!m.has_momentum());
        assert!(m.target_keys(&Tensor::zeros([1, 3, 8, 8])).is_err());
    }
}
