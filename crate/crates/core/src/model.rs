//! The multi-scale flow: three parallel chains followed by a fusion flow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{ChainCache, FlowChain, DEFAULT_CLAMP};
use crate::error::{Error, Result};
use crate::fusion::{FusionFlow, FusionFlowCache};
use crate::kernels;
use crate::params::{join, Params};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

/// Architecture description; stored in checkpoints so a loaded model is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel count per scale.
    pub channels: [usize; 3],
    /// `[H, W]` per scale, after pyramid pooling.
    pub sizes: [[usize; 2]; 3],
    /// Flow blocks per parallel chain.
    pub blocks: [usize; 3],
    pub clamp: f32,
    /// Positional-encoding channels fed to the parallel chains; 0 disables.
    pub pos_channels: usize,
    pub fusion: bool,
    /// Square pooling target for the fusion network; `None` means the smallest scale.
    pub fusion_size: Option<usize>,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture for a pyramid with the given per-scale shapes.
    pub fn for_shapes(channels: [usize; 3], sizes: [[usize; 2]; 3]) -> Self {
        ModelConfig {
            channels,
            sizes,
            blocks: [2, 5, 8],
            clamp: DEFAULT_CLAMP,
            pos_channels: 64,
            fusion: true,
            fusion_size: None,
            seed: 0,
        }
    }

    pub fn for_pyramid(p: &FeaturePyramid) -> Self {
        Self::for_shapes(p.channels(), p.sizes())
    }

    pub fn fusion_target(&self) -> (usize, usize) {
        match self.fusion_size {
            Some(s) => (s, s),
            None => {
                let [h, w] = *self.sizes.iter().min_by_key(|[h, w]| h * w).expect("three scales");
                (h, w)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c < 2) {
            return Err(Error::Config(format!("every scale needs >= 2 channels, got {:?}", self.channels)));
        }
        if self.sizes.iter().flatten().any(|&s| s == 0) {
            return Err(Error::Config(format!("empty spatial size in {:?}", self.sizes)));
        }
        if !self.pos_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "positional-encoding channels must be a multiple of 4, got {}",
                self.pos_channels
            )));
        }
        if !(self.clamp.is_finite() && self.clamp > 0.0) {
            return Err(Error::Config(format!("clamp must be positive, got {}", self.clamp)));
        }
        if self.fusion_size == Some(0) {
            return Err(Error::Config("fusion size must be positive".into()));
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        (0..3).map(|i| self.channels[i] * self.sizes[i][0] * self.sizes[i][1]).sum()
    }
}

/// Latents of one encode pass with the log-det split by component.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub latents: [Tensor; 3],
    pub parallel_logdets: [f64; 3],
    pub fusion_logdet: f64,
}

impl Encoded {
    pub fn total_logdet(&self) -> f64 {
        self.parallel_logdets.iter().sum::<f64>() + self.fusion_logdet
    }
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    chains: Vec<ChainCache>,
    fusion: Option<FusionFlowCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsFlowModel {
    config: ModelConfig,
    pub chains: Vec<FlowChain>,
    pub fusion: Option<FusionFlow>,
}

impl MsFlowModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut chains = Vec::with_capacity(3);
        for i in 0..3 {
            let [h, w] = config.sizes[i];
            let cond = match config.pos_channels {
                0 => None,
                p => Some(kernels::pos_encoding_2d(p, h, w)?),
            };
            chains.push(FlowChain::new(config.channels[i], config.blocks[i], cond, None, config.clamp, &mut rng)?);
        }
        let fusion = if config.fusion {
            let sizes: Vec<(usize, usize)> = config.sizes.iter().map(|s| (s[0], s[1])).collect();
            Some(FusionFlow::new(&config.channels, &sizes, config.fusion_target(), config.clamp, &mut rng)?)
        } else {
            None
        };
        Ok(MsFlowModel { config, chains, fusion })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        MsFlowModel {
            config: self.config.clone(),
            chains: self.chains.iter().map(FlowChain::zeros_like).collect(),
            fusion: self.fusion.as_ref().map(FusionFlow::zeros_like),
        }
    }

    fn check_scale(&self, i: usize, t: &Tensor) -> Result<()> {
        let [h, w] = self.config.sizes[i];
        let expected = [self.config.channels[i], h, w];
        if t.dims() != expected {
            return Err(Error::shape(
                "msflow",
                format!("scale {i} is {:?}, model registered {expected:?}", t.dims()),
            ));
        }
        Ok(())
    }

    /// Runs parallel chain `scale` alone.
    pub fn parallel_encode(&self, y: &Tensor, scale: usize) -> Result<(Tensor, f64)> {
        self.check_scale(scale, y)?;
        self.chains[scale].encode(y)
    }

    pub fn fusion_encode(&self, zs: [Tensor; 3]) -> Result<([Tensor; 3], f64)> {
        match &self.fusion {
            None => Ok((zs, 0.0)),
            Some(f) => {
                let (out, ld) = f.encode(&zs)?;
                Ok((to_array(out), ld))
            }
        }
    }

    pub fn encode(&self, pyramid: &FeaturePyramid) -> Result<Encoded> {
        let mut latents = Vec::with_capacity(3);
        let mut parallel_logdets = [0.0; 3];
        for (i, y) in pyramid.levels.iter().enumerate() {
            let (z, ld) = self.parallel_encode(y, i)?;
            latents.push(z);
            parallel_logdets[i] = ld;
        }
        let (latents, fusion_logdet) = self.fusion_encode(to_array(latents))?;
        Ok(Encoded { latents, parallel_logdets, fusion_logdet })
    }

    pub fn encode_cached(&self, pyramid: &FeaturePyramid) -> Result<(Encoded, ModelCache)> {
        let mut latents = Vec::with_capacity(3);
        let mut parallel_logdets = [0.0; 3];
        let mut chains = Vec::with_capacity(3);
        for (i, y) in pyramid.levels.iter().enumerate() {
            self.check_scale(i, y)?;
            let (z, ld, c) = self.chains[i].encode_cached(y)?;
            latents.push(z);
            parallel_logdets[i] = ld;
            chains.push(c);
        }
        let (latents, fusion_logdet, fusion) = match &self.fusion {
            None => (to_array(latents), 0.0, None),
            Some(f) => {
                let (out, ld, c) = f.encode_cached(&latents)?;
                (to_array(out), ld, Some(c))
            }
        };
        Ok((Encoded { latents, parallel_logdets, fusion_logdet }, ModelCache { chains, fusion }))
    }

    /// Inverse of [`MsFlowModel::encode`]; returns the pyramid and the decode log-det.
    pub fn decode(&self, latents: &[Tensor; 3]) -> Result<(FeaturePyramid, f64)> {
        for (i, z) in latents.iter().enumerate() {
            self.check_scale(i, z)?;
        }
        let (zs, mut logdet) = match &self.fusion {
            None => (latents.to_vec(), 0.0),
            Some(f) => f.decode(latents)?,
        };
        let mut levels = Vec::with_capacity(3);
        for (chain, z) in self.chains.iter().zip(&zs) {
            let (y, ld) = chain.decode(z)?;
            logdet += ld;
            levels.push(y);
        }
        Ok((FeaturePyramid { levels: to_array(levels) }, logdet))
    }

    /// Backpropagates `dL/dz` and `dL/dlogdet` through the whole model,
    /// adding parameter gradients to `grads`.
    pub fn backward(
        &self,
        cache: &ModelCache,
        grad_latents: &[Tensor; 3],
        logdet_weight: f32,
        grads: &mut MsFlowModel,
    ) -> Result<()> {
        let g_parallel = match (&self.fusion, &cache.fusion, grads.fusion.as_mut()) {
            (Some(f), Some(c), Some(gf)) => f.backward(c, grad_latents, logdet_weight, gf)?,
            (None, None, None) => grad_latents.to_vec(),
            _ => return Err(Error::invalid("msflow_backward", "fusion cache does not match model")),
        };
        for (i, g) in g_parallel.iter().enumerate() {
            self.chains[i].backward(&cache.chains[i], g, logdet_weight, &mut grads.chains[i])?;
        }
        Ok(())
    }

    /// Number of trainable scalars in parallel chain `scale`.
    pub fn chain_param_count(&self, scale: usize) -> usize {
        crate::params::count(&self.chains[scale])
    }
}

impl Params for MsFlowModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, c) in self.chains.iter().enumerate() {
            c.visit(&join(prefix, &format!("parallel{i}")), f);
        }
        if let Some(fu) = &self.fusion {
            fu.visit(&join(prefix, "fusion"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, c) in self.chains.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("parallel{i}")), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&join(prefix, "fusion"), f);
        }
    }
}

fn to_array(v: Vec<Tensor>) -> [Tensor; 3] {
    <[Tensor; 3]>::try_from(v).expect("exactly three scales")
}
