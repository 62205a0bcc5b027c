//! Affine coupling layers, flow blocks and single-scale flow chains.
//!
//! Encoding runs in the normalizing direction (data to latent):
//!
//! ```text
//! z_pass = x_pass
//! z_act  = (x_act - t(x_pass)) * exp(-s(x_pass))
//! ```
//!
//! and reports `log|det dz/dx| = -sum(s)`, the term that enters the negative
//! log-likelihood with a minus sign.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormCache};
use crate::params::{join, Params};
use crate::tensor::Tensor;

pub const DEFAULT_CLAMP: f32 = 1.9;

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_conv(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
    let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound));
    let b = Tensor::from_fn(&[c_out], |_| rng.gen_range(-bound..bound));
    (w, b)
}

/// `alpha * tanh(raw / alpha)`, returning the clamped value and the tanh term.
fn soft_clamp(raw: &Tensor, alpha: f32) -> (Tensor, Tensor) {
    let th = Tensor::from_fn(raw.dims(), |i| (raw.data()[i] / alpha).tanh());
    let s = Tensor::from_fn(raw.dims(), |i| alpha * th.data()[i]);
    (s, th)
}

/// Scale/shift network: `Conv3 -> LN -> ReLU -> Conv3`.
#[derive(Debug, Clone, PartialEq)]
pub struct StNetwork {
    pub conv_a_weight: Tensor,
    pub conv_a_bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub conv_b_weight: Tensor,
    pub conv_b_bias: Tensor,
    in_channels: usize,
    cond_channels: usize,
    out_channels: usize,
    clamp: f32,
}

#[derive(Debug, Clone)]
pub struct StCache {
    input: Tensor,
    norm: LayerNormCache,
    pre_relu: Tensor,
    hidden: Tensor,
    tanh_s: Tensor,
}

impl StNetwork {
    /// `in_channels` pass-through channels plus `cond_channels` condition
    /// channels map to `2 * out_channels` outputs (scale then shift).
    /// The final conv starts at zero so a fresh network yields `s = t = 0`.
    pub fn new(
        in_channels: usize,
        cond_channels: usize,
        hidden: usize,
        out_channels: usize,
        clamp: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let (conv_a_weight, conv_a_bias) = uniform_conv(rng, hidden, in_channels + cond_channels, 3);
        StNetwork {
            conv_a_weight,
            conv_a_bias,
            ln_gain: Tensor::full(&[hidden], 1.0),
            ln_bias: Tensor::zeros(&[hidden]),
            conv_b_weight: Tensor::zeros(&[2 * out_channels, hidden, 3, 3]),
            conv_b_bias: Tensor::zeros(&[2 * out_channels]),
            in_channels,
            cond_channels,
            out_channels,
            clamp,
        }
    }

    pub fn hidden(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn clamp(&self) -> f32 {
        self.clamp
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::zero(&mut z);
        z
    }

    /// Returns the soft-clamped scale `s`, the shift `t`, and the backward cache.
    pub fn forward(&self, half: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, Tensor, StCache)> {
        let (c, h, w) = half.chw()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "st_forward",
                format!("half has {c} channels, network expects {}", self.in_channels),
            ));
        }
        let input = match (cond, self.cond_channels) {
            (None, 0) => half.clone(),
            (Some(cd), n) if n > 0 => {
                if cd.dims() != [n, h, w] {
                    return Err(Error::shape(
                        "st_forward",
                        format!("condition {:?}, expected {:?}", cd.dims(), [n, h, w]),
                    ));
                }
                Tensor::concat_channels(&[half, cd])?
            }
            (got, n) => {
                return Err(Error::shape(
                    "st_forward",
                    format!("condition present: {}, expected {n} condition channels", got.is_some()),
                ))
            }
        };
        let pre_norm = kernels::conv2d(&input, &self.conv_a_weight, &self.conv_a_bias, 1)?;
        let (pre_relu, norm) = kernels::layer_norm(&pre_norm, &self.ln_gain, &self.ln_bias)?;
        let hidden = kernels::relu(&pre_relu);
        let raw = kernels::conv2d(&hidden, &self.conv_b_weight, &self.conv_b_bias, 1)?;
        let oc = self.out_channels;
        let (s, tanh_s) = soft_clamp(&raw.narrow_channels(0, oc)?, self.clamp);
        let t = raw.narrow_channels(oc, oc)?;
        Ok((s, t, StCache { input, norm, pre_relu, hidden, tanh_s }))
    }

    /// Accumulates parameter gradients into `grads`; returns the gradient
    /// w.r.t. the pass-through half (the condition receives none).
    pub fn backward(
        &self,
        cache: &StCache,
        grad_s: &Tensor,
        grad_t: &Tensor,
        grads: &mut StNetwork,
    ) -> Result<Tensor> {
        let mut grad_raw_s = grad_s.clone();
        for (g, th) in grad_raw_s.data_mut().iter_mut().zip(cache.tanh_s.data()) {
            *g *= 1.0 - th * th;
        }
        let grad_raw = Tensor::concat_channels(&[&grad_raw_s, grad_t])?;
        let (g_hidden, g_wb, g_bb) =
            kernels::conv2d_backward(&grad_raw, &cache.hidden, &self.conv_b_weight, 1)?;
        grads.conv_b_weight.add_assign(&g_wb)?;
        grads.conv_b_bias.add_assign(&g_bb)?;
        let g_pre_relu = kernels::relu_backward(&g_hidden, &cache.pre_relu)?;
        let (g_pre_norm, g_gain, g_bias) =
            kernels::layer_norm_backward(&g_pre_relu, &cache.norm, &self.ln_gain)?;
        grads.ln_gain.add_assign(&g_gain)?;
        grads.ln_bias.add_assign(&g_bias)?;
        let (g_input, g_wa, g_ba) =
            kernels::conv2d_backward(&g_pre_norm, &cache.input, &self.conv_a_weight, 1)?;
        grads.conv_a_weight.add_assign(&g_wa)?;
        grads.conv_a_bias.add_assign(&g_ba)?;
        g_input.narrow_channels(0, self.in_channels)
    }
}

impl Params for StNetwork {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "conv_a.weight"), &self.conv_a_weight);
        f(join(prefix, "conv_a.bias"), &self.conv_a_bias);
        f(join(prefix, "ln.gain"), &self.ln_gain);
        f(join(prefix, "ln.bias"), &self.ln_bias);
        f(join(prefix, "conv_b.weight"), &self.conv_b_weight);
        f(join(prefix, "conv_b.bias"), &self.conv_b_bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "conv_a.weight"), &mut self.conv_a_weight);
        f(join(prefix, "conv_a.bias"), &mut self.conv_a_bias);
        f(join(prefix, "ln.gain"), &mut self.ln_gain);
        f(join(prefix, "ln.bias"), &mut self.ln_bias);
        f(join(prefix, "conv_b.weight"), &mut self.conv_b_weight);
        f(join(prefix, "conv_b.bias"), &mut self.conv_b_bias);
    }
}

/// Which channel half a coupling layer passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Conditions on channels `[0, d)` and transforms `[d, D)`.
    Lower,
    /// Conditions on channels `[d, D)` and transforms `[0, d)`.
    Upper,
}

impl Orientation {
    /// `(pass_start, pass_len, act_start, act_len)` for `D` channels split at `D / 2`.
    pub fn ranges(self, channels: usize) -> (usize, usize, usize, usize) {
        let d = channels / 2;
        match self {
            Orientation::Lower => (0, d, d, channels - d),
            Orientation::Upper => (d, channels - d, 0, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub st: StNetwork,
    channels: usize,
    orientation: Orientation,
}

#[derive(Debug, Clone)]
pub struct CouplingCache {
    st: StCache,
    exp_neg_s: Tensor,
    latent_act: Tensor,
}

impl CouplingLayer {
    /// `hidden` defaults to the pass-through channel count.
    pub fn new(
        channels: usize,
        cond_channels: usize,
        hidden: Option<usize>,
        orientation: Orientation,
        clamp: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid("CouplingLayer::new", format!("need D >= 2, got {channels}")));
        }
        let (_, pass, _, act) = orientation.ranges(channels);
        let st = StNetwork::new(pass, cond_channels, hidden.unwrap_or(pass), act, clamp, rng);
        Ok(CouplingLayer { st, channels, orientation })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn zeros_like(&self) -> Self {
        CouplingLayer { st: self.st.zeros_like(), ..self.clone() }
    }

    fn check(&self, op: &'static str, x: &Tensor) -> Result<()> {
        let (c, _, _) = x.chw()?;
        if c != self.channels {
            return Err(Error::shape(op, format!("{c} channels, layer expects {}", self.channels)));
        }
        Ok(())
    }

    pub fn encode(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        self.encode_cached(input, cond).map(|(z, ld, _)| (z, ld))
    }

    pub fn encode_cached(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64, CouplingCache)> {
        self.check("coupling_encode", input)?;
        let (ps, pl, as_, al) = self.orientation.ranges(self.channels);
        let pass = input.narrow_channels(ps, pl)?;
        let act = input.narrow_channels(as_, al)?;
        let (s, t, st) = self.st.forward(&pass, cond)?;
        let exp_neg_s = Tensor::from_fn(s.dims(), |i| (-s.data()[i]).exp());
        let latent_act =
            Tensor::from_fn(act.dims(), |i| (act.data()[i] - t.data()[i]) * exp_neg_s.data()[i]);
        latent_act.ensure_finite("coupling_encode")?;
        let logdet = -s.data().iter().map(|&v| f64::from(v)).sum::<f64>();
        let mut z = input.clone();
        z.write_channels(as_, &latent_act)?;
        Ok((z, logdet, CouplingCache { st, exp_neg_s, latent_act }))
    }

    /// Inverse of [`CouplingLayer::encode`]; the returned log-det is that of
    /// the decode map, `+sum(s)`.
    pub fn decode(&self, latent: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        self.check("coupling_decode", latent)?;
        let (ps, pl, as_, al) = self.orientation.ranges(self.channels);
        let pass = latent.narrow_channels(ps, pl)?;
        let act = latent.narrow_channels(as_, al)?;
        let (s, t, _) = self.st.forward(&pass, cond)?;
        let x_act = Tensor::from_fn(act.dims(), |i| act.data()[i] * s.data()[i].exp() + t.data()[i]);
        x_act.ensure_finite("coupling_decode")?;
        let mut x = latent.clone();
        x.write_channels(as_, &x_act)?;
        Ok((x, s.data().iter().map(|&v| f64::from(v)).sum()))
    }

    /// Backpropagates a loss `L(z, logdet)` given `dL/dz` and `dL/dlogdet`.
    /// Parameter gradients are added to `grads`; returns `dL/dx`.
    pub fn backward(
        &self,
        cache: &CouplingCache,
        grad_latent: &Tensor,
        logdet_weight: f32,
        grads: &mut CouplingLayer,
    ) -> Result<Tensor> {
        self.check("coupling_backward", grad_latent)?;
        let (ps, pl, as_, al) = self.orientation.ranges(self.channels);
        let g_act_out = grad_latent.narrow_channels(as_, al)?;
        let g = g_act_out.data();
        let e = cache.exp_neg_s.data();
        let za = cache.latent_act.data();
        let g_act_in = Tensor::from_fn(g_act_out.dims(), |i| g[i] * e[i]);
        let g_t = Tensor::from_fn(g_act_out.dims(), |i| -g[i] * e[i]);
        // d logdet / d s = -1 for every scale entry.
        let g_s = Tensor::from_fn(g_act_out.dims(), |i| -g[i] * za[i] - logdet_weight);
        let mut g_pass = self.st.backward(&cache.st, &g_s, &g_t, &mut grads.st)?;
        g_pass.add_assign(&grad_latent.narrow_channels(ps, pl)?)?;
        let mut g_in = grad_latent.clone();
        g_in.write_channels(ps, &g_pass)?;
        g_in.write_channels(as_, &g_act_in)?;
        Ok(g_in)
    }
}

impl Params for CouplingLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.st.visit(&join(prefix, "st"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.st.visit_mut(&join(prefix, "st"), f);
    }
}

/// Two coupling layers with opposite orientation, so every channel is transformed once.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock {
    pub layers: [CouplingLayer; 2],
}

#[derive(Debug, Clone)]
pub struct BlockCache([CouplingCache; 2]);

impl FlowBlock {
    pub fn new(
        channels: usize,
        cond_channels: usize,
        hidden: Option<usize>,
        clamp: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let first = CouplingLayer::new(channels, cond_channels, hidden, Orientation::Lower, clamp, rng)?;
        let second = CouplingLayer::new(channels, cond_channels, hidden, Orientation::Upper, clamp, rng)?;
        Ok(FlowBlock { layers: [first, second] })
    }

    pub fn zeros_like(&self) -> Self {
        FlowBlock { layers: [self.layers[0].zeros_like(), self.layers[1].zeros_like()] }
    }

    pub fn encode(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        let (a, ld0) = self.layers[0].encode(input, cond)?;
        let (b, ld1) = self.layers[1].encode(&a, cond)?;
        Ok((b, ld0 + ld1))
    }

    pub fn encode_cached(&self, input: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64, BlockCache)> {
        let (a, ld0, c0) = self.layers[0].encode_cached(input, cond)?;
        let (b, ld1, c1) = self.layers[1].encode_cached(&a, cond)?;
        Ok((b, ld0 + ld1, BlockCache([c0, c1])))
    }

    pub fn decode(&self, latent: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        let (a, ld1) = self.layers[1].decode(latent, cond)?;
        let (x, ld0) = self.layers[0].decode(&a, cond)?;
        Ok((x, ld0 + ld1))
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        grad_latent: &Tensor,
        logdet_weight: f32,
        grads: &mut FlowBlock,
    ) -> Result<Tensor> {
        let [g0, g1] = &mut grads.layers;
        let g = self.layers[1].backward(&cache.0[1], grad_latent, logdet_weight, g1)?;
        self.layers[0].backward(&cache.0[0], &g, logdet_weight, g0)
    }
}

impl Params for FlowBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// A sequence of flow blocks over one feature scale, optionally conditioned
/// on a fixed (non-trainable) tensor such as a positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowChain {
    pub blocks: Vec<FlowBlock>,
    channels: usize,
    cond: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ChainCache(Vec<BlockCache>);

impl FlowChain {
    pub fn new(
        channels: usize,
        num_blocks: usize,
        cond: Option<Tensor>,
        hidden: Option<usize>,
        clamp: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cond_channels = match &cond {
            Some(c) => c.chw()?.0,
            None => 0,
        };
        let blocks = (0..num_blocks)
            .map(|_| FlowBlock::new(channels, cond_channels, hidden, clamp, rng))
            .collect::<Result<_>>()?;
        Ok(FlowChain { blocks, channels, cond })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cond(&self) -> Option<&Tensor> {
        self.cond.as_ref()
    }

    pub fn zeros_like(&self) -> Self {
        FlowChain { blocks: self.blocks.iter().map(FlowBlock::zeros_like).collect(), ..self.clone() }
    }

    pub fn encode(&self, input: &Tensor) -> Result<(Tensor, f64)> {
        let mut x = input.clone();
        let mut logdet = 0.0;
        for b in &self.blocks {
            let (z, ld) = b.encode(&x, self.cond.as_ref())?;
            x = z;
            logdet += ld;
        }
        Ok((x, logdet))
    }

    pub fn encode_cached(&self, input: &Tensor) -> Result<(Tensor, f64, ChainCache)> {
        let mut x = input.clone();
        let mut logdet = 0.0;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (z, ld, c) = b.encode_cached(&x, self.cond.as_ref())?;
            x = z;
            logdet += ld;
            caches.push(c);
        }
        Ok((x, logdet, ChainCache(caches)))
    }

    pub fn decode(&self, latent: &Tensor) -> Result<(Tensor, f64)> {
        let mut z = latent.clone();
        let mut logdet = 0.0;
        for b in self.blocks.iter().rev() {
            let (x, ld) = b.decode(&z, self.cond.as_ref())?;
            z = x;
            logdet += ld;
        }
        Ok((z, logdet))
    }

    pub fn backward(
        &self,
        cache: &ChainCache,
        grad_latent: &Tensor,
        logdet_weight: f32,
        grads: &mut FlowChain,
    ) -> Result<Tensor> {
        if cache.0.len() != self.blocks.len() {
            return Err(Error::invalid("chain_backward", "cache does not match chain length"));
        }
        let mut g = grad_latent.clone();
        for ((b, c), gb) in self.blocks.iter().zip(&cache.0).zip(grads.blocks.iter_mut()).rev() {
            g = b.backward(c, &g, logdet_weight, gb)?;
        }
        Ok(g)
    }
}

impl Params for FlowChain {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}
