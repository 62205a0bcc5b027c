//! Cross-scale fusion flow.
//!
//! Each fusion coupling sub-layer takes one channel half of every scale,
//! shrinks (or grows) them to a shared spatial size, mixes them through a
//! `Conv3 -> LN -> ReLU -> Conv3` bottleneck with a quarter of the channels,
//! rescales the mixed maps back, adds them to their inputs and predicts a
//! per-scale scale/shift for the other halves with independent 3x3 heads.

use rand::Rng;

use crate::coupling::{uniform_conv, Orientation};
use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormCache};
use crate::params::{join, Params};
use crate::tensor::Tensor;

/// A padded 3x3 convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3 {
    pub fn uniform(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let (weight, bias) = uniform_conv(rng, c_out, c_in, 3);
        Conv3 { weight, bias }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Conv3 { weight: Tensor::zeros(&[c_out, c_in, 3, 3]), bias: Tensor::zeros(&[c_out]) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kernels::conv2d(x, &self.weight, &self.bias, 1)
    }

    /// Adds parameter gradients to `grads`, returns the input gradient.
    pub fn backward(&self, grad_out: &Tensor, input: &Tensor, grads: &mut Conv3) -> Result<Tensor> {
        let (gi, gw, gb) = kernels::conv2d_backward(grad_out, input, &self.weight, 1)?;
        grads.weight.add_assign(&gw)?;
        grads.bias.add_assign(&gb)?;
        Ok(gi)
    }
}

impl Params for Conv3 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

type Size = (usize, usize);

/// Spatial rescale between a scale's own size and the fusion size.
fn resize(x: &Tensor, to: Size) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    if (h, w) == to {
        Ok(x.clone())
    } else if h >= to.0 && w >= to.1 {
        kernels::adaptive_avg_pool2d(x, to.0, to.1)
    } else if h <= to.0 && w <= to.1 {
        kernels::bilinear_upsample(x, to.0, to.1)
    } else {
        Err(Error::shape("fusion resize", format!("{h}x{w} -> {}x{}", to.0, to.1)))
    }
}

fn resize_backward(grad: &Tensor, from: Size) -> Result<Tensor> {
    let (_, h, w) = grad.chw()?;
    if (h, w) == from {
        Ok(grad.clone())
    } else if from.0 >= h && from.1 >= w {
        kernels::adaptive_avg_pool2d_backward(grad, from.0, from.1)
    } else {
        kernels::bilinear_upsample_backward(grad, from.0, from.1)
    }
}

/// Target size must be reachable from every scale by a pure shrink or a pure grow.
fn check_resizable(sizes: &[Size], target: Size) -> Result<()> {
    for &(h, w) in sizes {
        let shrink = h >= target.0 && w >= target.1;
        let grow = h <= target.0 && w <= target.1;
        if !(shrink || grow) {
            return Err(Error::invalid(
                "FusionNetwork",
                format!("scale {h}x{w} cannot be resized to fusion size {}x{}", target.0, target.1),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionNetwork {
    pub conv1: Conv3,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub conv2: Conv3,
    channels: Vec<usize>,
    sizes: Vec<Size>,
    target: Size,
}

#[derive(Debug, Clone)]
pub struct FusionNetCache {
    concat: Tensor,
    norm: LayerNormCache,
    pre_relu: Tensor,
    hidden: Tensor,
}

impl FusionNetwork {
    pub fn new(channels: &[usize], sizes: &[Size], target: Size, rng: &mut impl Rng) -> Result<Self> {
        if channels.len() != sizes.len() || channels.is_empty() {
            return Err(Error::invalid("FusionNetwork", "channels and sizes must pair up"));
        }
        check_resizable(sizes, target)?;
        let total: usize = channels.iter().sum();
        let mid = (total / 4).max(1);
        Ok(FusionNetwork {
            conv1: Conv3::uniform(total, mid, rng),
            ln_gain: Tensor::full(&[mid], 1.0),
            ln_bias: Tensor::zeros(&[mid]),
            conv2: Conv3::uniform(mid, total, rng),
            channels: channels.to_vec(),
            sizes: sizes.to_vec(),
            target,
        })
    }

    pub fn target(&self) -> Size {
        self.target
    }

    pub fn middle_channels(&self) -> usize {
        self.ln_gain.len()
    }

    fn check_inputs(&self, inputs: &[&Tensor]) -> Result<()> {
        if inputs.len() != self.channels.len() {
            return Err(Error::shape(
                "fusion_network_forward",
                format!("{} inputs for {} scales", inputs.len(), self.channels.len()),
            ));
        }
        for (i, x) in inputs.iter().enumerate() {
            let expected = [self.channels[i], self.sizes[i].0, self.sizes[i].1];
            if x.dims() != expected {
                return Err(Error::shape(
                    "fusion_network_forward",
                    format!("scale {i}: got {:?}, expected {expected:?}", x.dims()),
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        self.forward_cached(inputs).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, inputs: &[&Tensor]) -> Result<(Vec<Tensor>, FusionNetCache)> {
        self.check_inputs(inputs)?;
        let shrunk = inputs.iter().map(|x| resize(x, self.target)).collect::<Result<Vec<_>>>()?;
        let concat = Tensor::concat_channels(&shrunk.iter().collect::<Vec<_>>())?;
        let pre_norm = self.conv1.forward(&concat)?;
        let (pre_relu, norm) = kernels::layer_norm(&pre_norm, &self.ln_gain, &self.ln_bias)?;
        let hidden = kernels::relu(&pre_relu);
        let mixed = self.conv2.forward(&hidden)?;
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for (i, x) in inputs.iter().enumerate() {
            let part = mixed.narrow_channels(start, self.channels[i])?;
            start += self.channels[i];
            let mut out = resize(&part, self.sizes[i])?;
            out.add_assign(x)?;
            outputs.push(out);
        }
        Ok((outputs, FusionNetCache { concat, norm, pre_relu, hidden }))
    }

    /// Returns the gradient for every input scale (residual path included).
    pub fn backward(
        &self,
        cache: &FusionNetCache,
        grad_out: &[Tensor],
        grads: &mut FusionNetwork,
    ) -> Result<Vec<Tensor>> {
        let parts = grad_out
            .iter()
            .map(|g| resize_backward(g, self.target))
            .collect::<Result<Vec<_>>>()?;
        let g_mixed = Tensor::concat_channels(&parts.iter().collect::<Vec<_>>())?;
        let g_hidden = self.conv2.backward(&g_mixed, &cache.hidden, &mut grads.conv2)?;
        let g_pre_relu = kernels::relu_backward(&g_hidden, &cache.pre_relu)?;
        let (g_pre_norm, g_gain, g_bias) =
            kernels::layer_norm_backward(&g_pre_relu, &cache.norm, &self.ln_gain)?;
        grads.ln_gain.add_assign(&g_gain)?;
        grads.ln_bias.add_assign(&g_bias)?;
        let g_concat = self.conv1.backward(&g_pre_norm, &cache.concat, &mut grads.conv1)?;
        let mut result = Vec::with_capacity(grad_out.len());
        let mut start = 0;
        for (i, g) in grad_out.iter().enumerate() {
            let part = g_concat.narrow_channels(start, self.channels[i])?;
            start += self.channels[i];
            let mut gi = resize_backward(&part, self.sizes[i])?;
            gi.add_assign(g)?;
            result.push(gi);
        }
        Ok(result)
    }
}

impl Params for FusionNetwork {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        f(join(prefix, "ln.gain"), &self.ln_gain);
        f(join(prefix, "ln.bias"), &self.ln_bias);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        f(join(prefix, "ln.gain"), &mut self.ln_gain);
        f(join(prefix, "ln.bias"), &mut self.ln_bias);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// One multi-scale affine coupling step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCoupling {
    pub net: FusionNetwork,
    pub scale_heads: Vec<Conv3>,
    pub shift_heads: Vec<Conv3>,
    channels: Vec<usize>,
    orientation: Orientation,
    clamp: f32,
}

#[derive(Debug, Clone)]
pub struct FusionCouplingCache {
    net: FusionNetCache,
    fused: Vec<Tensor>,
    tanh_s: Vec<Tensor>,
    exp_neg_s: Vec<Tensor>,
    latent_act: Vec<Tensor>,
}

impl FusionCoupling {
    pub fn new(
        channels: &[usize],
        sizes: &[Size],
        target: Size,
        orientation: Orientation,
        clamp: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels.iter().any(|&c| c < 2) {
            return Err(Error::invalid("FusionCoupling", format!("every scale needs >= 2 channels: {channels:?}")));
        }
        let pass: Vec<usize> = channels.iter().map(|&c| orientation.ranges(c).1).collect();
        let act: Vec<usize> = channels.iter().map(|&c| orientation.ranges(c).3).collect();
        let net = FusionNetwork::new(&pass, sizes, target, rng)?;
        let scale_heads = pass.iter().zip(&act).map(|(&p, &a)| Conv3::zeros(p, a)).collect();
        let shift_heads = pass.iter().zip(&act).map(|(&p, &a)| Conv3::zeros(p, a)).collect();
        Ok(FusionCoupling { net, scale_heads, shift_heads, channels: channels.to_vec(), orientation, clamp })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::zero(&mut z);
        z
    }

    fn check(&self, op: &'static str, xs: &[Tensor]) -> Result<()> {
        if xs.len() != self.channels.len() {
            return Err(Error::shape(op, format!("{} scales, expected {}", xs.len(), self.channels.len())));
        }
        for (x, &c) in xs.iter().zip(&self.channels) {
            if x.chw()?.0 != c {
                return Err(Error::shape(op, format!("{:?} vs {c} channels", x.dims())));
            }
        }
        Ok(())
    }

    fn split(&self, xs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut pass = Vec::with_capacity(xs.len());
        let mut act = Vec::with_capacity(xs.len());
        for (x, &c) in xs.iter().zip(&self.channels) {
            let (ps, pl, as_, al) = self.orientation.ranges(c);
            pass.push(x.narrow_channels(ps, pl)?);
            act.push(x.narrow_channels(as_, al)?);
        }
        Ok((pass, act))
    }

    #[allow(clippy::type_complexity)]
    fn scale_shift(&self, pass: &[Tensor]) -> Result<(Vec<Tensor>, FusionNetCache, Vec<(Tensor, Tensor, Tensor)>)> {
        let (fused, net_cache) = self.net.forward_cached(&pass.iter().collect::<Vec<_>>())?;
        let mut st = Vec::with_capacity(fused.len());
        for (i, a) in fused.iter().enumerate() {
            let raw = self.scale_heads[i].forward(a)?;
            let th = Tensor::from_fn(raw.dims(), |j| (raw.data()[j] / self.clamp).tanh());
            let s = Tensor::from_fn(raw.dims(), |j| self.clamp * th.data()[j]);
            let t = self.shift_heads[i].forward(a)?;
            st.push((s, t, th));
        }
        Ok((fused, net_cache, st))
    }

    pub fn encode(&self, xs: &[Tensor]) -> Result<(Vec<Tensor>, f64)> {
        self.encode_cached(xs).map(|(z, ld, _)| (z, ld))
    }

    pub fn encode_cached(&self, xs: &[Tensor]) -> Result<(Vec<Tensor>, f64, FusionCouplingCache)> {
        self.check("fusion_encode", xs)?;
        let (pass, act) = self.split(xs)?;
        let (fused, net, st) = self.scale_shift(&pass)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut logdet = 0.0f64;
        let mut cache = FusionCouplingCache {
            net,
            fused,
            tanh_s: Vec::new(),
            exp_neg_s: Vec::new(),
            latent_act: Vec::new(),
        };
        for (i, (s, t, th)) in st.into_iter().enumerate() {
            let e = Tensor::from_fn(s.dims(), |j| (-s.data()[j]).exp());
            let a = &act[i];
            let za = Tensor::from_fn(a.dims(), |j| (a.data()[j] - t.data()[j]) * e.data()[j]);
            za.ensure_finite("fusion_encode")?;
            logdet -= s.data().iter().map(|&v| f64::from(v)).sum::<f64>();
            let mut z = xs[i].clone();
            z.write_channels(self.orientation.ranges(self.channels[i]).2, &za)?;
            out.push(z);
            cache.tanh_s.push(th);
            cache.exp_neg_s.push(e);
            cache.latent_act.push(za);
        }
        Ok((out, logdet, cache))
    }

    pub fn decode(&self, zs: &[Tensor]) -> Result<(Vec<Tensor>, f64)> {
        self.check("fusion_decode", zs)?;
        let (pass, act) = self.split(zs)?;
        let (_, _, st) = self.scale_shift(&pass)?;
        let mut out = Vec::with_capacity(zs.len());
        let mut logdet = 0.0f64;
        for (i, (s, t, _)) in st.into_iter().enumerate() {
            let a = &act[i];
            let xa = Tensor::from_fn(a.dims(), |j| a.data()[j] * s.data()[j].exp() + t.data()[j]);
            xa.ensure_finite("fusion_decode")?;
            logdet += s.data().iter().map(|&v| f64::from(v)).sum::<f64>();
            let mut x = zs[i].clone();
            x.write_channels(self.orientation.ranges(self.channels[i]).2, &xa)?;
            out.push(x);
        }
        Ok((out, logdet))
    }

    pub fn backward(
        &self,
        cache: &FusionCouplingCache,
        grad_latent: &[Tensor],
        logdet_weight: f32,
        grads: &mut FusionCoupling,
    ) -> Result<Vec<Tensor>> {
        self.check("fusion_backward", grad_latent)?;
        let n = self.channels.len();
        let mut g_fused = Vec::with_capacity(n);
        let mut g_act_in = Vec::with_capacity(n);
        for i in 0..n {
            let (_, _, as_, al) = self.orientation.ranges(self.channels[i]);
            let g_out = grad_latent[i].narrow_channels(as_, al)?;
            let g = g_out.data();
            let e = cache.exp_neg_s[i].data();
            let za = cache.latent_act[i].data();
            let th = cache.tanh_s[i].data();
            g_act_in.push(Tensor::from_fn(g_out.dims(), |j| g[j] * e[j]));
            let g_t = Tensor::from_fn(g_out.dims(), |j| -g[j] * e[j]);
            let g_raw_s = Tensor::from_fn(g_out.dims(), |j| {
                (-g[j] * za[j] - logdet_weight) * (1.0 - th[j] * th[j])
            });
            let a = &cache.fused[i];
            let mut gf = self.scale_heads[i].backward(&g_raw_s, a, &mut grads.scale_heads[i])?;
            gf.add_assign(&self.shift_heads[i].backward(&g_t, a, &mut grads.shift_heads[i])?)?;
            g_fused.push(gf);
        }
        let g_pass = self.net.backward(&cache.net, &g_fused, &mut grads.net)?;
        let mut result = Vec::with_capacity(n);
        for i in 0..n {
            let (ps, pl, as_, _) = self.orientation.ranges(self.channels[i]);
            let mut gp = g_pass[i].clone();
            gp.add_assign(&grad_latent[i].narrow_channels(ps, pl)?)?;
            let mut g = grad_latent[i].clone();
            g.write_channels(ps, &gp)?;
            g.write_channels(as_, &g_act_in[i])?;
            result.push(g);
        }
        Ok(result)
    }
}

impl Params for FusionCoupling {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.net.visit(&join(prefix, "net"), f);
        for (i, h) in self.scale_heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("scale_head{i}")), f);
        }
        for (i, h) in self.shift_heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("shift_head{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.net.visit_mut(&join(prefix, "net"), f);
        for (i, h) in self.scale_heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("scale_head{i}")), f);
        }
        for (i, h) in self.shift_heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("shift_head{i}")), f);
        }
    }
}

/// Two fusion coupling sub-layers, one per orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionFlow {
    pub layers: [FusionCoupling; 2],
}

#[derive(Debug, Clone)]
pub struct FusionFlowCache([FusionCouplingCache; 2]);

impl FusionFlow {
    pub fn new(channels: &[usize], sizes: &[Size], target: Size, clamp: f32, rng: &mut impl Rng) -> Result<Self> {
        let a = FusionCoupling::new(channels, sizes, target, Orientation::Lower, clamp, rng)?;
        let b = FusionCoupling::new(channels, sizes, target, Orientation::Upper, clamp, rng)?;
        Ok(FusionFlow { layers: [a, b] })
    }

    pub fn zeros_like(&self) -> Self {
        FusionFlow { layers: [self.layers[0].zeros_like(), self.layers[1].zeros_like()] }
    }

    pub fn encode(&self, xs: &[Tensor]) -> Result<(Vec<Tensor>, f64)> {
        let (a, l0) = self.layers[0].encode(xs)?;
        let (b, l1) = self.layers[1].encode(&a)?;
        Ok((b, l0 + l1))
    }

    pub fn encode_cached(&self, xs: &[Tensor]) -> Result<(Vec<Tensor>, f64, FusionFlowCache)> {
        let (a, l0, c0) = self.layers[0].encode_cached(xs)?;
        let (b, l1, c1) = self.layers[1].encode_cached(&a)?;
        Ok((b, l0 + l1, FusionFlowCache([c0, c1])))
    }

    pub fn decode(&self, zs: &[Tensor]) -> Result<(Vec<Tensor>, f64)> {
        let (a, l1) = self.layers[1].decode(zs)?;
        let (x, l0) = self.layers[0].decode(&a)?;
        Ok((x, l0 + l1))
    }

    pub fn backward(
        &self,
        cache: &FusionFlowCache,
        grad_latent: &[Tensor],
        logdet_weight: f32,
        grads: &mut FusionFlow,
    ) -> Result<Vec<Tensor>> {
        let [g0, g1] = &mut grads.layers;
        let g = self.layers[1].backward(&cache.0[1], grad_latent, logdet_weight, g1)?;
        self.layers[0].backward(&cache.0[0], &g, logdet_weight, g0)
    }
}

impl Params for FusionFlow {
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
