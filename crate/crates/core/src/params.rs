//! Uniform access to the trainable tensors of a model.
//!
//! Gradients are stored in a value of the same type as the model (built with
//! `zeros_like`), so optimizers and reducers can walk model and gradient in
//! lockstep through the same visitor.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Params {
    /// Visits every trainable tensor in a fixed order with its path-like name.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));

    /// Same order as [`Params::visit`].
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named<P: Params + ?Sized>(p: &P) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn tensors<P: Params + ?Sized>(p: &P) -> Vec<&Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t));
    out
}

pub fn tensors_mut<P: Params + ?Sized>(p: &mut P) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |_, t| out.push(t));
    out
}

pub fn count<P: Params + ?Sized>(p: &P) -> usize {
    tensors(p).iter().map(|t| t.len()).sum()
}

/// `dst += src`, element by element in visit order.
pub fn accumulate<P: Params + ?Sized>(dst: &mut P, src: &P) -> Result<()> {
    let src = tensors(src);
    let dst = tensors_mut(dst);
    if src.len() != dst.len() {
        return Err(Error::shape("accumulate", format!("{} vs {} tensors", dst.len(), src.len())));
    }
    for (d, s) in dst.into_iter().zip(src) {
        d.add_assign(s)?;
    }
    Ok(())
}

pub fn scale<P: Params + ?Sized>(p: &mut P, k: f32) {
    for t in tensors_mut(p) {
        t.scale(k);
    }
}

pub fn zero<P: Params + ?Sized>(p: &mut P) {
    for t in tensors_mut(p) {
        t.fill(0.0);
    }
}

pub fn global_norm<P: Params + ?Sized>(p: &P) -> f64 {
    tensors(p).iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
}

pub fn all_finite<P: Params + ?Sized>(p: &P) -> bool {
    tensors(p).iter().all(|t| t.is_finite())
}

/// SHA-256 over names, dims and raw little-endian values.
pub fn checksum<P: Params + ?Sized>(p: &P) -> String {
    let mut h = Sha256::new();
    for (name, t) in named(p) {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
