use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::kernels::bilinear_upsample;
use crate::tensor::Tensor;

pub const DEFAULT_K_FRACTION: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Add,
    Mul,
    /// Multiplication for detection, addition for localization.
    Both,
}

impl Aggregation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "add" => Some(Aggregation::Add),
            "mul" => Some(Aggregation::Mul),
            "both" => Some(Aggregation::Both),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Add => "add",
            Aggregation::Mul => "mul",
            Aggregation::Both => "both",
        }
    }
}

/// Per-position log-likelihood `-|z|^2 / (2C)`, shaped [h, w].
pub fn loglik_map(z: &Tensor) -> Result<Tensor> {
    let (c, h, w) = z.chw()?;
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&z.data()[ch * plane..(ch + 1) * plane]) {
            *o += v * v;
        }
    }
    let k = -0.5 / c as f32;
    Tensor::new(vec![h, w], out.into_iter().map(|s| s * k).collect())
}

/// Bilinear resize of an [h, w] map to [out_h, out_w].
pub fn upsample_map(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w] = map.dims() else {
        return Err(Error::shape("upsample_map", format!("expected [h, w], got {:?}", map.dims())));
    };
    bilinear_upsample(&map.clone().reshape(&[1, h, w])?, out_h, out_w)?.reshape(&[out_h, out_w])
}

/// Add: `sum exp(l_i)`. Mul: `exp(sum l_i)`.
pub fn aggregate(logmaps: &[Tensor], mode: Aggregation) -> Result<Tensor> {
    let first = logmaps.first().ok_or_else(|| Error::invalid("aggregate", "no maps"))?;
    if let Some(m) = logmaps.iter().find(|m| m.dims() != first.dims()) {
        return Err(Error::shape("aggregate", format!("{:?} vs {:?}", m.dims(), first.dims())));
    }
    let out = match mode {
        Aggregation::Add => Tensor::from_fn(first.dims(), |i| logmaps.iter().map(|m| m.data()[i].exp()).sum()),
        Aggregation::Mul | Aggregation::Both => {
            Tensor::from_fn(first.dims(), |i| logmaps.iter().map(|m| m.data()[i]).sum::<f32>().exp())
        }
    };
    out.ensure_finite("aggregate")?;
    Ok(out)
}

/// `max(P) - P`.
pub fn anomaly_map(p: &Tensor) -> Tensor {
    let max = p.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    Tensor::from_fn(p.dims(), |i| max - p.data()[i])
}

pub fn top_k_count(k_fraction: f64, n: usize) -> Result<usize> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::invalid("image_score", format!("k_fraction must be in (0, 1], got {k_fraction}")));
    }
    Ok(((k_fraction * n as f64).round() as usize).clamp(1, n.max(1)))
}

/// Mean of the `k` largest values.
pub fn top_k_mean(values: &[f32], k: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("image_score", "empty map"));
    }
    if k == 0 || k > values.len() {
        return Err(Error::invalid("image_score", format!("K = {k} for {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().map(|&x| f64::from(x)).sum::<f64>() / k as f64)
}

pub fn image_score(s: &Tensor, k_fraction: f64) -> Result<f64> {
    top_k_mean(s.data(), top_k_count(k_fraction, s.len())?)
}

#[derive(Debug, Clone)]
pub struct ScoreMaps {
    pub loglik: [Tensor; 3],
    pub p_add: Tensor,
    pub p_mul: Tensor,
    pub s_loc: Tensor,
    pub s_mul: Tensor,
    /// Top-K mean of `s_mul`.
    pub s_det: f64,
    /// Top-K mean of `s_loc`.
    pub s_det_add: f64,
}

impl ScoreMaps {
    pub fn detection_score(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Add => self.s_det_add,
            Aggregation::Mul | Aggregation::Both => self.s_det,
        }
    }

    pub fn localization_map(&self, agg: Aggregation) -> &Tensor {
        match agg {
            Aggregation::Mul => &self.s_mul,
            Aggregation::Add | Aggregation::Both => &self.s_loc,
        }
    }
}

pub fn score_latents(latents: &[Tensor; 3], height: usize, width: usize, k_fraction: f64) -> Result<ScoreMaps> {
    let maps = latents
        .iter()
        .map(|z| upsample_map(&loglik_map(z)?, height, width))
        .collect::<Result<Vec<_>>>()?;
    let p_add = aggregate(&maps, Aggregation::Add)?;
    let p_mul = aggregate(&maps, Aggregation::Mul)?;
    let s_loc = anomaly_map(&p_add);
    let s_mul = anomaly_map(&p_mul);
    let s_det = image_score(&s_mul, k_fraction)?;
    let s_det_add = image_score(&s_loc, k_fraction)?;
    let loglik = <[Tensor; 3]>::try_from(maps).expect("three maps");
    Ok(ScoreMaps { loglik, p_add, p_mul, s_loc, s_mul, s_det, s_det_add })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub width: usize,
    pub height: usize,
    pub min: f32,
    pub max: f32,
}

/// Writes an 8-bit min-max normalized PGM and a JSON sidecar with the constants.
pub fn write_heatmap(map: &Tensor, pgm: &Path, sidecar: &Path) -> Result<HeatmapMeta> {
    let &[height, width] = map.dims() else {
        return Err(Error::shape("write_heatmap", format!("expected [h, w], got {:?}", map.dims())));
    };
    let min = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    let pixels = map
        .data()
        .iter()
        .map(|&v| if range > 0.0 { ((v - min) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    Raster::new(width, height, 1, pixels)?.write(pgm)?;
    let meta = HeatmapMeta { width, height, min, max };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json { path: sidecar.into(), source: e })?;
    fs::write(sidecar, text + "\n").map_err(|e| Error::io(sidecar, e))?;
    Ok(meta)
}
