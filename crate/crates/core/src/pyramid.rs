//! Multi-scale feature pyramids and the seeded toy extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coupling::uniform_conv;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const PYRAMID_POOL_KERNEL: usize = 3;
pub const PYRAMID_POOL_STRIDE: usize = 2;
pub const PYRAMID_POOL_PADDING: usize = 1;

/// Stage widths of the toy extractor.
pub const TOY_CHANNELS: [usize; 3] = [16, 32, 64];

/// Pooled stage-1..3 feature maps `(y1, y2, y3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    /// Validates channel growth and spatial halving between scales.
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        check_monotone("FeaturePyramid", &levels)?;
        Ok(FeaturePyramid { levels })
    }

    pub fn channels(&self) -> [usize; 3] {
        let c = |i: usize| self.levels[i].dims()[0];
        [c(0), c(1), c(2)]
    }

    pub fn sizes(&self) -> [[usize; 2]; 3] {
        let s = |i: usize| [self.levels[i].dims()[1], self.levels[i].dims()[2]];
        [s(0), s(1), s(2)]
    }

    pub fn num_elements(&self) -> usize {
        self.levels.iter().map(Tensor::len).sum()
    }
}

fn check_monotone(op: &'static str, maps: &[Tensor; 3]) -> Result<()> {
    let mut prev: Option<(usize, usize, usize)> = None;
    for (i, m) in maps.iter().enumerate() {
        let (c, h, w) = m.chw()?;
        if let Some((pc, ph, pw)) = prev {
            if c <= pc {
                return Err(Error::Data(format!(
                    "{op}: channel counts must strictly increase, scale {i} has {c} after {pc}"
                )));
            }
            if h != ph.div_ceil(2) && h != ph / 2 || w != pw.div_ceil(2) && w != pw / 2 {
                return Err(Error::Data(format!(
                    "{op}: scale {i} is {h}x{w}, expected half of {ph}x{pw}"
                )));
            }
        }
        prev = Some((c, h, w));
    }
    Ok(())
}

/// Pools raw stage maps `h1..h3` with a 3x3, stride-2, pad-1 average.
pub fn build_pyramid(stages: &[Tensor]) -> Result<FeaturePyramid> {
    let [h1, h2, h3] = stages else {
        return Err(Error::Data(format!(
            "expected exactly 3 stage maps (stages 1-3), got {}",
            stages.len()
        )));
    };
    let raw = [h1.clone(), h2.clone(), h3.clone()];
    check_monotone("build_pyramid", &raw)?;
    let pool = |t: &Tensor| {
        kernels::avg_pool2d(t, PYRAMID_POOL_KERNEL, PYRAMID_POOL_STRIDE, PYRAMID_POOL_PADDING)
    };
    Ok(FeaturePyramid { levels: [pool(h1)?, pool(h2)?, pool(h3)?] })
}

/// Frozen random-weight three-stage convolutional extractor.
///
/// Each stage is a padded 3x3 conv, a 2x2 average pool and a ReLU, so the
/// raw maps come out at 1/2, 1/4 and 1/8 of the image resolution.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    stages: Vec<(Tensor, Tensor)>,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let stages = TOY_CHANNELS
            .iter()
            .map(|&c_out| {
                let (w, _) = uniform_conv(&mut rng, c_out, c_in, 3);
                let fan_in = c_in * 9;
                let gain = 6.0f32.sqrt();
                // Zero-mean filters and no bias keep every channel centred
                // before the ReLU, so no channel is constantly zero.
                let mut data = w.into_data();
                for filter in data.chunks_mut(fan_in) {
                    let mean = filter.iter().sum::<f32>() / fan_in as f32;
                    filter.iter_mut().for_each(|v| *v = (*v - mean) * gain);
                }
                let w = Tensor::new(vec![c_out, c_in, 3, 3], data).expect("filter dims");
                c_in = c_out;
                (w, Tensor::zeros(&[c_out]))
            })
            .collect();
        ToyExtractor { stages }
    }

    /// Raw stage maps for an RGB image in `[0, 1]`.
    pub fn extract(&self, image: &Tensor) -> Result<[Tensor; 3]> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::shape("toy_extract", format!("expected 3 channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(
                "toy_extract",
                format!("image {h}x{w} must have sides divisible by 16"),
            ));
        }
        let mut x = Tensor::from_fn(image.dims(), |i| (image.data()[i] - 0.5) / 0.25);
        let mut out = Vec::with_capacity(3);
        for (wt, b) in &self.stages {
            let conv = kernels::conv2d(&x, wt, b, 1)?;
            x = kernels::relu(&kernels::avg_pool2d(&conv, 2, 2, 0)?);
            out.push(x.clone());
        }
        let [a, b, c] = <[Tensor; 3]>::try_from(out).expect("three stages");
        Ok([a, b, c])
    }
}

/// One-shot convenience over [`ToyExtractor`].
pub fn toy_extract(image: &Tensor, seed: u64) -> Result<[Tensor; 3]> {
    ToyExtractor::new(seed).extract(image)
}
