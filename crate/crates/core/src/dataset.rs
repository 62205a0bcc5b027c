use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::pyramid::{build_pyramid, FeaturePyramid, ToyExtractor};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

/// One sample; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub features: [String; 3],
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub extractor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor_seed: Option<u64>,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.into(), source: e })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.train.iter().find(|r| r.label == Label::Anomalous) {
            return Err(Error::Data(format!("train split contains anomalous sample {}", r.id)));
        }
        let mut ids: Vec<&str> = self.train.iter().chain(&self.test).map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate sample id {}", w[0])));
        }
        Ok(())
    }
}

pub fn load_pyramid(root: &Path, record: &SampleRecord) -> Result<FeaturePyramid> {
    let stages = record.features.iter().map(|f| read_tensor(root.join(f))).collect::<Result<Vec<_>>>()?;
    build_pyramid(&stages).map_err(|e| Error::Data(format!("sample {}: {e}", record.id)))
}

/// Ground-truth mask as a row-major boolean grid; absent masks are all false.
pub fn load_mask(root: &Path, record: &SampleRecord) -> Result<Vec<bool>> {
    let Some(rel) = &record.mask else {
        return Ok(vec![false; record.height * record.width]);
    };
    let r = Raster::read(root.join(rel))?;
    if r.channels != 1 || r.height != record.height || r.width != record.width {
        return Err(Error::Data(format!(
            "sample {}: mask is {}x{}x{}, image is {}x{}",
            record.id, r.channels, r.height, r.width, record.height, record.width
        )));
    }
    Ok(r.pixels.iter().map(|&p| p >= 128).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub train: usize,
    pub test: usize,
    pub anomalous_fraction: f64,
    pub min_defect_fraction: f64,
    pub max_defect_fraction: f64,
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            train: 200,
            test: 100,
            anomalous_fraction: 0.5,
            min_defect_fraction: 0.001,
            max_defect_fraction: 0.4,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 16
            && self.size.is_multiple_of(16)
            && self.train > 0
            && self.test > 0
            && (0.0..=1.0).contains(&self.anomalous_fraction)
            && self.min_defect_fraction > 0.0
            && self.min_defect_fraction <= self.max_defect_fraction
            && self.max_defect_fraction < 1.0
            && self.noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic dataset settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefectKind {
    Contrast,
    Occlusion,
    FrequencyShift,
}

#[derive(Debug, Clone)]
struct Wave {
    freq: f32,
    angle: f32,
    color: [f32; 3],
}

/// The normal appearance shared by every image of one dataset.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<Wave>,
    base: [f32; 3],
}

impl Texture {
    pub fn new(rng: &mut impl Rng) -> Self {
        let waves = (0..3)
            .map(|i| Wave {
                freq: rng.gen_range(0.08..0.2),
                angle: (i as f32 + rng.gen_range(-0.2..0.2)) * PI / 3.0,
                color: std::array::from_fn(|_| rng.gen_range(0.04..0.12)),
            })
            .collect();
        Texture { waves, base: std::array::from_fn(|_| rng.gen_range(0.35..0.65)) }
    }

    fn value(&self, phases: &[f32], freq_scale: f32, rotate: f32, y: f32, x: f32, ch: usize) -> f32 {
        self.waves.iter().zip(phases).fold(self.base[ch], |acc, (w, &p)| {
            let a = w.angle + rotate;
            let u = x * a.cos() + y * a.sin();
            acc + w.color[ch] * (2.0 * PI * w.freq * freq_scale * u + p).sin()
        })
    }
}

/// A synthetic sample before it is written to disk.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Tensor,
    pub mask: Option<Vec<bool>>,
    pub defect: Option<DefectKind>,
}

fn ellipse_mask(rng: &mut impl Rng, size: usize, area: f64) -> Vec<bool> {
    let ratio = rng.gen_range(0.5f64..2.0);
    let a = (area / std::f64::consts::PI * ratio).sqrt();
    let b = (area / std::f64::consts::PI / ratio).sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let cy = rng.gen_range(0.0..size as f64);
    let cx = rng.gen_range(0.0..size as f64);
    let (s, c) = theta.sin_cos();
    (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 + 0.5 - cy;
            let dx = (i % size) as f64 + 0.5 - cx;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
        .collect()
}

/// Draws a defect region whose area fraction lies in the configured range.
pub fn defect_mask(rng: &mut impl Rng, cfg: &SynthConfig) -> Vec<bool> {
    let n = (cfg.size * cfg.size) as f64;
    let (lo, hi) = (cfg.min_defect_fraction.sqrt(), cfg.max_defect_fraction.sqrt());
    loop {
        let target = rng.gen_range(lo..=hi).powi(2);
        let mask = ellipse_mask(rng, cfg.size, target * n);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n;
        if frac >= cfg.min_defect_fraction && frac <= cfg.max_defect_fraction {
            return mask;
        }
    }
}

pub fn synth_sample(texture: &Texture, cfg: &SynthConfig, anomalous: bool, rng: &mut impl Rng) -> SynthSample {
    let size = cfg.size;
    let phases: Vec<f32> = (0..texture.waves.len()).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let noise = Normal::new(0.0, cfg.noise.max(f32::MIN_POSITIVE)).expect("valid noise scale");
    let mut image = Tensor::from_fn(&[3, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        texture.value(&phases, 1.0, 0.0, y as f32, x as f32, ch)
    });
    if cfg.noise > 0.0 {
        for v in image.data_mut() {
            *v += noise.sample(rng);
        }
    }
    if !anomalous {
        clamp_unit(&mut image);
        return SynthSample { image, mask: None, defect: None };
    }
    let mask = defect_mask(rng, cfg);
    let kind = match rng.gen_range(0..3) {
        0 => DefectKind::Contrast,
        1 => DefectKind::Occlusion,
        _ => DefectKind::FrequencyShift,
    };
    let plane = size * size;
    match kind {
        DefectKind::Contrast => {
            let gain = if rng.gen_bool(0.5) { rng.gen_range(2.0..3.0) } else { rng.gen_range(0.0..0.3) };
            let shift: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
            for ch in 0..3 {
                for p in (0..plane).filter(|&p| mask[p]) {
                    let v = &mut image.data_mut()[ch * plane + p];
                    *v = texture.base[ch] + (*v - texture.base[ch]) * gain + shift[ch];
                }
            }
        }
        DefectKind::Occlusion => {
            let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            for ch in 0..3 {
                for p in (0..plane).filter(|&p| mask[p]) {
                    image.data_mut()[ch * plane + p] = color[ch] + noise.sample(rng);
                }
            }
        }
        DefectKind::FrequencyShift => {
            let scale = rng.gen_range(1.8..2.6);
            let rotate = rng.gen_range(0.3..0.8);
            for ch in 0..3 {
                for p in (0..plane).filter(|&p| mask[p]) {
                    let (y, x) = ((p / size) as f32, (p % size) as f32);
                    image.data_mut()[ch * plane + p] =
                        texture.value(&phases, scale, rotate, y, x, ch) + noise.sample(rng);
                }
            }
        }
    }
    clamp_unit(&mut image);
    SynthSample { image, mask: Some(mask), defect: Some(kind) }
}

fn clamp_unit(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn sample_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 32) | index as u64);
    rng
}

/// Generates every sample of both splits in memory. Pure in (cfg, seed).
pub fn synth_samples(cfg: &SynthConfig, seed: u64) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    cfg.validate()?;
    let texture = Texture::new(&mut sample_rng(seed, 0, 0));
    let train = (0..cfg.train).map(|i| synth_sample(&texture, cfg, false, &mut sample_rng(seed, 1, i))).collect();
    let n_bad = (cfg.test as f64 * cfg.anomalous_fraction).round() as usize;
    let test = (0..cfg.test)
        .map(|i| synth_sample(&texture, cfg, i < n_bad, &mut sample_rng(seed, 2, i)))
        .collect::<Vec<_>>();
    let mut order: Vec<usize> = (0..cfg.test).collect();
    let mut shuffle = sample_rng(seed, 3, 0);
    for i in (1..order.len()).rev() {
        order.swap(i, shuffle.gen_range(0..=i));
    }
    let test = order.into_iter().map(|i| test[i].clone()).collect();
    Ok((train, test))
}

/// Writes images, masks, toy-extractor stage maps and the manifest under `out`.
pub fn gen_synthetic_dataset(cfg: &SynthConfig, seed: u64, extractor_seed: u64, out: &Path) -> Result<DatasetManifest> {
    let (train, test) = synth_samples(cfg, seed)?;
    let extractor = ToyExtractor::new(extractor_seed);
    let mut manifest = DatasetManifest {
        extractor: "toy".into(),
        extractor_seed: Some(extractor_seed),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, samples) in [("train", &train), ("test", &test)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, s) in samples.iter().enumerate() {
            let id = format!("{split}_{i:04}");
            let rel = |suffix: &str| format!("{split}/{i:04}{suffix}");
            Raster::from_tensor(&s.image)?.write(out.join(rel(".ppm")))?;
            let stages = extractor.extract(&s.image)?;
            let features: [String; 3] = std::array::from_fn(|k| rel(&format!("_h{}.msft", k + 1)));
            for (t, f) in stages.iter().zip(&features) {
                write_tensor(out.join(f), t)?;
            }
            let mask = match &s.mask {
                Some(m) => {
                    let px = m.iter().map(|&b| if b { 255 } else { 0 }).collect();
                    Raster::new(cfg.size, cfg.size, 1, px)?.write(out.join(rel("_mask.pgm")))?;
                    Some(rel("_mask.pgm"))
                }
                None => None,
            };
            let record = SampleRecord {
                id,
                features,
                label: if s.mask.is_some() { Label::Anomalous } else { Label::Normal },
                mask,
                image: Some(rel(".ppm")),
                height: cfg.size,
                width: cfg.size,
            };
            if split == "train" {
                manifest.train.push(record);
            } else {
                manifest.test.push(record);
            }
        }
    }
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}
