//! Run configuration: a flat INI file with one section per stage.
//! Precedence is defaults < file < `MSFLOW_<SECTION>_<KEY>` environment < flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::coupling::DEFAULT_CLAMP;
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_FPR_LIMIT, DEFAULT_PRO_THRESHOLDS};
use crate::model::ModelConfig;
use crate::pyramid::FeaturePyramid;
use crate::scoring::{Aggregation, DEFAULT_K_FRACTION};
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "MSFLOW_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Toy,
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,

    pub source: FeatureSource,
    /// Dataset directory holding `manifest.json`; defaults to `<out>/dataset`.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub extractor_seed: u64,

    pub blocks: [usize; 3],
    pub clamp: f32,
    pub pos_channels: usize,
    pub fusion: bool,
    pub fusion_size: Option<usize>,

    pub train: TrainConfig,
    pub checkpoint_every: usize,

    pub k_fraction: f64,
    pub agg: Aggregation,
    pub heatmaps: bool,

    pub fpr_limit: f64,
    pub pro_thresholds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            out: PathBuf::from("run"),
            source: FeatureSource::Toy,
            dataset: None,
            synth: SynthConfig::default(),
            extractor_seed: 7,
            blocks: [2, 5, 8],
            clamp: DEFAULT_CLAMP,
            pos_channels: 64,
            fusion: true,
            fusion_size: None,
            train: TrainConfig { epochs: 30, ..TrainConfig::default() },
            checkpoint_every: 0,
            k_fraction: DEFAULT_K_FRACTION,
            agg: Aggregation::Both,
            heatmaps: false,
            fpr_limit: DEFAULT_FPR_LIMIT,
            pro_thresholds: DEFAULT_PRO_THRESHOLDS,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.key`; unknown keys are rejected.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        match (section, key) {
            ("run", "seed") => self.seed = parse(k, value)?,
            ("run", "jobs") => self.jobs = parse(k, value)?,
            ("run", "out") => self.out = PathBuf::from(value),
            ("dataset", "source") => {
                self.source = match value {
                    "toy" => FeatureSource::Toy,
                    "imported" => FeatureSource::Imported,
                    _ => return Err(Error::Config(format!("{k}: expected toy or imported, got {value:?}"))),
                }
            }
            ("dataset", "path") => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            ("dataset", "size") => self.synth.size = parse(k, value)?,
            ("dataset", "train") => self.synth.train = parse(k, value)?,
            ("dataset", "test") => self.synth.test = parse(k, value)?,
            ("dataset", "anomalous_fraction") => self.synth.anomalous_fraction = parse(k, value)?,
            ("dataset", "min_defect_fraction") => self.synth.min_defect_fraction = parse(k, value)?,
            ("dataset", "max_defect_fraction") => self.synth.max_defect_fraction = parse(k, value)?,
            ("dataset", "noise") => self.synth.noise = parse(k, value)?,
            ("dataset", "extractor_seed") => self.extractor_seed = parse(k, value)?,
            ("model", "blocks") => {
                let v: Vec<usize> = parse_list(k, value)?;
                self.blocks = v.try_into().map_err(|_| Error::Config(format!("{k}: expected three counts")))?;
            }
            ("model", "clamp") => self.clamp = parse(k, value)?,
            ("model", "pos_channels") => self.pos_channels = parse(k, value)?,
            ("model", "fusion") => self.fusion = parse_bool(k, value)?,
            ("model", "fusion_size") => {
                self.fusion_size = match value {
                    "smallest" | "" => None,
                    v => Some(parse(k, v)?),
                }
            }
            ("train", "epochs") => self.train.epochs = parse(k, value)?,
            ("train", "batch_size") => self.train.batch_size = parse(k, value)?,
            ("train", "lr") => self.train.lr = parse(k, value)?,
            ("train", "lr_drop_factor") => self.train.lr_drop_factor = parse(k, value)?,
            ("train", "lr_drop_points") => self.train.lr_drop_points = parse_list(k, value)?,
            ("train", "clip_norm") => {
                self.train.clip_norm = match value {
                    "off" | "none" => None,
                    v => Some(parse(k, v)?),
                }
            }
            ("train", "checkpoint_every") => self.checkpoint_every = parse(k, value)?,
            ("score", "k_fraction") => self.k_fraction = parse(k, value)?,
            ("score", "agg") => {
                self.agg = Aggregation::parse(value)
                    .ok_or_else(|| Error::Config(format!("{k}: expected add, mul or both, got {value:?}")))?
            }
            ("score", "heatmaps") => self.heatmaps = parse_bool(k, value)?,
            ("eval", "fpr_limit") => self.fpr_limit = parse(k, value)?,
            ("eval", "pro_thresholds") => self.pro_thresholds = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    pub fn apply_ini(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: key outside of a section", n + 1)));
            }
            self.set(&section, key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_ini(&text, &path.display().to_string())
    }

    /// Applies `MSFLOW_<SECTION>_<KEY>=value` pairs.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut pairs: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        pairs.sort();
        for (name, value) in pairs {
            let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
            let (section, key) = rest
                .split_once('_')
                .ok_or_else(|| Error::Config(format!("{name}: expected {ENV_PREFIX}<SECTION>_<KEY>")))?;
            self.set(section, key, &value).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::Config(format!("score.k_fraction must be in (0, 1], got {}", self.k_fraction)));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::Config(format!("eval.fpr_limit must be in (0, 1], got {}", self.fpr_limit)));
        }
        if self.pro_thresholds < 2 {
            return Err(Error::Config("eval.pro_thresholds must be at least 2".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::Config(format!("model.clamp must be positive, got {}", self.clamp)));
        }
        if !self.pos_channels.is_multiple_of(4) {
            return Err(Error::Config(format!("model.pos_channels must be a multiple of 4, got {}", self.pos_channels)));
        }
        if self.source == FeatureSource::Imported && self.dataset.is_none() {
            return Err(Error::Config("dataset.source = imported requires dataset.path".into()));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    pub fn model_config(&self, pyramid: &FeaturePyramid) -> ModelConfig {
        let mut m = ModelConfig::for_pyramid(pyramid);
        m.blocks = self.blocks;
        m.clamp = self.clamp;
        m.pos_channels = self.pos_channels;
        m.fusion = self.fusion;
        m.fusion_size = self.fusion_size;
        m.seed = self.seed;
        m
    }

    /// Every key with its resolved value, parseable by [`RunConfig::apply_ini`].
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = write!(
            s,
            "[run]\nseed = {}\njobs = {}\nout = {}\n\n\
             [dataset]\nsource = {}\npath = {}\nsize = {}\ntrain = {}\ntest = {}\nanomalous_fraction = {}\n\
             min_defect_fraction = {}\nmax_defect_fraction = {}\nnoise = {}\nextractor_seed = {}\n\n\
             [model]\nblocks = {}\nclamp = {}\npos_channels = {}\nfusion = {}\nfusion_size = {}\n\n\
             [train]\nepochs = {}\nbatch_size = {}\nlr = {}\nlr_drop_factor = {}\nlr_drop_points = {}\n\
             clip_norm = {}\ncheckpoint_every = {}\n\n\
             [score]\nk_fraction = {}\nagg = {}\nheatmaps = {}\n\n\
             [eval]\nfpr_limit = {}\npro_thresholds = {}\n",
            self.seed,
            self.jobs,
            self.out.display(),
            match self.source {
                FeatureSource::Toy => "toy",
                FeatureSource::Imported => "imported",
            },
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.synth.size,
            self.synth.train,
            self.synth.test,
            self.synth.anomalous_fraction,
            self.synth.min_defect_fraction,
            self.synth.max_defect_fraction,
            self.synth.noise,
            self.extractor_seed,
            fmt_list(&self.blocks),
            self.clamp,
            self.pos_channels,
            self.fusion,
            self.fusion_size.map(|v| v.to_string()).unwrap_or_else(|| "smallest".into()),
            t.epochs,
            t.batch_size,
            t.lr,
            t.lr_drop_factor,
            fmt_list(&t.lr_drop_points),
            t.clip_norm.map(|v| v.to_string()).unwrap_or_else(|| "off".into()),
            self.checkpoint_every,
            self.k_fraction,
            self.agg.as_str(),
            self.heatmaps,
            self.fpr_limit,
            self.pro_thresholds,
        );
        s
    }
}
