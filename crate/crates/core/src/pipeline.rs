//! The `gen`, `train`, `score`, `eval` and `check` stages over a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{FeatureSource, RunConfig};
use crate::dataset::{gen_synthetic_dataset, load_mask, load_pyramid, DatasetManifest, Label, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, ImageResult, PixelData};
use crate::model::MsFlowModel;
use crate::par;
use crate::pyramid::FeaturePyramid;
use crate::scoring::{score_latents, write_heatmap, Aggregation};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};
use crate::trainer::{train_with, TrainEvent, TrainItem, TrainLog};

pub const SCORES_DIR: &str = "scores";
pub const SCORES_CSV: &str = "scores.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CHECK_TOLERANCE: f32 = 1e-3;

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: p.into(), source: e })?;
    write_text(p, &(text + "\n"))
}

/// Validates the config, creates the output dir and writes `<stage>.resolved.ini`.
fn prepare(cfg: &RunConfig, stage: &str) -> Result<()> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join(format!("{stage}.resolved.ini")), &cfg.to_ini())
}

fn load_manifest(cfg: &RunConfig) -> Result<(DatasetManifest, PathBuf)> {
    let root = cfg.dataset_dir();
    let manifest = DatasetManifest::load(root.join(MANIFEST_FILE))?;
    Ok((manifest, root))
}

fn checkpoint_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(CHECKPOINT_DIR))
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<DatasetManifest> {
    prepare(cfg, "gen")?;
    if cfg.source != FeatureSource::Toy {
        return Err(Error::Config("gen only produces toy-extractor datasets (dataset.source = toy)".into()));
    }
    let dir = cfg.out.join("dataset");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    gen_synthetic_dataset(&cfg.synth, cfg.seed, cfg.extractor_seed, &dir)
}

pub fn load_train_set(cfg: &RunConfig) -> Result<Vec<TrainItem<FeaturePyramid>>> {
    let (manifest, root) = load_manifest(cfg)?;
    let pyramids = par::map(&manifest.train, |_, r| load_pyramid(&root, r));
    manifest
        .train
        .iter()
        .zip(pyramids)
        .map(|(r, p)| Ok(TrainItem { id: r.id.clone(), label: r.label, sample: p? }))
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(MsFlowModel, TrainLog)> {
    prepare(cfg, "train")?;
    let data = load_train_set(cfg)?;
    let first = data.first().ok_or_else(|| Error::Data("training split is empty".into()))?;
    let mut model = MsFlowModel::new(cfg.model_config(&first.sample))?;
    let out = cfg.out.clone();
    let every = cfg.checkpoint_every;
    let log = train_with(&mut model, &data, &cfg.train, &mut |event| match event {
        TrainEvent::EpochEnd { record, model } => {
            println!("epoch {} loss {:.6} lr {:.3e} {:.2}s", record.epoch, record.loss, record.lr, record.seconds);
            if every > 0 && (record.epoch + 1) % every == 0 {
                save_checkpoint(model, &out.join("checkpoints").join(format!("epoch_{:04}", record.epoch + 1)))?;
            }
            Ok(())
        }
        TrainEvent::Diverged { epoch, step, loss, model } => {
            let dir = out.join("diverged");
            eprintln!("non-finite loss {loss} at epoch {epoch} step {step}; snapshot in {}", dir.display());
            save_checkpoint(model, &dir).map(|_| ())
        }
    })?;
    save_checkpoint(&model, &cfg.out.join(CHECKPOINT_DIR))?;
    write_text(&cfg.out.join(TRAIN_LOG), &log.to_csv())?;
    Ok((model, log))
}

/// Per-image detection scores as written to `scores.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: Label,
    pub s_det_mul: f64,
    pub s_det_add: f64,
}

impl ScoreRow {
    pub fn score(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Add => self.s_det_add,
            Aggregation::Mul | Aggregation::Both => self.s_det_mul,
        }
    }
}

fn map_file(id: &str, kind: &str) -> String {
    format!("maps/{id}_{kind}.msft")
}

pub fn cmd_score(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<ScoreRow>> {
    prepare(cfg, "score")?;
    let model = load_checkpoint(&checkpoint_dir(cfg, checkpoint))?;
    let (manifest, root) = load_manifest(cfg)?;
    let dir = cfg.out.join(SCORES_DIR);
    create_dir(&dir.join("maps"))?;
    if cfg.heatmaps {
        create_dir(&dir.join("heatmaps"))?;
    }
    let results = par::map(&manifest.test, |_, r| -> Result<ScoreRow> {
        let pyramid = load_pyramid(&root, r)?;
        let latents = model.encode(&pyramid)?.latents;
        let maps = score_latents(&latents, r.height, r.width, cfg.k_fraction)?;
        write_tensor(dir.join(map_file(&r.id, "sloc")), &maps.s_loc)?;
        write_tensor(dir.join(map_file(&r.id, "smul")), &maps.s_mul)?;
        if cfg.heatmaps {
            let stem = dir.join("heatmaps").join(&r.id);
            write_heatmap(maps.localization_map(cfg.agg), &stem.with_extension("pgm"), &stem.with_extension("json"))?;
        }
        Ok(ScoreRow { id: r.id.clone(), label: r.label, s_det_mul: maps.s_det, s_det_add: maps.s_det_add })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("id,label,s_det_mul,s_det_add\n");
    for r in &rows {
        let label = if r.label == Label::Anomalous { "anomalous" } else { "normal" };
        csv.push_str(&format!("{},{label},{:e},{:e}\n", r.id, r.s_det_mul, r.s_det_add));
    }
    write_text(&dir.join(SCORES_CSV), &csv)?;
    Ok(rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,label,s_det_mul,s_det_add") {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Data(format!("{}:{}: malformed row {line:?}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            let [id, label, mul, add] = f.as_slice() else { return Err(bad()) };
            let label = match *label {
                "normal" => Label::Normal,
                "anomalous" => Label::Anomalous,
                _ => return Err(bad()),
            };
            Ok(ScoreRow {
                id: id.to_string(),
                label,
                s_det_mul: mul.parse().map_err(|_| bad())?,
                s_det_add: add.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    prepare(cfg, "eval")?;
    let (manifest, root) = load_manifest(cfg)?;
    let dir = cfg.out.join(SCORES_DIR);
    let rows = read_scores(&dir.join(SCORES_CSV))?;
    let by_id: BTreeMap<&str, &ScoreRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let expected: BTreeMap<&str, _> = manifest.test.iter().map(|r| (r.id.as_str(), r)).collect();
    let missing: Vec<&str> = expected.keys().filter(|id| !by_id.contains_key(*id)).copied().collect();
    let extra: Vec<&str> = by_id.keys().filter(|id| !expected.contains_key(*id)).copied().collect();
    if !missing.is_empty() || !extra.is_empty() || rows.len() != manifest.test.len() {
        return Err(Error::Data(format!(
            "{} score rows for {} test records; missing ids {missing:?}; unexpected ids {extra:?}",
            rows.len(),
            manifest.test.len()
        )));
    }
    let kind = match cfg.agg {
        Aggregation::Mul => "smul",
        Aggregation::Add | Aggregation::Both => "sloc",
    };
    let loaded = par::map(&manifest.test, |_, r| -> Result<(Tensor, Vec<bool>)> {
        let map = read_tensor(dir.join(map_file(&r.id, kind)))?;
        if map.dims() != [r.height, r.width] {
            return Err(Error::Data(format!("{}: map dims {:?} differ from image dims", r.id, map.dims())));
        }
        Ok((map, load_mask(&root, r)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let images: Vec<ImageResult> = manifest
        .test
        .iter()
        .map(|r| ImageResult {
            id: r.id.clone(),
            anomalous: r.label == Label::Anomalous,
            score: by_id[r.id.as_str()].score(cfg.agg),
        })
        .collect();
    let pixels: Vec<PixelData> = manifest
        .test
        .iter()
        .zip(&loaded)
        .map(|(r, (map, mask))| PixelData { scores: map.data(), mask, height: r.height, width: r.width })
        .collect();
    let report = evaluate(cfg.agg.as_str(), &images, &pixels, cfg.fpr_limit, cfg.pro_thresholds)?;
    write_text(&cfg.out.join(REPORT_CSV), &report.to_csv())?;
    write_json(&cfg.out.join(REPORT_JSON), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub samples: usize,
    pub max_abs_error: f32,
    pub max_logdet_error: f64,
    pub tolerance: f32,
    pub passed: bool,
}

/// Invertibility audit: decode(encode(x)) for random pyramids and
/// encode(decode(z)) for base-distribution draws.
pub fn roundtrip_audit(model: &MsFlowModel, samples: usize, seed: u64) -> Result<CheckReport> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> [Tensor; 3] {
        std::array::from_fn(|i| {
            let [h, w] = cfg.sizes[i];
            Tensor::from_fn(&[cfg.channels[i], h, w], |_| StandardNormal.sample(&mut rng))
        })
    };
    let draws: Vec<[Tensor; 3]> = (0..2 * samples).map(|_| draw()).collect();
    let results = par::map(&draws, |i, levels| -> Result<(f32, f64)> {
        if i % 2 == 0 {
            let x = FeaturePyramid { levels: levels.clone() };
            let e = model.encode(&x)?;
            let (back, ld) = model.decode(&e.latents)?;
            let err = back.levels.iter().zip(&x.levels).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f32::max);
            Ok((err, (e.total_logdet() + ld).abs()))
        } else {
            let (x, ld) = model.decode(levels)?;
            let e = model.encode(&x)?;
            let err = e.latents.iter().zip(levels).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f32::max);
            Ok((err, (e.total_logdet() + ld).abs()))
        }
    });
    let (mut max_abs_error, mut max_logdet_error) = (0.0f32, 0.0f64);
    for r in results {
        let (e, l) = r?;
        if !e.is_finite() || !l.is_finite() {
            return Err(Error::NonFinite { op: "roundtrip_audit".into() });
        }
        max_abs_error = max_abs_error.max(e);
        max_logdet_error = max_logdet_error.max(l);
    }
    let passed = max_abs_error < CHECK_TOLERANCE;
    Ok(CheckReport { samples: 2 * samples, max_abs_error, max_logdet_error, tolerance: CHECK_TOLERANCE, passed })
}

pub fn cmd_check(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<CheckReport> {
    prepare(cfg, "check")?;
    let model = load_checkpoint(&checkpoint_dir(cfg, checkpoint))?;
    let report = roundtrip_audit(&model, 4, cfg.seed)?;
    write_json(&cfg.out.join("check.json"), &report)?;
    Ok(report)
}
