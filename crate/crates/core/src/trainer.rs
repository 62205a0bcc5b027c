use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::coupling::FlowChain;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::MsFlowModel;
use crate::params::{self, Params};
use crate::par;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_points: Vec<f64>,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-4,
            lr_drop_factor: 3.0,
            lr_drop_points: vec![0.7, 0.9],
            seed: 0,
            clip_norm: Some(10.0),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return bad(format!("lr_drop_factor must be >= 1, got {}", self.lr_drop_factor));
        }
        if self.lr_drop_points.iter().any(|&p| !(p > 0.0 && p < 1.0))
            || self.lr_drop_points.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("lr_drop_points must be strictly increasing in (0, 1): {:?}", self.lr_drop_points));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Learning rate for optimizer step `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let progress = step as f64 / total_steps.max(1) as f64;
    let drops = cfg.lr_drop_points.iter().filter(|&&p| progress >= p).count();
    cfg.lr / cfg.lr_drop_factor.powi(drops as i32)
}

/// `(sum |z|^2 / 2 - logdet) / n`.
pub fn nll_loss(latents: &[Tensor], total_logdet: f64, n_elements: usize) -> Result<f64> {
    if n_elements == 0 {
        return Err(Error::invalid("nll_loss", "n_elements is 0"));
    }
    let sq: f64 = latents.iter().map(Tensor::sum_squares).sum();
    let loss = (sq / 2.0 - total_logdet) / n_elements as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "nll_loss".into() });
    }
    Ok(loss)
}

/// Unnormalized per-sample objective pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub half_sq: f64,
    pub logdet: f64,
    pub elements: usize,
}

impl Objective {
    pub fn nll(&self) -> f64 {
        self.half_sq - self.logdet
    }
}

/// A flow that can be trained by maximum likelihood on samples of one type.
pub trait TrainableFlow: Params + Clone + Send + Sync {
    type Sample: Sync;

    fn zero_grads(&self) -> Self;

    fn sample_elements(sample: &Self::Sample) -> usize;

    fn objective(&self, sample: &Self::Sample) -> Result<Objective>;

    /// Adds the gradient of `weight * (|z|^2/2 - logdet)` to `grads`.
    fn accumulate_gradient(&self, sample: &Self::Sample, weight: f32, grads: &mut Self) -> Result<Objective>;
}

impl TrainableFlow for MsFlowModel {
    type Sample = FeaturePyramid;

    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }

    fn sample_elements(sample: &FeaturePyramid) -> usize {
        sample.num_elements()
    }

    fn objective(&self, sample: &FeaturePyramid) -> Result<Objective> {
        let e = self.encode(sample)?;
        let half_sq = e.latents.iter().map(Tensor::sum_squares).sum::<f64>() / 2.0;
        Ok(Objective { half_sq, logdet: e.total_logdet(), elements: sample.num_elements() })
    }

    fn accumulate_gradient(&self, sample: &FeaturePyramid, weight: f32, grads: &mut Self) -> Result<Objective> {
        let (e, cache) = self.encode_cached(sample)?;
        let grad_latents: [Tensor; 3] = std::array::from_fn(|i| {
            let z = &e.latents[i];
            Tensor::from_fn(z.dims(), |j| z.data()[j] * weight)
        });
        self.backward(&cache, &grad_latents, -weight, grads)?;
        let half_sq = e.latents.iter().map(Tensor::sum_squares).sum::<f64>() / 2.0;
        Ok(Objective { half_sq, logdet: e.total_logdet(), elements: sample.num_elements() })
    }
}

impl TrainableFlow for FlowChain {
    type Sample = Tensor;

    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }

    fn sample_elements(sample: &Tensor) -> usize {
        sample.len()
    }

    fn objective(&self, sample: &Tensor) -> Result<Objective> {
        let (z, logdet) = self.encode(sample)?;
        Ok(Objective { half_sq: z.sum_squares() / 2.0, logdet, elements: sample.len() })
    }

    fn accumulate_gradient(&self, sample: &Tensor, weight: f32, grads: &mut Self) -> Result<Objective> {
        let (z, logdet, cache) = self.encode_cached(sample)?;
        let gz = Tensor::from_fn(z.dims(), |j| z.data()[j] * weight);
        self.backward(&cache, &gz, -weight, grads)?;
        Ok(Objective { half_sq: z.sum_squares() / 2.0, logdet, elements: sample.len() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr,seconds,checksum\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{:.8},{:.6e},{:.3},{}\n", r.epoch, r.loss, r.lr, r.seconds, r.checksum));
        }
        out
    }
}

/// One labelled training sample.
#[derive(Debug, Clone)]
pub struct TrainItem<S> {
    pub id: String,
    pub label: Label,
    pub sample: S,
}

impl<S> TrainItem<S> {
    pub fn normal(id: impl Into<String>, sample: S) -> Self {
        TrainItem { id: id.into(), label: Label::Normal, sample }
    }
}

/// Mean per-element NLL over `samples`, computed in parallel.
pub fn mean_loss<F: TrainableFlow>(model: &F, samples: &[&F::Sample]) -> Result<f64> {
    let objs = par::map(samples, |_, s| model.objective(s)).into_iter().collect::<Result<Vec<_>>>()?;
    let nll: f64 = objs.iter().map(Objective::nll).sum();
    let n: usize = objs.iter().map(|o| o.elements).sum();
    let loss = nll / n.max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "mean_loss".into() });
    }
    Ok(loss)
}

/// Progress notifications; returning an error aborts training.
pub enum TrainEvent<'a, F> {
    EpochEnd { record: &'a EpochRecord, model: &'a F },
    Diverged { epoch: usize, step: usize, loss: f64, model: &'a F },
}

pub fn train<F: TrainableFlow>(model: &mut F, data: &[TrainItem<F::Sample>], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, data, cfg, &mut |_| Ok(()))
}

pub fn train_with<F: TrainableFlow>(
    model: &mut F,
    data: &[TrainItem<F::Sample>],
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_, F>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if let Some(bad) = data.iter().find(|d| d.label != Label::Normal) {
        return Err(Error::Data(format!("training sample {} is labelled anomalous", bad.id)));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let steps_per_epoch = cfg.steps_per_epoch(data.len());
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut states: Vec<AdamState> = params::tensors(model).iter().map(|t| AdamState::new(t.len())).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut epoch_nll, mut epoch_elems) = (0.0f64, 0usize);
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            let elements: usize = batch.iter().map(|&i| F::sample_elements(&data[i].sample)).sum();
            let weight = 1.0 / elements as f32;
            let snapshot: &F = model;
            let results = par::map(batch, |_, &i| {
                let mut g = snapshot.zero_grads();
                let obj = snapshot.accumulate_gradient(&data[i].sample, weight, &mut g)?;
                Ok::<_, Error>((g, obj))
            });
            let mut grads: Option<F> = None;
            let mut batch_nll = 0.0;
            for r in results {
                let (g, obj) = match r {
                    Err(Error::NonFinite { .. }) => {
                        on_event(TrainEvent::Diverged { epoch, step, loss: f64::NAN, model })?;
                        return Err(Error::Diverged { epoch, step, loss: f64::NAN });
                    }
                    r => r?,
                };
                batch_nll += obj.nll();
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => params::accumulate(acc, &g)?,
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let loss = batch_nll / elements as f64;
            if !loss.is_finite() || !params::all_finite(&grads) {
                on_event(TrainEvent::Diverged { epoch, step, loss, model })?;
                return Err(Error::Diverged { epoch, step, loss });
            }
            if let Some(max) = cfg.clip_norm {
                let norm = params::global_norm(&grads);
                if norm > max {
                    params::scale(&mut grads, (max / norm) as f32);
                }
            }
            lr = lr_at(step, total_steps, cfg);
            log.lr_trace.push(lr);
            let g = params::tensors(&grads);
            for ((p, g), st) in params::tensors_mut(model).into_iter().zip(g).zip(states.iter_mut()) {
                adam_step(p, g, st, lr as f32, cfg.adam)?;
            }
            epoch_nll += batch_nll;
            epoch_elems += elements;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: epoch_nll / epoch_elems as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            checksum: params::checksum(model),
        };
        on_event(TrainEvent::EpochEnd { record: &record, model })?;
        log.epochs.push(record);
    }
    Ok(log)
}
