//! Training loop, validation, checkpoint selection and seed sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crownseg_core::metrics::{evaluate, EvalImage, GroundTruth, IouThresholds, MetricsReport};
use crownseg_core::schedule::{LrSchedule, TrainConfig};
use crownseg_core::stats::{mean_se, MeanSe};
use crownseg_core::taxonomy::ClassWeights;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::optim::Optimizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub parts: BTreeMap<String, f64>,
}

/// One optimizer step per call over a mini-batch.
pub struct Trainer<'a> {
    model: &'a dyn Model,
    optimizer: Optimizer,
    schedule: LrSchedule,
    random_flip: bool,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a dyn Model, cfg: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let vars = model.params().vars().map(|(_, v)| v.clone()).collect();
        Ok(Self {
            model,
            optimizer: Optimizer::new(vars, cfg),
            schedule: cfg.schedule(steps_per_epoch),
            random_flip: cfg.random_flip,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
        })
    }

    pub fn set_clip_norm(&mut self, max: Option<f64>) {
        self.optimizer.clip_norm = max;
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Mean loss over the batch, backpropagated and applied.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Usage("empty training batch".into()));
        }
        let mut total = None;
        let mut parts: BTreeMap<String, f64> = BTreeMap::new();
        for s in batch {
            let flipped;
            let s = if self.random_flip {
                flipped = s.random_flip(&mut self.rng);
                &flipped
            } else {
                *s
            };
            let report = self.model.loss(s, &mut self.rng)?;
            for (k, v) in report.parts {
                *parts.entry(k).or_default() += v / batch.len() as f64;
            }
            total = Some(match total {
                Some(acc) => (acc + report.total)?,
                None => report.total,
            });
        }
        let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
        let lr = self.schedule.lr(self.step);
        let grads = loss.backward()?;
        self.optimizer.step(&grads, lr)?;
        let rec = StepRecord {
            step: self.step,
            epoch: self.step / self.schedule.steps_per_epoch,
            lr,
            loss: crate::nn::scalar(&loss)?,
            parts,
        };
        self.step += 1;
        Ok(rec)
    }
}

/// Predict every sample and pair the detections with its ground truth.
pub fn eval_images(model: &dyn Model, samples: &[Sample]) -> Result<Vec<EvalImage>> {
    samples
        .iter()
        .map(|s| {
            Ok(EvalImage {
                ground_truth: ground_truth(s),
                detections: model.predict(s)?,
            })
        })
        .collect()
}

pub fn ground_truth(s: &Sample) -> Vec<GroundTruth> {
    s.instances
        .iter()
        .map(|i| GroundTruth {
            class_id: i.class_id,
            bbox: i.bbox,
            mask: Some(i.mask.clone()),
        })
        .collect()
}

pub fn validate(
    model: &dyn Model,
    samples: &[Sample],
    class_names: &[String],
    weights: Option<&ClassWeights>,
    thresholds: IouThresholds,
) -> Result<MetricsReport> {
    let images = eval_images(model, samples)?;
    Ok(evaluate(&images, class_names, weights, thresholds)?)
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Checkpoints, the step log and the config sidecar go here when set.
    pub out_dir: Option<PathBuf>,
    pub class_names: Vec<String>,
    pub weights: Option<ClassWeights>,
    pub thresholds: IouThresholds,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation mAP, earliest on ties.
    pub best_epoch: Option<usize>,
    pub best_map: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_SIDECAR: &str = "train_config.json";

/// Train for `cfg.max_epochs` epochs over `train`, shuffled each epoch, and keep the
/// parameters of the best validation epoch.
pub fn fit(
    model: &dyn Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    let batch = cfg.batch_size.min(train.len()).max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let mut trainer = Trainer::new(model, cfg, steps_per_epoch)?;
    trainer.set_clip_norm(opts.clip_norm);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_sidecar(&dir.join(CONFIG_SIDECAR), cfg)?;
            let p = dir.join(LOG_FILE);
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut report = FitReport {
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        best_map: None,
        best_checkpoint: None,
    };
    let mut best_params = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(trainer.rng());
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let rec = trainer.step(&refs)?;
            sum += rec.loss;
            if let Some((f, p)) = &mut log {
                let line = serde_json::to_string(&rec).map_err(|e| Error::format(&*p, e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
            }
            report.steps.push(rec);
        }
        let do_eval = opts.eval_every > 0 && !val.is_empty() && ((epoch + 1) % opts.eval_every == 0 || epoch + 1 == cfg.max_epochs);
        let val_report = if do_eval {
            Some(validate(model, val, &opts.class_names, opts.weights.as_ref(), opts.thresholds)?)
        } else {
            None
        };
        if let Some(m) = val_report.as_ref().map(|r| r.map) {
            if report.best_map.is_none_or(|b| m > b) {
                report.best_map = Some(m);
                report.best_epoch = Some(epoch);
                best_params = Some(snapshot(model)?);
                if let Some(dir) = &opts.out_dir {
                    let p = dir.join(BEST_CHECKPOINT);
                    model.params().save(&p)?;
                    report.best_checkpoint = Some(p);
                }
            }
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: sum / steps_per_epoch as f64,
            val: val_report,
        };
        if let Some((f, p)) = &mut log {
            let line = serde_json::to_string(&rec).map_err(|e| Error::format(&*p, e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        report.epochs.push(rec);
    }
    if let Some(dir) = &opts.out_dir {
        model.params().save(&dir.join(LAST_CHECKPOINT))?;
    }
    if let Some(snap) = best_params {
        restore(model, snap)?;
    }
    Ok(report)
}

fn snapshot(model: &dyn Model) -> Result<Vec<candle_core::Tensor>> {
    model
        .params()
        .vars()
        .map(|(_, v)| Ok(v.as_tensor().copy()?))
        .collect()
}

fn restore(model: &dyn Model, snap: Vec<candle_core::Tensor>) -> Result<()> {
    for ((_, v), t) in model.params().vars().zip(snap) {
        v.set(&t)?;
    }
    Ok(())
}

/// The resolved training config written next to checkpoints.
pub fn write_sidecar(path: &Path, cfg: &TrainConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub maps: Vec<Option<f64>>,
    pub summary: Option<MeanSe>,
}

/// Run `run` once per seed and summarize the resulting test mAPs. Seeds whose mAP is
/// undefined are reported but left out of the summary.
pub fn seed_sweep(seeds: &[u64], mut run: impl FnMut(u64) -> Result<Option<f64>>) -> Result<SweepReport> {
    let maps = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = maps.iter().flatten().copied().collect();
    Ok(SweepReport {
        seeds: seeds.to_vec(),
        maps,
        summary: mean_se(&defined),
    })
}
