//! Target construction, optimization, training loop, and checkpoints.

mod checkpoint;
mod config;
mod model;
mod optim;
mod targets;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{HeadKind, TrainConfig};
pub use model::{FrameOutput, Head, Model};
pub use optim::{clip_global_norm, cosine_lr, AdamConfig, AdamW};
pub use targets::{build_targets, frame_activity};

use crate::autodiff::ParamGrads;
use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::formats::{read_annotations, read_features};
use crate::metrics::{evaluate, EvalSettings, EvaluationReport, TimedEvent};
use crate::postprocess::threshold_grid;
use crate::semicrf::EventSet;
use crate::synth::HOP;
use crate::tensor::Tensor;

/// One sequence ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    /// Features pooled to the label resolution.
    pub x: Tensor,
    pub target: EventSet,
    pub events: Vec<TimedEvent>,
    /// Duration of the original 10 ms feature sequence, seconds.
    pub duration: f64,
}

impl Example {
    pub fn new(cfg: &TrainConfig, id: String, features: &Tensor, events: Vec<TimedEvent>) -> Result<Self> {
        let model_input = crate::ssm::downsample(features, cfg.downsample_factor()?)?;
        let frames = model_input.shape()[0];
        let target = build_targets(&events, &cfg.classes, cfg.resolution, frames)?;
        Ok(Example {
            id,
            x: model_input,
            target,
            events,
            duration: features.shape()[0] as f64 * HOP,
        })
    }
}

/// Sorted `(features, annotations)` path pairs under `dir`.
pub fn list_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::from(e).at_path(dir))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::from(e).at_path(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("fseq") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let csv = path.with_extension("csv");
            out.push((stem, path, csv));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every `<id>.fseq` with its `<id>.csv` from `dir`.
pub fn load_split(cfg: &TrainConfig, dir: &Path) -> Result<Vec<Example>> {
    let pairs = list_pairs(dir)?;
    if pairs.is_empty() {
        return Err(Error::Format {
            offset: 0,
            message: "no .fseq files found".into(),
        }
        .at_path(dir));
    }
    pairs
        .into_iter()
        .map(|(id, fseq, csv)| {
            let features = read_features(&fseq)?;
            let events = read_annotations(&csv)?;
            Example::new(cfg, id, &features, events).map_err(|e| e.at_path(&csv))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_event_f1: f64,
    pub val_segment_f1: f64,
    pub threshold: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let tau = self.threshold.map_or(String::new(), |t| format!(" threshold={t:.2}"));
        format!(
            "epoch={} loss={:.6} lr={:.3e} val_event_f1={:.4} val_segment_f1={:.4}{tau}",
            self.epoch, self.loss, self.lr, self.val_event_f1, self.val_segment_f1
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Chosen on validation data for the framewise head.
    pub threshold: Option<f64>,
}

/// Model outputs for a batch of examples, in order.
pub fn infer_all(model: &Model, examples: &[Example]) -> Result<Vec<FrameOutput>> {
    examples.par_iter().map(|ex| model.infer(&ex.x)).collect()
}

/// Summed metrics over examples given precomputed outputs.
pub fn score_outputs(
    model: &Model,
    examples: &[Example],
    outputs: &[FrameOutput],
    threshold: Option<f64>,
) -> Result<EvaluationReport> {
    let settings = eval_settings(&model.config);
    let mut total = EvaluationReport::default();
    for (ex, out) in examples.iter().zip(outputs) {
        let pred = model.events(out, threshold)?;
        total.merge(&evaluate(&ex.events, &pred, ex.duration, &settings, &model.config.classes)?);
    }
    Ok(total)
}

pub fn eval_settings(cfg: &TrainConfig) -> EvalSettings {
    EvalSettings {
        collar: cfg.collar,
        segment_len: cfg.segment_len,
    }
}

/// Metrics at every threshold of the default grid.
pub fn sweep_thresholds(
    model: &Model,
    examples: &[Example],
    outputs: &[FrameOutput],
) -> Result<Vec<(f64, EvaluationReport)>> {
    threshold_grid()
        .into_iter()
        .map(|t| Ok((t, score_outputs(model, examples, outputs, Some(t))?)))
        .collect()
}

/// Validation metrics; for the framewise head, at the threshold with the
/// best micro event F1 (lowest threshold on ties).
pub fn validate(model: &Model, examples: &[Example]) -> Result<(EvaluationReport, Option<f64>)> {
    let outputs = infer_all(model, examples)?;
    match model.config.head {
        HeadKind::SemiCrf => Ok((score_outputs(model, examples, &outputs, None)?, None)),
        HeadKind::Framewise => {
            let mut best: Option<(f64, EvaluationReport)> = None;
            for (t, rep) in sweep_thresholds(model, examples, &outputs)? {
                if best.as_ref().is_none_or(|(_, b)| rep.event.micro().f1() > b.event.micro().f1()) {
                    best = Some((t, rep));
                }
            }
            let (t, rep) = best.expect("threshold grid is non-empty");
            Ok((rep, Some(t)))
        }
    }
}

/// Mean loss and mean gradient over a batch.
fn batch_gradient(model: &Model, batch: &[&Example]) -> Result<(f64, ParamGrads)> {
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|ex| model.loss_and_grads(&ex.x, &ex.target).map_err(|e| annotate(e, &ex.id)))
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::zeros_like(&model.store);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

fn annotate(e: Error, id: &str) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("sequence {id}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("sequence {id}: {m}")),
        other => other,
    }
}

/// Trains from scratch, keeping the parameters of the epoch with the best
/// validation event F1. `progress` sees each epoch's log line.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let hash = config_hash(&cfg.to_text());
    let mut model = Model::new(cfg)?;
    let mut adam = AdamW::new(
        &model.store,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint, Option<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, cfg.lr);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch)?;
            clip_global_norm(&mut grads, cfg.clip_norm);
            lr = cosine_lr(adam.step, total_steps, cfg.lr, cfg.min_lr);
            adam.step(&mut model.store, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
        }
        let (report, threshold) = validate(&model, val_set)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            lr,
            val_event_f1: report.event.micro().f1(),
            val_segment_f1: report.segment.micro().f1(),
            threshold,
        };
        progress(&entry);
        if best.as_ref().is_none_or(|b| entry.val_event_f1 > b.0) {
            let mut meta = vec![("epoch", epoch as f64)];
            if let Some(t) = threshold {
                meta.push(("threshold", t));
            }
            let ck = model.to_checkpoint(hash, Some(&adam), &meta);
            best = Some((entry.val_event_f1, epoch, ck, threshold));
        }
        log.push(entry);
    }
    let (_, best_epoch, checkpoint, threshold) = best.expect("at least one epoch");
    let model = Model::from_checkpoint(cfg, &checkpoint)?;
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        best_epoch,
        threshold,
    })
}

/// Metrics of `model` on `examples`, using the stored threshold if any.
pub fn evaluate_model(model: &Model, examples: &[Example], threshold: Option<f64>) -> Result<EvaluationReport> {
    let outputs = infer_all(model, examples)?;
    score_outputs(model, examples, &outputs, threshold)
}
