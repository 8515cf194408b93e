//! Optimization loop, evaluation and checkpoints.

pub mod checkpoint;
pub mod metrics;
pub mod schedule;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, Gradients, Tape};
use crate::concept::{ConceptKind, ConceptVector};
use crate::error::{config_err, data_err, Error, Result};
use crate::model::{Model, Targets};
use crate::rng::{mix, stream_rng, streams};
use crate::synth::{encode_patient, Dataset, EncodeConfig, TokenSequence};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use metrics::{auprc, auroc, f1, macro_f1, ConceptScore, Metrics};
pub use schedule::{lr_at, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            schedule: Schedule::default(),
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(config_err("trainer.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("trainer.batch_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(config_err("trainer.patience must be >= 1"));
        }
        Ok(())
    }
}

/// One encoded patient with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub seq: TokenSequence,
    pub label: u8,
    pub concepts: ConceptVector,
}

impl Example {
    pub fn targets(&self) -> Targets<'_> {
        Targets {
            label: self.label,
            concepts: &self.concepts,
        }
    }
}

/// Encodes the patients at `indices` (all patients when `None`).
pub fn examples(dataset: &Dataset, indices: Option<&[usize]>, config: &EncodeConfig) -> Result<Vec<Example>> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    idx.par_iter()
        .map(|&i| {
            let p = &dataset.patients[i];
            Ok(Example {
                id: p.id,
                seq: encode_patient(p, &dataset.vocab, config)?,
                label: p.label,
                concepts: p.concepts.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub tune_loss: f64,
    pub lr: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_tune_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

pub const HISTORY_COLUMNS: [&str; 5] = ["epoch", "train_loss", "tune_loss", "lr", "tau"];

/// Tab-separated history with a header row.
pub fn write_history(history: &[EpochRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{}", HISTORY_COLUMNS.join("\t"))?;
    for r in history {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.tune_loss, r.lr, r.tau)?;
    }
    Ok(())
}

fn sample_loss_and_grad(model: &Model, ex: &Example, seed: u64) -> Result<(f64, Gradients)> {
    let mut rng = stream_rng(seed, streams::NOISE);
    let mut tape = Tape::new(&model.params);
    let l = model.loss(&mut tape, &ex.seq, ex.targets(), true, &mut rng)?;
    let value = tape.value(l.total).item();
    Ok((value, tape.backward(l.total)?))
}

/// Mean eval-mode objective with ground-truth concepts.
pub fn mean_loss(model: &Model, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(data_err("cannot compute a loss over zero examples"));
    }
    let losses: Vec<f64> = data
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.params);
            let mut rng = stream_rng(0, 0);
            let l = model.loss(&mut tape, &ex.seq, ex.targets(), false, &mut rng)?;
            Ok(tape.value(l.total).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Trains in place. Per-sample gradients are computed in parallel and summed
/// in sample order, so results do not depend on the thread count. After every
/// epoch the eval-mode tuning loss is measured; training stops once it has not
/// improved for `patience` epochs and the best parameters are restored.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    tune_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || tune_set.is_empty() {
        return Err(data_err("training and tuning sets must be non-empty"));
    }
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total = config.epochs * batches_per_epoch;
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.schedule.base_lr,
            ..AdamConfig::default()
        },
    )?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone(), model.quantizer);
    let mut step = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut stream_rng(mix(config.seed, epoch as u64), streams::SHUFFLE));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let seed = mix(mix(config.seed, step as u64), k as u64);
                    sample_loss_and_grad(model, &train_set[i], seed)
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(&model.params);
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            loss *= inv;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            step += 1;
            adam.set_lr(lr_at(step, total, &config.schedule)?)?;
            adam.step(&mut model.params, &grads);
            model.quantizer.step();
            epoch_loss += loss * batch.len() as f64;
        }
        let tune_loss = mean_loss(model, tune_set)?;
        if !tune_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: tune_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            tune_loss,
            lr: adam.lr(),
            tau: model.quantizer.tau,
        };
        on_epoch(&record);
        history.push(record);
        if tune_loss < best.0 {
            best = (tune_loss, epoch, model.params.clone(), model.quantizer);
        } else if epoch - best.1 >= config.patience {
            stopped_early = epoch < config.epochs;
            break;
        }
    }
    let (best_tune_loss, best_epoch, params, quantizer) = best;
    model.params = params;
    model.quantizer = quantizer;
    Ok(TrainReport {
        history,
        best_epoch,
        best_tune_loss,
        steps: step,
        stopped_early,
    })
}

/// Per-example test-time outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamplePrediction {
    pub id: u64,
    pub label: u8,
    pub risk: f64,
    pub concepts: Option<ConceptVector>,
    pub code: Option<Vec<usize>>,
}

pub fn predict_all(model: &Model, data: &[Example]) -> Result<Vec<ExamplePrediction>> {
    data.par_iter()
        .map(|ex| {
            let p = model.predict(&ex.seq)?;
            Ok(ExamplePrediction {
                id: ex.id,
                label: ex.label,
                risk: p.risk,
                concepts: p.concepts,
                code: p.code,
            })
        })
        .collect()
}

/// Risk AUROC/AUPRC with predicted concepts fed to the classifier, plus
/// per-concept F1 of the concept head (macro F1 for categorical concepts).
pub fn evaluate(model: &Model, data: &[Example]) -> Result<Metrics> {
    let preds = predict_all(model, data)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.risk).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let mut concept_f1 = Vec::new();
    if model.bottleneck().is_some() {
        for (c, spec) in model.concept_specs().iter().enumerate() {
            let pred: Vec<usize> = preds
                .iter()
                .map(|p| p.concepts.as_ref().expect("pcb prediction").0[c])
                .collect();
            let truth: Vec<usize> = data.iter().map(|e| e.concepts.0[c]).collect();
            let f1 = match spec.kind {
                ConceptKind::Binary => f1(&pred, &truth)?,
                ConceptKind::Categorical { k } => macro_f1(&pred, &truth, k)?,
            };
            concept_f1.push(ConceptScore {
                concept: spec.name.clone(),
                f1,
            });
        }
    }
    Ok(Metrics {
        n: data.len(),
        auroc: auroc(&scores, &labels)?,
        auprc: auprc(&scores, &labels)?,
        loss: mean_loss(model, data)?,
        concept_f1,
    })
}
