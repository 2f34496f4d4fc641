//! Mini-batch training with AdamW, gradient clipping, early stopping and
//! best-validation snapshotting.
//!
//! Each sample in a batch is differentiated on its own tape (in parallel when
//! enabled); per-sample gradients are summed in sample order, so runs are
//! reproducible bit-for-bit regardless of thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Gradients, Tape, Tensor};
use crate::data::{Sample, Scaler};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MaskedMae,
    /// Huber with threshold 1 flow unit.
    MaskedHuber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub loss: LossKind,
    pub weight_decay: f64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            max_steps: None,
            patience: 20,
            seed: 0,
            grad_clip_norm: Some(5.0),
            loss: LossKind::MaskedMae,
            weight_decay: 0.01,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "invalid lr {} or batch size {}",
                self.lr, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub stopped_early: bool,
    pub diverged: bool,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae,val_rmse,val_mape,wall_seconds\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.epoch,
            r.train_loss,
            r.val_mae,
            r.val_rmse,
            r.val_mape.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_seconds
        ));
    }
    out
}

/// A sample with its input normalized and missing inputs zero-filled.
#[derive(Debug, Clone)]
pub struct PreparedSample<'a> {
    pub sample: &'a Sample,
    pub input: Tensor,
}

pub fn prepare<'a>(samples: &'a [Sample], scaler: &Scaler) -> Result<Vec<PreparedSample<'a>>> {
    samples
        .iter()
        .map(|s| {
            let mut input = scaler.transform(&s.input)?;
            for (v, &m) in input.data_mut().iter_mut().zip(&s.input_missing) {
                if m {
                    *v = 0.0;
                }
            }
            Ok(PreparedSample { sample: s, input })
        })
        .collect()
}

/// Summed masked loss of one sample in flow units, with its gradients and
/// the number of scored target entries.
pub fn sample_loss(
    model: &Model,
    scaler: &Scaler,
    prepared: &PreparedSample<'_>,
    loss: LossKind,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, usize, Gradients)> {
    let s = prepared.sample;
    let mut tape = Tape::new(model.params());
    let pred = model.forward(&mut tape, &prepared.input, Some(&s.input_missing), &s.meta, None, rng)?;
    let std = tape.constant(Tensor::new(vec![scaler.channels()], scaler.std.clone())?);
    let mean = tape.constant(Tensor::new(vec![scaler.channels()], scaler.mean.clone())?);
    let pred = tape.mul_row(pred, std)?;
    let pred = tape.add_row(pred, mean)?;
    let target = tape.constant(s.target.clone());
    let diff = tape.sub(pred, target)?;
    let keep: Vec<f64> = s.target_missing.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let count = keep.iter().filter(|&&k| k > 0.0).count();
    let keep = tape.constant(Tensor::new(s.target.shape().to_vec(), keep)?);
    let diff = tape.hadamard(diff, keep)?;
    let per_entry = match loss {
        LossKind::MaskedMae => tape.abs(diff),
        LossKind::MaskedHuber => tape.huber(diff, 1.0),
    };
    let total = tape.sum(per_entry);
    let grads = tape.backward(total)?;
    Ok((tape.value(total).item(), count, grads))
}

/// Mean batch loss and mean gradient (fixed reduction order).
pub fn batch_gradients(
    model: &Model,
    scaler: &Scaler,
    batch: &[&PreparedSample<'_>],
    loss: LossKind,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let results = par::map_range(batch.len(), |i| {
        let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s.wrapping_add(i as u64)));
        sample_loss(model, scaler, batch[i], loss, rng.as_mut())
    });
    let mut grads = Gradients::empty(model.params().len());
    let (mut total, mut count) = (0.0, 0usize);
    for r in results {
        let (l, c, g) = r?;
        total += l;
        count += c;
        grads.add(&g);
    }
    if count == 0 {
        return Ok((0.0, Gradients::empty(model.params().len())));
    }
    grads.scale(1.0 / count as f64);
    Ok((total / count as f64, grads))
}

/// Denormalized predictions for `samples`, stacked as `(B, T', N, C)`.
pub fn predict_samples(model: &Model, scaler: &Scaler, samples: &[Sample]) -> Result<Tensor> {
    let prepared = prepare(samples, scaler)?;
    let preds = par::map_slice(&prepared, |p| -> Result<Tensor> {
        let mut tape = Tape::new(model.params());
        let y = model.forward(&mut tape, &p.input, Some(&p.sample.input_missing), &p.sample.meta, None, None)?;
        scaler.inverse(tape.value(y))
    });
    let cfg = model.config();
    let mut data = Vec::with_capacity(samples.len() * cfg.output_steps * cfg.nodes * cfg.channels);
    for p in preds {
        data.extend_from_slice(p?.data());
    }
    Tensor::new(
        vec![samples.len(), cfg.output_steps, cfg.nodes, cfg.channels],
        data,
    )
}

pub fn stack_targets(samples: &[Sample]) -> Result<(Tensor, Vec<bool>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("no samples to evaluate".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.target.shape());
    let mut data = Vec::new();
    let mut missing = Vec::new();
    for s in samples {
        data.extend_from_slice(s.target.data());
        missing.extend_from_slice(&s.target_missing);
    }
    Ok((Tensor::new(shape, data)?, missing))
}

pub fn evaluate_model(
    model: &Model,
    scaler: &Scaler,
    samples: &[Sample],
    filter_threshold: Option<f64>,
) -> Result<EvalReport> {
    let pred = predict_samples(model, scaler, samples)?;
    let (truth, missing) = stack_targets(samples)?;
    evaluate(&pred, &truth, &missing, filter_threshold)
}

/// MAE of predicting the training mean of each channel everywhere.
pub fn mean_predictor_mae(scaler: &Scaler, samples: &[Sample]) -> Result<f64> {
    let (truth, missing) = stack_targets(samples)?;
    let c = scaler.channels();
    let pred = Tensor::from_fn(truth.shape(), |i| scaler.mean[i % c]);
    Ok(evaluate(&pred, &truth, &missing, None)?.overall.mae)
}

/// Trains `model` in place. On return the model holds the best-validation
/// parameters, rounded to checkpoint precision (`f32`); validation scores in
/// the history are computed with that same rounding, so re-evaluating a saved
/// checkpoint reproduces them.
pub fn train(
    model: &mut Model,
    scaler: &Scaler,
    train_samples: &[Sample],
    val_samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let prepared = prepare(train_samples, scaler)?;
    let opt = cfg.optimizer();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();

    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>, usize)> = None;
    let mut stale = 0;
    let mut steps = 0usize;
    let mut stopped_early = false;
    let mut diverged = false;
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);
    let use_dropout = model.config().dropout > 0.0;

    'epochs: for epoch in 0..cfg.max_epochs {
        if steps >= step_cap {
            break;
        }
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= step_cap {
                break;
            }
            let batch: Vec<&PreparedSample<'_>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let dropout_seed = use_dropout.then(|| cfg.seed ^ ((steps as u64 + 1) << 20));
            // Non-finite activations can surface as a numeric error (a
            // softmax row with no finite score) rather than a NaN loss.
            let (loss, mut grads) = match batch_gradients(model, scaler, &batch, cfg.loss, dropout_seed) {
                Err(Error::Numeric(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                r => r?,
            };
            if !loss.is_finite() || !grads.is_finite() {
                diverged = true;
                break 'epochs;
            }
            if let Some(max) = cfg.grad_clip_norm {
                grads.clip_global_norm(max);
            }
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads);
            steps += 1;
            opt.step(params, steps as u64);
            loss_sum += loss;
            batches += 1;
        }

        let mut snapshot = model.clone();
        snapshot.params_mut().round_to_f32();
        let report = match evaluate_model(&snapshot, scaler, val_samples, None) {
            Err(Error::Numeric(_)) => {
                diverged = true;
                break;
            }
            r => r?,
        };
        let val_mae = report.overall.mae;
        if !val_mae.is_finite() {
            diverged = true;
            break;
        }
        history.push(EpochRecord {
            epoch,
            steps,
            train_loss: loss_sum / batches.max(1) as f64,
            val_mae,
            val_rmse: report.overall.rmse,
            val_mape: report.overall.mape_percent,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_mae < *b) {
            best = Some((val_mae, snapshot.params().values(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, values, epoch)) => {
            model.params_mut().set_values(&values)?;
            Some(epoch)
        }
        None => {
            model.params_mut().round_to_f32();
            None
        }
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        steps,
        stopped_early,
        diverged,
    })
}
