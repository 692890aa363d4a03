use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{PreparedSample, RebQModel};
use crate::error::{config_err, Error, Result};
use crate::reconstruct::{reconstruction_loss_on, CompleteQueries};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Restricts the single-label cross-entropy to the current session's
    /// classes during training. Prediction always uses every class.
    pub session_logit_mask: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            session_logit_mask: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// `classification + lambda * reconstruction`, evaluated once.
    pub total: f64,
    pub classification: f64,
    pub reconstruction: f64,
    pub lambda: f64,
    pub complete_in_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn mean_total(&self) -> f64 {
        self.steps.iter().map(|s| s.total).sum::<f64>() / self.steps.len().max(1) as f64
    }

    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.total).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

/// Losses of one batch on the tape.
pub struct BatchLoss {
    pub total: Var,
    pub classification: Var,
    pub reconstruction: Var,
    pub complete: usize,
}

/// `L = L_c + lambda * L_r` for one batch. `L_c` is the batch mean of CE
/// (BCE for multi-label); `L_r` covers the complete samples of the batch and
/// is 0 when there are none.
pub fn batch_loss<'a>(
    model: &'a RebQModel,
    tape: &mut Tape<'a>,
    batch: &[&PreparedSample],
    allowed: Option<&[bool]>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Sample("empty batch".into()));
    }
    let c = model.num_classes();
    let mut per = Vec::with_capacity(batch.len());
    for p in batch {
        let trace = model.forward_on(tape, p)?;
        let target = p.sample.label.target(c)?;
        per.push(if model.config.multi_label {
            tape.bce_with_logits(trace.logits, &target)?
        } else {
            tape.cross_entropy(trace.logits, &target, allowed)?
        });
    }
    let all = tape.concat_cols(&per)?;
    let sum = tape.sum(all);
    let classification = tape.scale(sum, 1.0 / batch.len() as f64);

    let complete: Vec<&CompleteQueries> = batch.iter().filter_map(|p| p.complete.as_ref()).collect();
    let reconstruction = match &model.memory {
        Some(memory) if !complete.is_empty() => reconstruction_loss_on(tape, &model.backbone, memory, &complete)?,
        _ => tape.constant(vec![1], vec![0.0])?,
    };
    let weighted = tape.scale(reconstruction, model.config.lambda);
    let total = tape.add(classification, weighted)?;
    Ok(BatchLoss {
        total,
        classification,
        reconstruction,
        complete: complete.len(),
    })
}

/// Trains prompts and head on one session with a fresh optimizer. The
/// backbone is shared read-only and never updated.
pub fn train_task(
    model: &mut RebQModel,
    data: &[PreparedSample],
    session_classes: &[usize],
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Sample("empty session".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(config_err("epochs and batch size must be >= 1"));
    }
    let c = model.num_classes();
    if let Some(&k) = session_classes.iter().find(|&&k| k >= c) {
        return Err(Error::LabelOutOfRange { label: k, classes: c });
    }
    let allowed: Option<Vec<bool>> = (opts.session_logit_mask && !model.config.multi_label).then(|| {
        let mut a = vec![false; c];
        session_classes.iter().for_each(|&k| a[k] = true);
        a
    });

    let steps_per_epoch = data.len().div_ceil(opts.batch_size);
    let mut opt = AdamW::new(opts.optimizer, steps_per_epoch * opts.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog { steps: Vec::new() };
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = opt.current_lr();
            let (entry, grads) = {
                let mut tape = Tape::new();
                let loss = batch_loss(model, &mut tape, &batch, allowed.as_deref())?;
                let entry = StepLog {
                    epoch,
                    step: opt.step_count(),
                    lr,
                    total: tape.scalar(loss.total),
                    classification: tape.scalar(loss.classification),
                    reconstruction: tape.scalar(loss.reconstruction),
                    lambda: model.config.lambda,
                    complete_in_batch: loss.complete,
                };
                (entry, tape.backward(loss.total)?)
            };
            if !entry.total.is_finite() {
                return Err(Error::Config(format!("non-finite loss at step {}", entry.step)));
            }
            log::trace!(
                "epoch {epoch} step {}: total {:.6} = {:.6} + {} * {:.6}",
                entry.step,
                entry.total,
                entry.classification,
                entry.lambda,
                entry.reconstruction
            );
            let mut params: Vec<&mut Tensor> = Vec::new();
            for (_, p) in model.named_params_mut() {
                p.zero_grad();
                p.accumulate(&grads, 1.0);
                params.push(p);
            }
            opt.step(&mut params)?;
            log.steps.push(entry);
        }
    }
    Ok(log)
}
