use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::compute::loss_and_grad_f64;
use super::{Dataset, TaskHead, TransformerModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Training accuracy (classification) or perplexity (LM) seen during the epoch.
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Adam on mean cross-entropy.
///
/// Each epoch reshuffles the examples with `rng` and regroups them into
/// batches of the dataset's batch size. Moments are kept in `f64`; the
/// updated weights are rounded back to `f32` after every step.
pub fn train(
    model: &mut TransformerModel,
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<TrainLog> {
    dataset.validate_for(model.config())?;
    let cfg = *model.config();
    let batch_size = dataset.batch_size();
    let examples = dataset.examples();
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v = m.clone();
    let mut step = 0i32;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let shuffled: Vec<_> = order.iter().map(|&i| examples[i].clone()).collect();
        let epoch_set = Dataset::from_examples(dataset.task, &shuffled, batch_size)?;

        let mut loss_sum = 0.0;
        let mut nll_sum = 0.0;
        let mut correct = 0usize;
        let mut count = 0usize;
        for batch in &epoch_set.batches {
            let (stats, grads) = loss_and_grad_f64(&cfg, &model.params_f64(), batch)?;
            if !stats.loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {}", stats.loss),
                });
            }
            loss_sum += stats.loss;
            nll_sum += stats.loss * stats.count as f64;
            correct += stats.correct;
            count += stats.count;

            step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(step);
            let bc2 = 1.0 - ADAM_BETA2.powi(step);
            for (i, g) in grads.iter().enumerate() {
                let (mi, vi) = (&mut m[i], &mut v[i]);
                let w = model.tensor_mut(i).data_mut();
                for j in 0..g.len() {
                    mi[j] = ADAM_BETA1 * mi[j] + (1.0 - ADAM_BETA1) * g[j];
                    vi[j] = ADAM_BETA2 * vi[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                    let update = lr * (mi[j] / bc1) / ((vi[j] / bc2).sqrt() + ADAM_EPS);
                    w[j] = (w[j] as f64 - update) as f32;
                }
            }
        }
        let metric = match dataset.task {
            TaskHead::Classification { .. } => correct as f64 / count as f64,
            TaskHead::LanguageModel => (nll_sum / count as f64).exp(),
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / epoch_set.batches.len() as f64,
            metric,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} metric {:.5}",
            entry.loss,
            entry.metric
        );
        log.epochs.push(entry);
    }
    Ok(log)
}
