use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::compute::evaluate_params;
use crate::model::{Dataset, Metric, TransformerModel};
use crate::tensor::{quantile_slice, Tensor};

use super::{AnalysisConfig, Method, SensitivityProfile};

pub const DEFAULT_SPARSITY_LEVELS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    /// 1 where the weight is kept, 0 where it is pruned.
    pub mask: Tensor,
    pub sparsity_level: f64,
    pub threshold: f64,
}

impl PruneMask {
    pub fn zero_fraction(&self) -> f64 {
        self.mask.data().iter().filter(|&&m| m == 0.0).count() as f64 / self.mask.numel() as f64
    }

    pub fn apply(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != self.mask.shape() {
            return Err(Error::dim("mask shape differs from weight shape"));
        }
        let data = w
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(x, m)| x * m)
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}

/// Magnitude mask: `threshold` is the `sparsity` quantile of `|w|` and an
/// element survives iff `|w_i| > threshold`. Ties at the threshold are
/// pruned, so the achieved sparsity can exceed the target.
pub fn prune_mask(w: &Tensor, sparsity: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::domain(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let mags: Vec<f32> = w.data().iter().map(|x| x.abs()).collect();
    let threshold = quantile_slice(&mags, sparsity)?;
    let mask = mags
        .iter()
        .map(|&m| if m as f64 > threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(PruneMask {
        mask: Tensor::new(w.shape().to_vec(), mask)?,
        sparsity_level: sparsity,
        threshold,
    })
}

/// Whether layers are analysed one after another or concurrently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    LayerParallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmpqConfig {
    pub sparsity_levels: Vec<f64>,
    pub execution: Execution,
    /// Metric of the unpruned model, when the caller already has it.
    pub base_metric: Option<Metric>,
}

impl Default for PmpqConfig {
    fn default() -> Self {
        Self {
            sparsity_levels: DEFAULT_SPARSITY_LEVELS.to_vec(),
            execution: Execution::default(),
            base_metric: None,
        }
    }
}

fn degradation(base: Metric, pruned: Metric) -> Result<f64> {
    match (base, pruned) {
        (Metric::Accuracy(b), Metric::Accuracy(p)) => Ok(b - p),
        (Metric::Perplexity(b), Metric::Perplexity(p)) => Ok((p - b) / b),
        _ => Err(Error::domain("metric kinds differ")),
    }
}

/// Pruning-based sensitivity.
///
/// For each layer and sparsity level, every weight matrix of that layer is
/// pruned with [`prune_mask`] and the model re-evaluated. The score is the
/// mean degradation over levels, floored at 0: accuracy loss for
/// classification, relative perplexity increase for language models.
pub fn pmpq(
    model: &TransformerModel,
    eval: &Dataset,
    cfg: &PmpqConfig,
) -> Result<SensitivityProfile> {
    if cfg.sparsity_levels.is_empty() {
        return Err(Error::domain("no sparsity levels"));
    }
    let mc = model.config();
    if eval.task != mc.task_head {
        return Err(Error::domain("dataset task does not match the model head"));
    }
    eval.validate_for(mc)?;
    let layout = model.layout();
    let base_params = model.params_f64();
    let base = match cfg.base_metric {
        Some(m) => m,
        None => evaluate_params(mc, &base_params, eval)?,
    };

    let score_layer = |l: usize| -> Result<f64> {
        let mut total = 0.0;
        for &s in &cfg.sparsity_levels {
            let mut params = base_params.clone();
            for idx in layout.layer_matrices(l) {
                let mask = prune_mask(model.tensor(idx), s)?;
                for (p, &m) in params[idx].iter_mut().zip(mask.mask.data()) {
                    if m == 0.0 {
                        *p = 0.0;
                    }
                }
            }
            total += degradation(base, evaluate_params(mc, &params, eval)?)?;
        }
        Ok((total / cfg.sparsity_levels.len() as f64).max(0.0))
    };
    let scores = match cfg.execution {
        Execution::Sequential => (0..model.n_layers())
            .map(score_layer)
            .collect::<Result<Vec<_>>>()?,
        Execution::LayerParallel => (0..model.n_layers())
            .into_par_iter()
            .map(score_layer)
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(SensitivityProfile {
        method: Method::Pmpq,
        scores,
        config: AnalysisConfig::Pmpq {
            sparsity_levels: cfg.sparsity_levels.clone(),
            base_metric: base,
        },
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let w = Tensor::from_vec(vec![0.1, -0.5, 0.3, -0.05]).unwrap();
        let m = prune_mask(&w, 0.5).unwrap();
        assert!((m.threshold - 0.2).abs() < 1e-7);
        assert_eq!(m.mask.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_sparsity_prunes_minimum_only() {
        let w = Tensor::from_vec(vec![0.4, -0.1, 0.1, 0.3]).unwrap();
        let m = prune_mask(&w, 0.0).unwrap();
        assert_eq!(m.mask.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_magnitudes_prune_everything() {
        let w = Tensor::from_vec(vec![0.2, -0.2, 0.2]).unwrap();
        assert_eq!(prune_mask(&w, 0.3).unwrap().zero_fraction(), 1.0);
    }

    #[test]
    fn full_sparsity_rejected() {
        let w = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(prune_mask(&w, 1.0).is_err());
    }
}
