use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::compute::batch_losses;
use crate::model::{Component, Dataset, TransformerModel};
use crate::tensor::{derive_seed, stats_slice, Rng, Tensor};

use super::{AnalysisConfig, Method, SensitivityProfile};

pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdmpqMode {
    /// `|TV_perturbed - TV_base| / N`.
    #[default]
    Delta,
    /// `TV_perturbed / N`, the mean perturbed loss.
    Literal,
}

/// Noise `ε ~ N(0, σ²)` with `σ = delta * std(W)` for each layer's weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub delta: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(delta: f64, seed: u64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::domain(format!(
                "perturbation scale {delta} must be finite and >= 0"
            )));
        }
        Ok(Self { delta, seed })
    }

    pub fn sigma(&self, w: &Tensor) -> Result<f64> {
        Ok(self.delta * stats_slice(&w.to_f64())?.std)
    }

    /// `w + ε` for layer `layer`, rounded to `f32`. With `σ = 0` the weight is
    /// returned unchanged.
    pub fn perturb(&self, w: &Tensor, layer: usize) -> Result<Tensor> {
        let sigma = self.sigma(w)?;
        if sigma == 0.0 {
            return Ok(w.clone());
        }
        let mut rng = Rng::new(derive_seed(self.seed, layer as u64));
        let data = w
            .data()
            .iter()
            .map(|&x| (x as f64 + sigma * rng.normal()) as f32)
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}

/// Index of the tensor perturbed for a layer: its attention query weight.
pub fn perturbed_param(model: &TransformerModel, layer: usize) -> usize {
    model.layout().layer(layer, Component::AttnQ)
}

/// Perturbation-based sensitivity.
///
/// For each layer the query weight is replaced by [`PerturbationSpec::perturb`]
/// in a private copy of the parameters, the per-batch mean losses over `eval`
/// are summed into a total variation `TV`, and the score is computed from
/// `TV / N` with `N` the number of batches according to `mode`.
pub fn tdmpq(
    model: &TransformerModel,
    eval: &Dataset,
    spec: &PerturbationSpec,
    mode: TdmpqMode,
) -> Result<SensitivityProfile> {
    PerturbationSpec::new(spec.delta, spec.seed)?;
    let cfg = model.config();
    if eval.batches.is_empty() {
        return Err(Error::domain("empty evaluation set"));
    }
    eval.validate_for(cfg)?;
    let n = eval.batches.len() as f64;
    let base_params = model.params_f64();
    let base_tv: f64 = batch_losses(cfg, &base_params, eval)?.iter().sum();

    let per_layer = (0..model.n_layers())
        .into_par_iter()
        .map(|l| -> Result<(f64, f64)> {
            let idx = perturbed_param(model, l);
            let w = model.tensor(idx);
            let sigma = spec.sigma(w)?;
            if sigma == 0.0 {
                let s = match mode {
                    TdmpqMode::Delta => 0.0,
                    TdmpqMode::Literal => base_tv / n,
                };
                return Ok((s, 0.0));
            }
            let mut params = base_params.clone();
            params[idx] = spec.perturb(w, l)?.to_f64();
            let tv: f64 = batch_losses(cfg, &params, eval)?.iter().sum();
            let s = match mode {
                TdmpqMode::Delta => (tv - base_tv).abs() / n,
                TdmpqMode::Literal => tv / n,
            };
            Ok((s, sigma))
        })
        .collect::<Result<Vec<_>>>()?;
    let (scores, sigmas): (Vec<f64>, Vec<f64>) = per_layer.into_iter().unzip();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("perturbed loss of layer {i}")));
    }
    Ok(SensitivityProfile {
        method: Method::Tdmpq,
        scores,
        config: AnalysisConfig::Tdmpq {
            delta: spec.delta,
            mode,
            sigmas,
            base_mean_loss: base_tv / n,
        },
        seed: Some(spec.seed),
    })
}
