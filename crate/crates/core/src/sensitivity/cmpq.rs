use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{compute::forward_f64, Dataset, TransformerModel};
use crate::tensor::Matrix;

use super::{cca_rho1_matrix, AnalysisConfig, Method, SensitivityProfile};

pub const DEFAULT_CCA_DIM_CAP: usize = 64;

/// Columns `0, s, 2s, ...` with `s = ceil(d / cap)`, at most `cap` of them.
pub fn stride_columns(d: usize, cap: usize) -> Vec<usize> {
    let cap = cap.max(1);
    (0..d).step_by(d.div_ceil(cap).max(1)).take(cap).collect()
}

/// Every layer's output on the dataset as a `tokens x d_model` matrix.
pub fn layer_features(model: &TransformerModel, data: &Dataset) -> Result<Vec<Matrix>> {
    let cfg = model.config();
    let params = model.params_f64();
    let per_batch = data
        .batches
        .par_iter()
        .map(|b| forward_f64(cfg, &params, b, true).map(|(_, outs)| outs.unwrap_or_default()))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = vec![Vec::new(); cfg.n_layers];
    for outs in per_batch {
        for (dst, src) in layers.iter_mut().zip(outs) {
            dst.extend(src);
        }
    }
    layers
        .into_iter()
        .map(|v| Matrix::from_vec(v.len() / cfg.d_model, cfg.d_model, v))
        .collect()
}

/// Correlation-based sensitivity: `S_l = 1 - mean_{m != l} ρ₁(H_l, H_m)`
/// where `H_l` is layer `l`'s output on the calibration set, restricted to
/// at most `cca_dim_cap` stride-sampled feature columns.
pub fn cmpq(
    model: &TransformerModel,
    calib: &Dataset,
    cca_dim_cap: usize,
) -> Result<SensitivityProfile> {
    if calib.batches.is_empty() {
        return Err(Error::domain("empty calibration set"));
    }
    if cca_dim_cap == 0 {
        return Err(Error::domain("CCA dimension cap must be positive"));
    }
    calib.validate_for(model.config())?;
    let n_layers = model.n_layers();
    let columns = stride_columns(model.config().d_model, cca_dim_cap);
    let config = AnalysisConfig::Cmpq {
        cca_dim_cap,
        columns: columns.clone(),
        calibration_samples: calib.n_samples,
    };
    if n_layers == 1 {
        log::warn!("single-layer model: correlation sensitivity is degenerate, reporting 0");
        return Ok(SensitivityProfile {
            method: Method::Cmpq,
            scores: vec![0.0],
            config,
            seed: None,
        });
    }
    let features: Vec<Matrix> = layer_features(model, calib)?
        .iter()
        .map(|m| m.select_columns(&columns))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n_layers)
        .flat_map(|l| (l + 1..n_layers).map(move |m| (l, m)))
        .collect();
    let rhos = pairs
        .par_iter()
        .map(|&(l, m)| cca_rho1_matrix(features[l].clone(), features[m].clone()).map(|r| r.rho1))
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; n_layers];
    for (&(l, m), rho) in pairs.iter().zip(rhos) {
        sums[l] += rho;
        sums[m] += rho;
    }
    let scores = sums
        .into_iter()
        .map(|s| 1.0 - s / (n_layers - 1) as f64)
        .collect();
    Ok(SensitivityProfile {
        method: Method::Cmpq,
        scores,
        config,
        seed: None,
    })
}
