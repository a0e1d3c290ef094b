//! Per-layer sensitivity analysis.
//!
//! Three analyzers score how much each transformer block matters:
//!
//! - [`cmpq`]: one minus the mean first canonical correlation between a
//!   layer's output and every other layer's output on calibration data.
//! - [`pmpq`]: metric degradation when a layer's weight matrices are
//!   magnitude-pruned, averaged over sparsity levels.
//! - [`tdmpq`]: change in total loss when the layer's query weight receives
//!   Gaussian noise.
//!
//! Every analyzer leaves the model untouched and is deterministic for a
//! fixed model, dataset, seed and configuration.

mod cca;
mod cmpq;
mod pmpq;
mod tdmpq;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Metric;

pub use cca::{cca_rho1, cca_rho1_matrix, CCAResult};
pub use cmpq::{cmpq, layer_features, DEFAULT_CCA_DIM_CAP};
pub use pmpq::{pmpq, prune_mask, Execution, PmpqConfig, PruneMask, DEFAULT_SPARSITY_LEVELS};
pub use tdmpq::{tdmpq, PerturbationSpec, TdmpqMode, DEFAULT_DELTA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cmpq,
    Pmpq,
    Tdmpq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cmpq => "cmpq",
            Method::Pmpq => "pmpq",
            Method::Tdmpq => "tdmpq",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings an analysis ran with, kept alongside its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisConfig {
    Cmpq {
        cca_dim_cap: usize,
        /// Feature columns kept per layer after stride sampling.
        columns: Vec<usize>,
        calibration_samples: usize,
    },
    Pmpq {
        sparsity_levels: Vec<f64>,
        base_metric: Metric,
    },
    Tdmpq {
        delta: f64,
        mode: TdmpqMode,
        /// Noise standard deviation applied to each layer.
        sigmas: Vec<f64>,
        base_mean_loss: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub method: Method,
    pub scores: Vec<f64>,
    pub config: AnalysisConfig,
    pub seed: Option<u64>,
}

impl SensitivityProfile {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::domain("profile has no layers"));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sensitivity of layer {i}")));
        }
        Ok(())
    }
}

/// Root-mean-square deviation of each layer segment from the all-layer mean
/// sensitivity. A segment with no layers is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first30: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mid30: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rest: Option<f64>,
}

/// Split `n_layers` into the first `ceil(0.3 L)`, the next `ceil(0.3 L)`
/// and the remainder.
pub fn segment_bounds(n_layers: usize) -> [std::ops::Range<usize>; 3] {
    let seg = (3 * n_layers).div_ceil(10);
    let a = seg.min(n_layers);
    let b = (a + seg).min(n_layers);
    [0..a, a..b, b..n_layers]
}

pub fn segment_stats(scores: &[f64]) -> Result<SegmentStats> {
    if scores.is_empty() {
        return Err(Error::domain("segment statistics of an empty profile"));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let dev = |r: std::ops::Range<usize>| {
        let seg = &scores[r];
        (!seg.is_empty()).then(|| {
            (seg.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / seg.len() as f64).sqrt()
        })
    };
    let [a, b, c] = segment_bounds(scores.len());
    Ok(SegmentStats {
        first30: dev(a),
        mid30: dev(b),
        rest: dev(c),
    })
}

impl SegmentStats {
    pub fn values(&self) -> [Option<f64>; 3] {
        [self.first30, self.mid30, self.rest]
    }

    /// Three-row text table, one column per labelled profile. Absent
    /// segments print as `-`.
    pub fn table(columns: &[(&str, SegmentStats)]) -> String {
        let rows = ["First 30% layers", "Middle 30% layers", "Remaining layers"];
        let width = columns
            .iter()
            .map(|(h, _)| h.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let mut out = format!("{:<18}", "Segment");
        for (h, _) in columns {
            out.push_str(&format!(" {h:>width$}"));
        }
        out.push('\n');
        for (i, row) in rows.iter().enumerate() {
            out.push_str(&format!("{row:<18}"));
            for (_, s) in columns {
                match s.values()[i] {
                    Some(v) => out.push_str(&format!(" {v:>width$.3}")),
                    None => out.push_str(&format!(" {:>width$}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_fixture() {
        let s = segment_stats(&[0.0, 0.0, 3.0]).unwrap();
        assert_eq!(s.values(), [Some(1.0), Some(1.0), Some(2.0)]);
    }

    #[test]
    fn empty_segments_absent() {
        let s = segment_stats(&[0.5]).unwrap();
        assert_eq!(s.values(), [Some(0.0), None, None]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"first30":0.0}"#);
    }

    #[test]
    fn bounds() {
        assert_eq!(segment_bounds(12), [0..4, 4..8, 8..12]);
        assert_eq!(segment_bounds(10), [0..3, 3..6, 6..10]);
        assert_eq!(segment_bounds(2), [0..1, 1..2, 2..2]);
    }

    #[test]
    fn table_marks_absent() {
        let s = segment_stats(&[1.0, 2.0]).unwrap();
        let t = SegmentStats::table(&[("cmpq", s)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().nth(3).unwrap().trim_end().ends_with('-'));
    }
}
