use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocate::{Solver, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quant::Precision;
use crate::sensitivity::{
    Execution, Method, TdmpqMode, DEFAULT_CCA_DIM_CAP, DEFAULT_DELTA, DEFAULT_SPARSITY_LEVELS,
};

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 512;
pub const DEFAULT_OUTPUT_DIR: &str = "out";

/// One pipeline run. Unknown keys are rejected and `seed` is required.
///
/// ```json
/// {
///   "seed": 7,
///   "model": {"train": {"config": {...}, "epochs": 20, "lr": 0.003}},
///   "data": {
///     "train": {"kind": "synthetic_classification", "n": 2000, "seq_len": 16, "vocab": 16, "batch_size": 32},
///     "eval": {"kind": "synthetic_classification", "n": 500, "seq_len": 16, "vocab": 16, "batch_size": 50}
///   },
///   "method": "cmpq",
///   "allocator": {"kind": "kmeans"}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSource,
    pub data: DataConfig,
    pub method: Method,
    #[serde(default)]
    pub allocator: AllocatorConfig,
    #[serde(default)]
    pub params: MethodParams,
    /// Not echoed into reports, so runs differing only in output location
    /// produce identical reports.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// An MPQW container carrying a model config.
    Path(PathBuf),
    Train(TrainRecipe),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub config: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Required when the model is trained.
    #[serde(default)]
    pub train: Option<DataSource>,
    pub eval: DataSource,
    /// Correlation analysis data; defaults to the head of the training set,
    /// or of the eval set when there is none.
    #[serde(default)]
    pub calibration: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// "More token 7 than token 3" sequences.
    SyntheticClassification {
        n: usize,
        seq_len: usize,
        vocab: usize,
        batch_size: usize,
    },
    /// Order-2 Markov text; every split of one run shares the chain.
    SyntheticLm {
        n_tokens: usize,
        vocab: usize,
        seq_len: usize,
        batch_size: usize,
    },
    /// Byte-level language modelling over a file.
    Text {
        path: PathBuf,
        seq_len: usize,
        batch_size: usize,
    },
    /// `label<TAB>text` lines.
    Labeled {
        path: PathBuf,
        seq_len: usize,
        batch_size: usize,
    },
    /// A dataset JSON file as written by `gen-data`.
    Dataset { path: PathBuf },
}

impl DataSource {
    pub fn path(&self) -> Option<&Path> {
        match self {
            DataSource::Text { path, .. }
            | DataSource::Labeled { path, .. }
            | DataSource::Dataset { path } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AllocatorConfig {
    #[default]
    Kmeans,
    Budgeted {
        budget_bytes: u64,
        #[serde(default)]
        solver: Solver,
    },
    Uniform {
        bits: Precision,
    },
}

impl AllocatorConfig {
    pub fn label(&self) -> String {
        match self {
            AllocatorConfig::Kmeans => "kmeans".into(),
            AllocatorConfig::Budgeted { budget_bytes, .. } => format!("budgeted({budget_bytes})"),
            AllocatorConfig::Uniform { bits } => format!("uniform({bits})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodParams {
    pub sparsity_levels: Vec<f64>,
    pub pmpq_execution: Execution,
    pub delta: f64,
    pub tdmpq_mode: TdmpqMode,
    pub cca_dim_cap: usize,
    pub calibration_samples: usize,
    pub lambda: f64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            sparsity_levels: DEFAULT_SPARSITY_LEVELS.to_vec(),
            pmpq_execution: Execution::default(),
            delta: DEFAULT_DELTA,
            tdmpq_mode: TdmpqMode::default(),
            cca_dim_cap: DEFAULT_CCA_DIM_CAP,
            calibration_samples: DEFAULT_CALIBRATION_SAMPLES,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| Error::Path {
            path: path.as_ref().to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// Parameter ranges and the existence of every referenced file.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.sparsity_levels.is_empty() || p.sparsity_levels.iter().any(|s| !(0.0..1.0).contains(s))
        {
            return Err(Error::Config(
                "sparsity_levels must be non-empty values in [0, 1)".into(),
            ));
        }
        if !(p.delta >= 0.0 && p.delta.is_finite()) {
            return Err(Error::Config("delta must be finite and >= 0".into()));
        }
        if !(p.lambda >= 0.0 && p.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if p.cca_dim_cap == 0 || p.calibration_samples == 0 {
            return Err(Error::Config(
                "cca_dim_cap and calibration_samples must be >= 1".into(),
            ));
        }
        if let ModelSource::Train(r) = &self.model {
            r.config
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
            if self.data.train.is_none() {
                return Err(Error::Config(
                    "training the model requires data.train".into(),
                ));
            }
            if !(r.lr > 0.0 && r.lr.is_finite()) {
                return Err(Error::Config("lr must be positive".into()));
            }
        }
        let mut paths: Vec<&Path> = [&self.data.train, &self.data.calibration]
            .into_iter()
            .flatten()
            .chain(std::iter::once(&self.data.eval))
            .filter_map(DataSource::path)
            .collect();
        if let ModelSource::Path(p) = &self.model {
            paths.push(p);
        }
        if let Some(missing) = paths.into_iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!(
                "{} does not exist",
                missing.display()
            )));
        }
        Ok(())
    }
}
