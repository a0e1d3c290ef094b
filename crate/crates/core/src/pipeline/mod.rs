//! End-to-end runs: load or train a model, analyze, allocate, quantize,
//! evaluate and report.
//!
//! Every random choice draws from a child seed of the run seed, so a config
//! fully determines the outputs.

mod compare;
mod config;
mod ingest;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocate::{
    budgeted_plan, kmeans_plan, objective, ObjectiveConfig, ObjectiveValue, PrecisionPlan,
};
use crate::error::{Error, Result, StageExt};
use crate::model::{
    gen_classification, lm_dataset_from_stream, train, Dataset, MarkovChain, Metric, TrainLog,
    TransformerModel,
};
use crate::model_io::{memory_report, MemoryReport, WeightContainer};
use crate::quant::apply_plan;
use crate::sensitivity::{
    cmpq, pmpq, segment_stats, tdmpq, Method, PerturbationSpec, PmpqConfig, SegmentStats,
    SensitivityProfile,
};
use crate::tensor::{derive_seed, Rng};

pub use compare::{compare, CompareConfig, Comparison, ComparisonRow};
pub use config::{
    AllocatorConfig, DataConfig, DataSource, MethodParams, ModelSource, RunConfig, TrainRecipe,
    DEFAULT_CALIBRATION_SAMPLES, DEFAULT_OUTPUT_DIR,
};
pub use ingest::{
    export_labeled, ingest_labeled, ingest_text, parse_labeled, BYTE_VOCAB, PAD_TOKEN,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const MODEL_FILE: &str = "model.mpqw";
pub const QUANTIZED_FILE: &str = "quantized.mpqw";
pub const PROFILE_FILE: &str = "profile.json";
pub const PLAN_FILE: &str = "plan.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// Child seed streams of the run seed.
mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const EVAL_DATA: u64 = 2;
    pub const CALIBRATION_DATA: u64 = 3;
    pub const LM_CHAIN: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const PERTURB: u64 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Calibration,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => stream::TRAIN_DATA,
            Split::Eval => stream::EVAL_DATA,
            Split::Calibration => stream::CALIBRATION_DATA,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.json",
            Split::Eval => "eval.json",
            Split::Calibration => "calibration.json",
        }
    }
}

pub fn load_source(source: &DataSource, seed: u64, split: Split) -> Result<Dataset> {
    let mut rng = Rng::new(derive_seed(seed, split.stream()));
    match source {
        DataSource::SyntheticClassification {
            n,
            seq_len,
            vocab,
            batch_size,
        } => gen_classification(&mut rng, *n, *seq_len, *vocab, *batch_size),
        DataSource::SyntheticLm {
            n_tokens,
            vocab,
            seq_len,
            batch_size,
        } => {
            let chain = MarkovChain::dirichlet(
                &mut Rng::new(derive_seed(seed, stream::LM_CHAIN)),
                *vocab,
                0.3,
            )?;
            let stream = chain.sample(&mut rng, *n_tokens);
            let mut ds = lm_dataset_from_stream(&stream, *seq_len, *batch_size)?;
            ds.perplexity_floor = Some(chain.perplexity_floor());
            Ok(ds)
        }
        DataSource::Text {
            path,
            seq_len,
            batch_size,
        } => ingest_text(path, *seq_len, *batch_size),
        DataSource::Labeled {
            path,
            seq_len,
            batch_size,
        } => ingest_labeled(path, *seq_len, *batch_size),
        DataSource::Dataset { path } => read_json(path),
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Path {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Path {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Path {
        path: dir.to_path_buf(),
        source,
    })
}

/// The datasets a run needs.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Option<Dataset>,
    pub eval: Dataset,
    pub calibration: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let train = cfg
        .data
        .train
        .as_ref()
        .map(|s| load_source(s, cfg.seed, Split::Train))
        .transpose()?;
    let eval = load_source(&cfg.data.eval, cfg.seed, Split::Eval)?;
    let calibration = match &cfg.data.calibration {
        Some(s) => load_source(s, cfg.seed, Split::Calibration)?,
        None => train.as_ref().unwrap_or(&eval).clone(),
    }
    .take(cfg.params.calibration_samples)?;
    Ok(RunData {
        train,
        eval,
        calibration,
    })
}

/// Train a fresh model from the recipe with the run's child seeds.
pub fn train_model(
    recipe: &TrainRecipe,
    train_data: &Dataset,
    seed: u64,
) -> Result<(TransformerModel, TrainLog)> {
    let mut model = TransformerModel::init(
        recipe.config,
        &mut Rng::new(derive_seed(seed, stream::INIT)),
    )?;
    let log = train(
        &mut model,
        train_data,
        recipe.epochs,
        recipe.lr,
        &mut Rng::new(derive_seed(seed, stream::SHUFFLE)),
    )?;
    Ok((model, log))
}

/// The run's model: loaded from its path, trained fresh, or (when `reuse`
/// is set) read back from a `model.mpqw` a previous `train` left in the
/// output directory.
pub fn obtain_model(cfg: &RunConfig, data: &RunData, reuse: bool) -> Result<TransformerModel> {
    match &cfg.model {
        ModelSource::Path(p) => WeightContainer::load(p)?.to_model(),
        ModelSource::Train(recipe) => {
            let cached = cfg.output_dir().join(MODEL_FILE);
            if reuse && cached.exists() {
                let model = WeightContainer::load(&cached)?.to_model()?;
                if *model.config() == recipe.config {
                    log::info!("reusing {}", cached.display());
                    return Ok(model);
                }
            }
            let train_data = data
                .train
                .as_ref()
                .ok_or_else(|| Error::Config("training the model requires data.train".into()))?;
            let (model, log) = train_model(recipe, train_data, cfg.seed)?;
            if let Some(last) = log.last() {
                log::info!(
                    "trained {} epochs, final loss {:.4}",
                    recipe.epochs,
                    last.loss
                );
            }
            Ok(model)
        }
    }
}

pub fn analyze(
    cfg: &RunConfig,
    model: &TransformerModel,
    data: &RunData,
    base_metric: Option<Metric>,
) -> Result<SensitivityProfile> {
    let p = &cfg.params;
    match cfg.method {
        Method::Cmpq => cmpq(model, &data.calibration, p.cca_dim_cap),
        Method::Pmpq => pmpq(
            model,
            &data.eval,
            &PmpqConfig {
                sparsity_levels: p.sparsity_levels.clone(),
                execution: p.pmpq_execution,
                base_metric,
            },
        ),
        Method::Tdmpq => tdmpq(
            model,
            &data.eval,
            &PerturbationSpec::new(p.delta, derive_seed(cfg.seed, stream::PERTURB))?,
            p.tdmpq_mode,
        ),
    }
}

pub fn allocate(
    cfg: &RunConfig,
    model: &TransformerModel,
    profile: &SensitivityProfile,
) -> Result<PrecisionPlan> {
    match cfg.allocator {
        AllocatorConfig::Kmeans => kmeans_plan(
            profile,
            &mut Rng::new(derive_seed(cfg.seed, stream::KMEANS)),
        ),
        AllocatorConfig::Budgeted {
            budget_bytes,
            solver,
        } => budgeted_plan(profile, model, budget_bytes, solver),
        AllocatorConfig::Uniform { bits } => {
            let mut plan = PrecisionPlan::uniform(model.n_layers(), bits);
            plan.method = Some(profile.method);
            Ok(plan)
        }
    }
}

/// CRC-32 of the model's fp32 container bytes.
pub fn model_fingerprint(model: &TransformerModel) -> Result<String> {
    Ok(format!(
        "{:08x}",
        crc32fast::hash(&WeightContainer::from_model(model).to_bytes()?)
    ))
}

/// CRC-32 over a dataset's tokens and targets.
pub fn data_fingerprint(data: &Dataset) -> String {
    let mut h = crc32fast::Hasher::new();
    for b in &data.batches {
        for t in b.tokens.iter().chain(&b.targets) {
            h.update(&t.to_le_bytes());
        }
    }
    format!("{:08x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub method: Method,
    pub allocator: String,
    pub sensitivities: Vec<f64>,
    pub plan: Vec<u8>,
    pub m_o_bytes: u64,
    pub m_q_bytes: u64,
    pub cr: f64,
    pub fpr_percent: f64,
    /// `accuracy` or `perplexity`.
    pub metric: String,
    pub base_metric: f64,
    pub quant_metric: f64,
    /// Accuracy drop `base - quant`, or perplexity drop `quant - base`.
    pub drop: f64,
    pub segment_stats: SegmentStats,
    pub objective: ObjectiveValue,
    pub lambda: f64,
    pub model_fingerprint: String,
    pub eval_fingerprint: String,
    pub config: RunConfig,
}

impl QuantReport {
    /// The cross-field identities every report satisfies.
    pub fn check(&self) -> Result<()> {
        let fpr = 100.0 * (1.0 - 1.0 / self.cr);
        if (fpr - self.fpr_percent).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "fpr {} disagrees with cr {}",
                self.fpr_percent, self.cr
            )));
        }
        let drop = match self.metric.as_str() {
            "accuracy" => self.base_metric - self.quant_metric,
            _ => self.quant_metric - self.base_metric,
        };
        if drop != self.drop {
            return Err(Error::domain("drop disagrees with the stored metrics"));
        }
        if self.plan.len() != self.sensitivities.len() {
            return Err(Error::domain("plan and sensitivities differ in length"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: TransformerModel,
    pub profile: SensitivityProfile,
    pub plan: PrecisionPlan,
    pub container: WeightContainer,
    pub memory: MemoryReport,
    pub report: QuantReport,
}

fn metric_name(m: &Metric) -> &'static str {
    match m {
        Metric::Accuracy(_) => "accuracy",
        Metric::Perplexity(_) => "perplexity",
    }
}

/// Analyze, allocate, quantize and evaluate an already obtained model.
pub fn run_with(cfg: &RunConfig, model: TransformerModel, data: &RunData) -> Result<RunOutput> {
    let base = model.evaluate(&data.eval).stage("evaluate")?;
    let profile = analyze(cfg, &model, data, Some(base)).stage("analyze")?;
    let plan = allocate(cfg, &model, &profile).stage("allocate")?;
    let (container, simulated) = apply_plan(&model, &plan).stage("quantize")?;
    let memory =
        memory_report(&WeightContainer::from_model(&model), &container).stage("quantize")?;
    let quant = simulated.evaluate(&data.eval).stage("evaluate")?;
    let objective_cfg = ObjectiveConfig {
        lambda: cfg.params.lambda,
    };
    let obj = objective(&model, &plan, &objective_cfg, &data.eval).stage("evaluate")?;
    let segments = segment_stats(&profile.scores).stage("report")?;
    let report = QuantReport {
        schema_version: REPORT_SCHEMA_VERSION,
        toolkit_version: crate::VERSION.to_string(),
        method: profile.method,
        allocator: cfg.allocator.label(),
        sensitivities: profile.scores.clone(),
        plan: plan.bit_widths(),
        m_o_bytes: memory.m_o_bytes,
        m_q_bytes: memory.m_q_bytes,
        cr: memory.cr,
        fpr_percent: memory.fpr_percent,
        metric: metric_name(&base).to_string(),
        base_metric: base.value(),
        quant_metric: quant.value(),
        drop: base.drop_to(&quant).stage("report")?,
        segment_stats: segments,
        objective: obj,
        lambda: cfg.params.lambda,
        model_fingerprint: model_fingerprint(&model).stage("report")?,
        eval_fingerprint: data_fingerprint(&data.eval),
        config: cfg.clone(),
    };
    Ok(RunOutput {
        model,
        profile,
        plan,
        container,
        memory,
        report,
    })
}

/// Full pipeline without touching the filesystem (beyond reading inputs).
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate().stage("config")?;
    let data = load_data(cfg).stage("data")?;
    let model = obtain_model(cfg, &data, false).stage("model")?;
    run_with(cfg, model, &data)
}

/// Write a run's artifacts into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    WeightContainer::from_model(&out.model).save(dir.join(MODEL_FILE))?;
    out.container.save(dir.join(QUANTIZED_FILE))?;
    write_json(&dir.join(PROFILE_FILE), &out.profile)?;
    write_json(&dir.join(PLAN_FILE), &out.plan)?;
    std::fs::write(dir.join(REPORT_FILE), out.report.to_json()?).map_err(|source| Error::Path {
        path: dir.join(REPORT_FILE),
        source,
    })
}

/// Run the whole pipeline and write every artifact to the configured
/// output directory.
pub fn run(cfg: &RunConfig) -> Result<QuantReport> {
    let out = execute(cfg)?;
    write_outputs(&out, &cfg.output_dir()).stage("write")?;
    Ok(out.report)
}

/// Output directory paths of a config.
pub fn artifact(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir().join(name)
}

pub fn ensure_output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    ensure_dir(&dir)?;
    Ok(dir)
}
