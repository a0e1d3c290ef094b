use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mpquant::allocate::PrecisionPlan;
use mpquant::error::{Error, Result};
use mpquant::model_io::{memory_report, MemoryReport, WeightContainer};
use mpquant::pipeline::{
    self, artifact, ensure_output_dir, load_data, load_source, read_json, write_json,
    CompareConfig, ModelSource, RunConfig, Split, EVAL_REPORT_FILE, MODEL_FILE, PLAN_FILE,
    PROFILE_FILE, QUANTIZED_FILE, REPORT_FILE, TRAIN_LOG_FILE,
};
use mpquant::quant::apply_plan;
use mpquant::sensitivity::SensitivityProfile;

#[derive(Parser)]
#[command(
    name = "mpquant",
    version,
    about = "Sensitivity-guided mixed-precision weight quantization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write model.mpqw.
    Train(Common),
    /// Materialize the configured datasets as JSON files.
    GenData(Common),
    /// Compute the sensitivity profile.
    Analyze(Common),
    /// Turn profile.json into plan.json.
    Plan(Common),
    /// Quantize the model under plan.json.
    Quantize(Common),
    /// Compare the model against quantized.mpqw on the eval data.
    Eval(Common),
    /// Run every stage and write report.json.
    Run(Common),
    /// Run several configs (`{"runs": [...]}`) and tabulate them.
    Compare(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn model_for(cfg: &RunConfig) -> Result<(mpquant::model::TransformerModel, pipeline::RunData)> {
    let data = load_data(cfg).map_err(|e| e.in_stage("data"))?;
    let model = pipeline::obtain_model(cfg, &data, true).map_err(|e| e.in_stage("model"))?;
    Ok((model, data))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )))
    }
}

#[derive(Serialize)]
struct EvalSummary {
    metric: String,
    base_metric: f64,
    quant_metric: f64,
    drop: f64,
    memory: MemoryReport,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let ModelSource::Train(recipe) = &cfg.model else {
                return Err(Error::Config(
                    "model source is a path; nothing to train".into(),
                ));
            };
            let data = load_data(&cfg).map_err(|e| e.in_stage("data"))?;
            let train_data = data.train.as_ref().expect("validated");
            let (model, log) = pipeline::train_model(recipe, train_data, cfg.seed)
                .map_err(|e| e.in_stage("train"))?;
            ensure_output_dir(&cfg)?;
            WeightContainer::from_model(&model).save(artifact(&cfg, MODEL_FILE))?;
            write_json(&artifact(&cfg, TRAIN_LOG_FILE), &log)?;
            let metric = model.evaluate(&data.eval)?;
            println!("trained {} epochs; eval {:?}", recipe.epochs, metric);
        }
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let dir = ensure_output_dir(&cfg)?;
            let sources = [
                (Split::Train, cfg.data.train.as_ref()),
                (Split::Eval, Some(&cfg.data.eval)),
                (Split::Calibration, cfg.data.calibration.as_ref()),
            ];
            for (split, source) in sources {
                if let Some(s) = source {
                    let ds = load_source(s, cfg.seed, split).map_err(|e| e.in_stage("data"))?;
                    let path = dir.join(split.file_name());
                    write_json(&path, &ds)?;
                    println!("{}: {} sequences", path.display(), ds.n_samples);
                }
            }
        }
        Command::Analyze(c) => {
            let cfg = load_config(&c)?;
            let (model, data) = model_for(&cfg)?;
            let profile =
                pipeline::analyze(&cfg, &model, &data, None).map_err(|e| e.in_stage("analyze"))?;
            ensure_output_dir(&cfg)?;
            write_json(&artifact(&cfg, PROFILE_FILE), &profile)?;
            print_json(&profile.scores)?;
        }
        Command::Plan(c) => {
            let cfg = load_config(&c)?;
            let path = artifact(&cfg, PROFILE_FILE);
            require(&path, "analyze")?;
            let profile: SensitivityProfile = read_json(&path)?;
            let (model, _) = model_for(&cfg)?;
            let plan =
                pipeline::allocate(&cfg, &model, &profile).map_err(|e| e.in_stage("allocate"))?;
            write_json(&artifact(&cfg, PLAN_FILE), &plan)?;
            print_json(&plan.bit_widths())?;
        }
        Command::Quantize(c) => {
            let cfg = load_config(&c)?;
            let path = artifact(&cfg, PLAN_FILE);
            require(&path, "plan")?;
            let plan: PrecisionPlan = read_json(&path)?;
            let (model, _) = model_for(&cfg)?;
            let (container, _) = apply_plan(&model, &plan).map_err(|e| e.in_stage("quantize"))?;
            container.save(artifact(&cfg, QUANTIZED_FILE))?;
            print_json(&memory_report(
                &WeightContainer::from_model(&model),
                &container,
            )?)?;
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let path = artifact(&cfg, QUANTIZED_FILE);
            require(&path, "quantize")?;
            let container = WeightContainer::load(&path)?;
            let (model, data) = model_for(&cfg)?;
            let base = model
                .evaluate(&data.eval)
                .map_err(|e| e.in_stage("evaluate"))?;
            let quant = container
                .to_model()?
                .evaluate(&data.eval)
                .map_err(|e| e.in_stage("evaluate"))?;
            let summary = EvalSummary {
                metric: match base {
                    mpquant::model::Metric::Accuracy(_) => "accuracy".into(),
                    mpquant::model::Metric::Perplexity(_) => "perplexity".into(),
                },
                base_metric: base.value(),
                quant_metric: quant.value(),
                drop: base.drop_to(&quant)?,
                memory: memory_report(&WeightContainer::from_model(&model), &container)?,
            };
            write_json(&artifact(&cfg, EVAL_REPORT_FILE), &summary)?;
            print_json(&summary)?;
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let report = pipeline::run(&cfg)?;
            println!("{}", artifact(&cfg, REPORT_FILE).display());
            println!(
                "{} {}: {} {:.4} -> {:.4} (drop {:.4}), cr {:.3}, plan {:?}",
                report.method,
                report.allocator,
                report.metric,
                report.base_metric,
                report.quant_metric,
                report.drop,
                report.cr,
                report.plan
            );
        }
        Command::Compare(c) => {
            let text = std::fs::read_to_string(&c.config).map_err(|source| Error::Path {
                path: c.config.clone(),
                source,
            })?;
            let mut cmp: CompareConfig =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let out = c
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(pipeline::DEFAULT_OUTPUT_DIR));
            for (i, run) in cmp.runs.iter_mut().enumerate() {
                if let Some(seed) = c.seed {
                    run.seed = seed;
                }
                if c.out.is_some() || run.output_dir.is_none() {
                    run.output_dir = Some(out.join(format!("run{i}")));
                }
            }
            let (table, _) = pipeline::compare(&cmp, true)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("comparison.json"), &table)?;
            std::fs::write(out.join("comparison.txt"), table.table())?;
            print!("{}", table.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
