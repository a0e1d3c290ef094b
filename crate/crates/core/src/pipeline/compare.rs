use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::model::TransformerModel;
use crate::sensitivity::Method;

use super::{load_data, obtain_model, run_with, write_outputs, QuantReport, RunConfig};

/// `{"runs": [RunConfig, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub runs: Vec<RunConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub allocator: String,
    pub metric: String,
    pub base_metric: f64,
    pub quant_metric: f64,
    pub drop: f64,
    pub cr: f64,
    pub fpr_percent: f64,
    pub plan: Vec<u8>,
}

impl From<&QuantReport> for ComparisonRow {
    fn from(r: &QuantReport) -> Self {
        Self {
            method: r.method,
            allocator: r.allocator.clone(),
            metric: r.metric.clone(),
            base_metric: r.base_metric,
            quant_metric: r.quant_metric,
            drop: r.drop,
            cr: r.cr,
            fpr_percent: r.fpr_percent,
            plan: r.plan.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_fingerprint: String,
    pub eval_fingerprint: String,
    /// Sorted by method name, then allocator label.
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Aligned text table.
    pub fn table(&self) -> String {
        let header = [
            "method",
            "allocator",
            "metric",
            "base",
            "quant",
            "drop",
            "cr",
            "plan",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.method.to_string(),
                r.allocator.clone(),
                r.metric.clone(),
                format!("{:.4}", r.base_metric),
                format!("{:.4}", r.quant_metric),
                format!("{:.4}", r.drop),
                format!("{:.3}", r.cr),
                r.plan
                    .iter()
                    .map(|b| b.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    if c < 3 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Run every config and tabulate the results. All runs must use the same
/// model and evaluation data. Runs with the same seed, model source and
/// training data share one trained model. When `write` is set each run's
/// artifacts go to its own output directory.
pub fn compare(cfg: &CompareConfig, write: bool) -> Result<(Comparison, Vec<QuantReport>)> {
    if cfg.runs.is_empty() {
        return Err(Error::Comparison("no runs to compare".into()));
    }
    let mut models: HashMap<String, TransformerModel> = HashMap::new();
    let mut reports = Vec::with_capacity(cfg.runs.len());
    for run in &cfg.runs {
        run.validate().stage("config")?;
        let data = load_data(run).stage("data")?;
        let key = serde_json::to_string(&(run.seed, &run.model, &run.data.train))?;
        let model = match models.get(&key) {
            Some(m) => m.clone(),
            None => {
                let m = obtain_model(run, &data, false).stage("model")?;
                models.insert(key, m.clone());
                m
            }
        };
        let out = run_with(run, model, &data)?;
        if write {
            write_outputs(&out, &run.output_dir()).stage("write")?;
        }
        reports.push(out.report);
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.model_fingerprint != first.model_fingerprint {
            return Err(Error::Comparison("runs use different models".into()));
        }
        if r.eval_fingerprint != first.eval_fingerprint {
            return Err(Error::Comparison(
                "runs use different evaluation data".into(),
            ));
        }
    }
    let mut rows: Vec<ComparisonRow> = reports.iter().map(ComparisonRow::from).collect();
    rows.sort_by(|a, b| {
        a.method
            .name()
            .cmp(b.method.name())
            .then_with(|| a.allocator.cmp(&b.allocator))
    });
    Ok((
        Comparison {
            model_fingerprint: first.model_fingerprint.clone(),
            eval_fingerprint: first.eval_fingerprint.clone(),
            rows,
        },
        reports,
    ))
}
