mod common;

use std::path::Path;
use std::process::Command;

use mpquant::model::Metric;
use mpquant::model_io::WeightContainer;
use mpquant::pipeline::{
    compare, execute, export_labeled, ingest_labeled, ingest_text, parse_labeled, run,
    write_outputs, CompareConfig, QuantReport, RunConfig, PAD_TOKEN, QUANTIZED_FILE, REPORT_FILE,
};
use mpquant::Error;

/// A two-layer classifier that trains in about a second.
fn small_config_json(method: &str, allocator: &str, out: &Path) -> String {
    format!(
        r#"{{
        "seed": 3,
        "model": {{"train": {{"config": {{"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
            "vocab_size": 16, "max_seq_len": 8, "task_head": {{"kind": "classification", "n_classes": 2}}}},
            "epochs": 3, "lr": 0.003}}}},
        "data": {{
            "train": {{"kind": "synthetic_classification", "n": 300, "seq_len": 8, "vocab": 16, "batch_size": 32}},
            "eval": {{"kind": "synthetic_classification", "n": 100, "seq_len": 8, "vocab": 16, "batch_size": 25}}
        }},
        "method": "{method}",
        "allocator": {allocator},
        "params": {{"calibration_samples": 64}},
        "output_dir": {out:?}
    }}"#
    )
}

fn small_config(method: &str, allocator: &str, out: &Path) -> RunConfig {
    RunConfig::from_json(&small_config_json(method, allocator, out)).unwrap()
}

// ---------------------------------------------------------------------------
// ingest

#[test]
fn text_ingest_examples() {
    let dir = tempfile::tempdir().unwrap();
    let ab = dir.path().join("ab.txt");
    std::fs::write(&ab, "ab").unwrap();
    let ds = ingest_text(&ab, 1, 4).unwrap();
    assert_eq!(ds.examples(), vec![(vec![97], vec![98])]);

    let n = dir.path().join("n.txt");
    std::fs::write(&n, "hello world").unwrap();
    let ds = ingest_text(&n, 10, 4).unwrap();
    assert_eq!(ds.n_samples, 1);
    assert_eq!(ds, ingest_text(&n, 10, 4).unwrap());

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert!(ingest_text(&empty, 4, 1).is_err());
    assert!(matches!(
        ingest_text(dir.path().join("missing"), 4, 1),
        Err(Error::Path { .. })
    ));
}

#[test]
fn labeled_ingest_examples() {
    let ds = parse_labeled(b"0\tgood film\n1\tbad\n", 6, 8).unwrap();
    assert_eq!(ds.n_samples, 2);
    assert_eq!(ds.examples()[1].0[3..], [PAD_TOKEN; 3]);
    match parse_labeled(b"2\tfoo\n", 4, 1) {
        Err(Error::Parse { line: 1, .. }) => {}
        other => panic!("expected a parse error at line 1, got {other:?}"),
    }
    match parse_labeled(b"1\tok\nno tab here\n", 4, 1) {
        Err(Error::Parse { line: 2, .. }) => {}
        other => panic!("expected a parse error at line 2, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.tsv");
    std::fs::write(&src, "1\tthe plot\n0\tdull\n1\tfun fun\n").unwrap();
    let ds = ingest_labeled(&src, 16, 2).unwrap();
    let dst = dir.path().join("out.tsv");
    export_labeled(&ds, &dst).unwrap();
    let back = ingest_labeled(&dst, 16, 2).unwrap();
    assert_eq!(back, ds);
    let labels: Vec<u32> = back.examples().iter().map(|(_, y)| y[0]).collect();
    assert_eq!(labels, [1, 0, 1]);
}

// ---------------------------------------------------------------------------
// config

#[test]
fn config_rejects_unknown_keys_and_missing_seed() {
    let dir = tempfile::tempdir().unwrap();
    let good = small_config_json("cmpq", r#"{"kind": "kmeans"}"#, dir.path());
    assert!(RunConfig::from_json(&good).is_ok());
    let extra = good.replacen("\"seed\": 3,", "\"seed\": 3, \"colour\": 1,", 1);
    assert!(matches!(
        RunConfig::from_json(&extra),
        Err(Error::Config(_))
    ));
    let no_seed = good.replacen("\"seed\": 3,", "", 1);
    assert!(matches!(
        RunConfig::from_json(&no_seed),
        Err(Error::Config(_))
    ));
    let bad_path = good.replacen(
        r#"{"kind": "synthetic_classification", "n": 100, "seq_len": 8, "vocab": 16, "batch_size": 25}"#,
        r#"{"kind": "labeled", "path": "/nonexistent.tsv", "seq_len": 8, "batch_size": 4}"#,
        1,
    );
    assert!(RunConfig::from_json(&bad_path).is_err());
}

// ---------------------------------------------------------------------------
// run

#[test]
fn run_is_deterministic_and_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_config("pmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("a"));
    let b = small_config("pmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("b"));
    let ra = run(&a).unwrap();
    run(&b).unwrap();
    let ja = std::fs::read(dir.path().join("a").join(REPORT_FILE)).unwrap();
    let jb = std::fs::read(dir.path().join("b").join(REPORT_FILE)).unwrap();
    assert_eq!(ja, jb);

    ra.check().unwrap();
    let parsed: QuantReport = serde_json::from_slice(&ja).unwrap();
    let mut expected = ra.clone();
    expected.config.output_dir = None;
    assert_eq!(parsed, expected);
    let value: serde_json::Value = serde_json::from_slice(&ja).unwrap();
    for key in [
        "method",
        "sensitivities",
        "plan",
        "m_o_bytes",
        "m_q_bytes",
        "cr",
        "fpr_percent",
        "base_metric",
        "quant_metric",
        "drop",
        "segment_stats",
    ] {
        assert!(value.get(key).is_some(), "missing {key}");
    }

    // The stored container re-evaluates to the reported quantized metric.
    let out = execute(&a).unwrap();
    let container = WeightContainer::load(dir.path().join("a").join(QUANTIZED_FILE)).unwrap();
    assert_eq!(container, out.container);
    let data = mpquant::pipeline::load_data(&a).unwrap();
    let metric = container.to_model().unwrap().evaluate(&data.eval).unwrap();
    assert!((metric.value() - ra.quant_metric).abs() <= 1e-6);
}

#[test]
fn report_base_metric_is_shared_with_pmpq() {
    let dir = tempfile::tempdir().unwrap();
    let out = execute(&small_config("pmpq", r#"{"kind": "kmeans"}"#, dir.path())).unwrap();
    match out.profile.config {
        mpquant::sensitivity::AnalysisConfig::Pmpq { base_metric, .. } => {
            assert_eq!(base_metric, Metric::Accuracy(out.report.base_metric));
        }
        other => panic!("unexpected config {other:?}"),
    }
}

#[test]
fn uniform_sixteen_barely_moves_the_desk_model() {
    let cfg = common::desk_run_config("cmpq", r#"{"kind": "uniform", "bits": 16}"#);
    let report = execute(&cfg).unwrap().report;
    assert!(report.drop <= 0.01, "drop {}", report.drop);
    assert_eq!(report.plan, vec![16; 4]);
}

#[test]
fn language_model_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("corpus.txt");
    std::fs::write(
        &text,
        "the quick brown fox jumps over the lazy dog. ".repeat(40),
    )
    .unwrap();
    let json = format!(
        r#"{{
        "seed": 5,
        "model": {{"train": {{"config": {{"n_layers": 3, "d_model": 8, "n_heads": 2, "d_ff": 16,
            "vocab_size": 257, "max_seq_len": 16, "task_head": {{"kind": "language_model"}}}},
            "epochs": 1, "lr": 0.01}}}},
        "data": {{
            "train": {{"kind": "text", "path": {text:?}, "seq_len": 16, "batch_size": 16}},
            "eval": {{"kind": "text", "path": {text:?}, "seq_len": 16, "batch_size": 16}}
        }},
        "method": "tdmpq",
        "output_dir": {:?}
    }}"#,
        dir.path().join("out")
    );
    let report = run(&RunConfig::from_json(&json).unwrap()).unwrap();
    report.check().unwrap();
    assert_eq!(report.metric, "perplexity");
    assert!(report.base_metric.is_finite() && report.quant_metric.is_finite());
}

// ---------------------------------------------------------------------------
// compare

#[test]
fn compare_self_gives_identical_rows_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let runs = vec![
        small_config("tdmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("0")),
        small_config(
            "cmpq",
            r#"{"kind": "uniform", "bits": 8}"#,
            &dir.path().join("1"),
        ),
        small_config("cmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("2")),
        small_config("cmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("3")),
    ];
    let (table, reports) = compare(&CompareConfig { runs }, false).unwrap();
    assert_eq!(reports.len(), 4);
    let keys: Vec<(String, String)> = table
        .rows
        .iter()
        .map(|r| (r.method.to_string(), r.allocator.clone()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let kmeans: Vec<_> = table
        .rows
        .iter()
        .filter(|r| r.method.name() == "cmpq" && r.allocator == "kmeans")
        .collect();
    assert_eq!(kmeans.len(), 2);
    assert_eq!(kmeans[0], kmeans[1]);
    assert!(table.rows.iter().all(|r| r.cr >= 1.0));
    assert!(table.table().lines().count() >= 5);
}

#[test]
fn compare_rejects_different_eval_data() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_config("cmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("a"));
    let mut b = small_config("cmpq", r#"{"kind": "kmeans"}"#, &dir.path().join("b"));
    b.data.eval = mpquant::pipeline::DataSource::SyntheticClassification {
        n: 60,
        seq_len: 8,
        vocab: 16,
        batch_size: 20,
    };
    match compare(&CompareConfig { runs: vec![a, b] }, false) {
        Err(Error::Comparison(_)) => {}
        other => panic!(
            "expected a comparison error, got {:?}",
            other.map(|(t, _)| t)
        ),
    }
}

#[test]
fn write_outputs_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("cmpq", r#"{"kind": "kmeans"}"#, dir.path());
    let out = execute(&cfg).unwrap();
    write_outputs(&out, dir.path()).unwrap();
    for f in [
        "model.mpqw",
        "quantized.mpqw",
        "profile.json",
        "plan.json",
        "report.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

// ---------------------------------------------------------------------------
// CLI

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mpquant"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_stage_verbs_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        small_config_json("tdmpq", r#"{"kind": "kmeans"}"#, &out),
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let early = cli(&["quantize", cfg]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("plan"));

    for verb in ["train", "gen-data", "analyze", "plan", "quantize", "eval"] {
        let o = cli(&[verb, cfg]);
        assert!(
            o.status.success(),
            "{verb}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for f in [
        "model.mpqw",
        "train.json",
        "eval.json",
        "eval_report.json",
        "profile.json",
        "plan.json",
        "quantized.mpqw",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }

    let other = dir.path().join("other");
    let o = cli(&["run", cfg, "--out", other.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(other.join(REPORT_FILE).is_file());
}

#[test]
fn cli_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    std::fs::write(&cfg_path, r#"{"seed": 1, "unexpected": true}"#).unwrap();
    let o = cli(&["run", cfg_path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}
