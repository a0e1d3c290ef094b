#![allow(dead_code)]

use std::sync::OnceLock;

use mpquant::model::{gen_classification, train, Dataset, ModelConfig, TaskHead, TransformerModel};
use mpquant::pipeline::RunConfig;
use mpquant::tensor::Rng;

pub const DESK_SEED: u64 = 7;

pub fn desk_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 16,
        max_seq_len: 16,
        task_head: TaskHead::Classification { n_classes: 2 },
    }
}

pub fn tiny_config(task_head: TaskHead) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_seq_len: 6,
        task_head,
    }
}

pub struct Desk {
    pub model: TransformerModel,
    pub eval: Dataset,
    pub calib: Dataset,
}

/// The desk classifier trained for a few epochs with seed 7, shared by every
/// test in one binary.
pub fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let mut rng = Rng::new(DESK_SEED);
        let train_set = gen_classification(&mut rng, 1000, 16, 16, 32).unwrap();
        let eval = gen_classification(&mut rng, 200, 16, 16, 50).unwrap();
        let calib = train_set.take(128).unwrap();
        let mut model = TransformerModel::init(desk_config(), &mut rng).unwrap();
        train(&mut model, &train_set, 3, 3e-3, &mut rng).unwrap();
        Desk { model, eval, calib }
    })
}

/// A randomly initialized model (not trained).
pub fn random_model(cfg: ModelConfig, seed: u64) -> TransformerModel {
    TransformerModel::init(cfg, &mut Rng::new(seed)).unwrap()
}

/// The pinned end-to-end desk configuration.
pub fn desk_run_config(method: &str, allocator: &str) -> RunConfig {
    let text = format!(
        r#"{{
        "seed": 7,
        "model": {{"train": {{"config": {{"n_layers": 4, "d_model": 32, "n_heads": 4, "d_ff": 64,
            "vocab_size": 16, "max_seq_len": 16, "task_head": {{"kind": "classification", "n_classes": 2}}}},
            "epochs": 12, "lr": 0.003}}}},
        "data": {{
            "train": {{"kind": "synthetic_classification", "n": 2000, "seq_len": 16, "vocab": 16, "batch_size": 32}},
            "eval": {{"kind": "synthetic_classification", "n": 500, "seq_len": 16, "vocab": 16, "batch_size": 50}}
        }},
        "method": "{method}",
        "allocator": {allocator},
        "params": {{"calibration_samples": 128}}
    }}"#
    );
    RunConfig::from_json(&text).unwrap()
}
