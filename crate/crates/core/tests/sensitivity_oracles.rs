mod common;

use mpquant::model::compute::forward_f64;
use mpquant::model::{Component, Dataset, TaskHead, TransformerModel};
use mpquant::sensitivity::{
    cca_rho1, cmpq, pmpq, prune_mask, segment_stats, tdmpq, Execution, PerturbationSpec,
    PmpqConfig, SegmentStats, TdmpqMode,
};
use mpquant::tensor::{derive_seed, Rng, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random_matrix(rng: &mut Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.normal())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)] as f32))
        .collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).unwrap()
}

/// Round a matrix through f32 so the oracle sees exactly what the tensor holds.
fn as_stored(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v as f32 as f64)
}

/// ρ₁ from the generalized eigenproblem `Cxy Cyy⁻¹ Cyx w = ρ² Cxx w`,
/// reduced to a symmetric problem through the Cholesky factor of `Cxx`.
/// Same centering and ridge as the analyzer.
fn oracle_rho1(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows() as f64;
    let center = |m: &DMatrix<f64>| {
        let mut c = m.clone();
        for j in 0..c.ncols() {
            let mean = c.column(j).mean();
            c.column_mut(j).add_scalar_mut(-mean);
        }
        c
    };
    let (xc, yc) = (center(x), center(y));
    let cov = |a: &DMatrix<f64>| {
        let mut c = a.transpose() * a / (n - 1.0);
        let ridge = 1e-6 * c.trace() / a.ncols() as f64;
        for i in 0..a.ncols() {
            c[(i, i)] += ridge;
        }
        c
    };
    let cxx = cov(&xc);
    let cyy = cov(&yc);
    let cxy = xc.transpose() * &yc / (n - 1.0);
    let m = &cxy * cyy.try_inverse().unwrap() * cxy.transpose();
    let l = cxx.cholesky().unwrap().l();
    let l_inv = l.try_inverse().unwrap();
    let sym = &l_inv * m * l_inv.transpose();
    let sym = (&sym + sym.transpose()) / 2.0;
    let top = sym.symmetric_eigen().eigenvalues.max();
    top.max(0.0).sqrt().min(1.0)
}

#[test]
fn cca_matches_generalized_eigen_oracle() {
    let mut rng = Rng::new(100);
    for i in 0..50 {
        let x = random_matrix(&mut rng, 200, 4);
        let mut y = random_matrix(&mut rng, 200, 4);
        if i % 2 == 1 {
            // Half the instances share signal so ρ₁ spans the range.
            let mix = 0.1 * (i % 10) as f64;
            y = &y * (1.0 - mix) + x.columns(0, 4) * mix;
        }
        let got = cca_rho1(&to_tensor(&x), &to_tensor(&y)).unwrap().rho1;
        let want = oracle_rho1(&as_stored(&x), &as_stored(&y));
        assert!((got - want).abs() <= 1e-6, "instance {i}: {got} vs {want}");
    }
}

#[test]
fn cca_self_and_invariances() {
    let mut rng = Rng::new(101);
    let x = random_matrix(&mut rng, 120, 5);
    let y = random_matrix(&mut rng, 120, 3);
    let tx = to_tensor(&x);
    assert!((cca_rho1(&tx, &tx).unwrap().rho1 - 1.0).abs() <= 1e-6);

    let a = DMatrix::<f64>::identity(5, 5) + random_matrix(&mut rng, 5, 5) * 0.3;
    assert!(a.determinant().abs() > 0.1);
    let xa = to_tensor(&(&x * &a));
    assert!((cca_rho1(&tx, &xa).unwrap().rho1 - 1.0).abs() <= 1e-5);

    let base = cca_rho1(&tx, &to_tensor(&y)).unwrap().rho1;
    let transformed = cca_rho1(&xa, &to_tensor(&y)).unwrap().rho1;
    assert!((base - transformed).abs() <= 1e-5);

    let perm = [3usize, 0, 4, 1, 2];
    let xp = DMatrix::from_fn(120, 5, |i, j| x[(i, perm[j])]);
    let permuted = cca_rho1(&to_tensor(&xp), &to_tensor(&y)).unwrap().rho1;
    assert!((base - permuted).abs() <= 1e-9);
}

// ---------------------------------------------------------------------------
// CMPQ

#[test]
fn cmpq_matches_full_precision_recomputation() {
    let desk = common::desk();
    let model = &desk.model;
    let cfg = model.config();
    let profile = cmpq(model, &desk.calib, 64).unwrap();

    let params = model.params_f64();
    let mut feats: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_layers];
    for b in &desk.calib.batches {
        let (_, outs) = forward_f64(cfg, &params, b, true).unwrap();
        for (f, o) in feats.iter_mut().zip(outs.unwrap()) {
            f.extend(o);
        }
    }
    let mats: Vec<DMatrix<f64>> = feats
        .iter()
        .map(|f| DMatrix::from_row_slice(f.len() / cfg.d_model, cfg.d_model, f))
        .collect();
    let l_total = cfg.n_layers;
    for l in 0..l_total {
        let mean: f64 = (0..l_total)
            .filter(|&m| m != l)
            .map(|m| oracle_rho1(&mats[l], &mats[m]))
            .sum::<f64>()
            / (l_total - 1) as f64;
        let want = 1.0 - mean;
        assert!(
            (profile.scores[l] - want).abs() <= 1e-5,
            "layer {l}: {} vs {want}",
            profile.scores[l]
        );
    }
}

/// A model whose blocks add nothing: every layer outputs its input.
fn passthrough_model(n_layers: usize) -> TransformerModel {
    let cfg = mpquant::model::ModelConfig {
        n_layers,
        ..common::desk_config()
    };
    let mut model = common::random_model(cfg, 3);
    let layout = model.layout();
    for l in 0..n_layers {
        for c in [Component::AttnOut, Component::FfnOut] {
            let idx = layout.layer(l, c);
            let shape = model.tensor(idx).shape().to_vec();
            model.set_tensor(idx, Tensor::zeros(&shape)).unwrap();
        }
    }
    model
}

#[test]
fn cmpq_passthrough_layers_score_zero() {
    let model = passthrough_model(4);
    let calib = common::desk().calib.take(32).unwrap();
    let profile = cmpq(&model, &calib, 64).unwrap();
    for s in &profile.scores {
        assert!(s.abs() <= 1e-5, "{s}");
    }
}

#[test]
fn cmpq_two_layers_are_symmetric() {
    let cfg = mpquant::model::ModelConfig {
        n_layers: 2,
        ..common::desk_config()
    };
    let model = common::random_model(cfg, 4);
    let profile = cmpq(&model, &common::desk().calib, 64).unwrap();
    assert_eq!(profile.scores[0], profile.scores[1]);
}

#[test]
fn cmpq_single_layer_is_degenerate() {
    let cfg = mpquant::model::ModelConfig {
        n_layers: 1,
        ..common::desk_config()
    };
    let model = common::random_model(cfg, 5);
    assert_eq!(
        cmpq(&model, &common::desk().calib, 64).unwrap().scores,
        vec![0.0]
    );
}

// ---------------------------------------------------------------------------
// PMPQ

#[test]
fn pmpq_sequential_equals_parallel() {
    let desk = common::desk();
    let seq = PmpqConfig {
        execution: Execution::Sequential,
        ..PmpqConfig::default()
    };
    let par = PmpqConfig {
        execution: Execution::LayerParallel,
        ..PmpqConfig::default()
    };
    let a = pmpq(&desk.model, &desk.eval, &seq).unwrap();
    let b = pmpq(&desk.model, &desk.eval, &par).unwrap();
    assert_eq!(a, b);
    assert!(a.scores.iter().all(|&s| s >= 0.0));
}

#[test]
fn pmpq_ignores_eval_duplication() {
    let desk = common::desk();
    let mut doubled = desk.eval.clone();
    doubled.batches.extend(desk.eval.batches.clone());
    doubled.n_samples *= 2;
    let cfg = PmpqConfig::default();
    let a = pmpq(&desk.model, &desk.eval, &cfg).unwrap();
    let b = pmpq(&desk.model, &doubled, &cfg).unwrap();
    assert_eq!(a.scores, b.scores);
}

#[test]
fn pmpq_zero_layer_scores_zero() {
    let desk = common::desk();
    let mut model = desk.model.clone();
    let layout = model.layout();
    for idx in layout.layer_matrices(1) {
        let shape = model.tensor(idx).shape().to_vec();
        model.set_tensor(idx, Tensor::zeros(&shape)).unwrap();
    }
    let profile = pmpq(&model, &desk.eval, &PmpqConfig::default()).unwrap();
    assert_eq!(profile.scores[1], 0.0);
}

#[test]
fn pmpq_zero_sparsity_on_already_zero_minima() {
    let desk = common::desk();
    let mut model = desk.model.clone();
    let layout = model.layout();
    for l in 0..model.n_layers() {
        for idx in layout.layer_matrices(l) {
            model.tensor_mut(idx).data_mut()[0] = 0.0;
        }
    }
    let cfg = PmpqConfig {
        sparsity_levels: vec![0.0],
        ..PmpqConfig::default()
    };
    let profile = pmpq(&model, &desk.eval, &cfg).unwrap();
    assert!(profile.scores.iter().all(|&s| s == 0.0));
}

#[test]
fn prune_mask_worked_example() {
    let w = Tensor::from_vec(vec![0.1, -0.5, 0.3, -0.05]).unwrap();
    let m = prune_mask(&w, 0.5).unwrap();
    assert_eq!(m.mask.data(), &[0.0, 1.0, 1.0, 0.0]);
    assert!((m.threshold - 0.2).abs() < 1e-7);
}

proptest! {
    #[test]
    fn prune_fraction_within_one_element(n in 2usize..200, s in 0.0f64..0.99, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let data = order.iter().map(|&i| (i as f32 + 1.0) * if rng.below(2) == 0 { 1.0 } else { -1.0 }).collect();
        let m = prune_mask(&Tensor::from_vec(data).unwrap(), s).unwrap();
        let z = m.zero_fraction();
        prop_assert!(m.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!((z - s).abs() <= 1.0 / n as f64 + 1e-12, "zeros {z} target {s}");
    }
}

// ---------------------------------------------------------------------------
// TDMPQ

/// Loss total of a separately materialized perturbed model.
fn materialized_scores(
    model: &TransformerModel,
    eval: &Dataset,
    delta: f64,
    seed: u64,
) -> Vec<f64> {
    let n = eval.batches.len() as f64;
    let base: f64 = eval.batches.iter().map(|b| model.loss(b).unwrap()).sum();
    (0..model.n_layers())
        .map(|l| {
            let idx = model.layout().layer(l, Component::AttnQ);
            let w = model.tensor(idx);
            let vals = w.to_f64();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std =
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            let sigma = delta * std;
            let mut rng = Rng::new(derive_seed(seed, l as u64));
            let noisy: Vec<f32> = vals
                .iter()
                .map(|&v| (v + sigma * rng.normal()) as f32)
                .collect();
            let mut perturbed = model.clone();
            perturbed
                .set_tensor(idx, Tensor::new(w.shape().to_vec(), noisy).unwrap())
                .unwrap();
            let tv: f64 = eval
                .batches
                .iter()
                .map(|b| perturbed.loss(b).unwrap())
                .sum();
            (tv - base).abs() / n
        })
        .collect()
}

#[test]
fn tdmpq_matches_independent_materialization() {
    let desk = common::desk();
    let spec = PerturbationSpec::new(0.01, common::DESK_SEED).unwrap();
    let profile = tdmpq(&desk.model, &desk.eval, &spec, TdmpqMode::Delta).unwrap();
    let want = materialized_scores(&desk.model, &desk.eval, 0.01, common::DESK_SEED);
    for (g, w) in profile.scores.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12 + 1e-9 * w.abs(), "{g} vs {w}");
    }
}

#[test]
fn tdmpq_zero_delta() {
    let desk = common::desk();
    let spec = PerturbationSpec::new(0.0, 1).unwrap();
    let delta = tdmpq(&desk.model, &desk.eval, &spec, TdmpqMode::Delta).unwrap();
    assert!(delta.scores.iter().all(|&s| s == 0.0));
    let literal = tdmpq(&desk.model, &desk.eval, &spec, TdmpqMode::Literal).unwrap();
    let base: f64 = desk
        .eval
        .batches
        .iter()
        .map(|b| desk.model.loss(b).unwrap())
        .sum::<f64>()
        / desk.eval.batches.len() as f64;
    assert!(literal.scores.iter().all(|&s| s == literal.scores[0]));
    assert!((literal.scores[0] - base).abs() <= 1e-12);
}

#[test]
fn tdmpq_shrinks_with_delta() {
    let desk = common::desk();
    let run = |delta: f64| {
        tdmpq(
            &desk.model,
            &desk.eval,
            &PerturbationSpec::new(delta, 7).unwrap(),
            TdmpqMode::Delta,
        )
        .unwrap()
        .scores
    };
    let (s4, s3, s2) = (run(1e-4), run(1e-3), run(1e-2));
    for l in 0..s2.len() {
        assert!(
            s4[l] <= s3[l] && s3[l] <= s2[l],
            "layer {l}: {} {} {}",
            s4[l],
            s3[l],
            s2[l]
        );
    }
    let max4 = s4.iter().copied().fold(0.0, f64::max);
    let max2 = s2.iter().copied().fold(0.0, f64::max);
    assert!(max4 <= 0.05 * max2 + 1e-12);
}

#[test]
fn analyzers_leave_model_untouched() {
    let desk = common::desk();
    let before = desk.model.clone();
    cmpq(&desk.model, &desk.calib, 64).unwrap();
    pmpq(&desk.model, &desk.eval, &PmpqConfig::default()).unwrap();
    tdmpq(
        &desk.model,
        &desk.eval,
        &PerturbationSpec::new(0.01, 7).unwrap(),
        TdmpqMode::Delta,
    )
    .unwrap();
    assert!(desk.model.bit_eq(&before));
}

#[test]
fn analyzers_are_deterministic() {
    let desk = common::desk();
    let spec = PerturbationSpec::new(0.01, 9).unwrap();
    assert_eq!(
        cmpq(&desk.model, &desk.calib, 16).unwrap(),
        cmpq(&desk.model, &desk.calib, 16).unwrap()
    );
    assert_eq!(
        tdmpq(&desk.model, &desk.eval, &spec, TdmpqMode::Delta).unwrap(),
        tdmpq(&desk.model, &desk.eval, &spec, TdmpqMode::Delta).unwrap()
    );
}

#[test]
fn lm_profiles_are_finite_and_nonnegative() {
    let cfg = common::tiny_config(TaskHead::LanguageModel);
    let model = common::random_model(cfg, 8);
    let data = mpquant::model::gen_lm(&mut Rng::new(8), 300, 12, 6, 10).unwrap();
    let p = pmpq(&model, &data, &PmpqConfig::default()).unwrap();
    let t = tdmpq(
        &model,
        &data,
        &PerturbationSpec::new(0.01, 8).unwrap(),
        TdmpqMode::Delta,
    )
    .unwrap();
    for s in p.scores.iter().chain(&t.scores) {
        assert!(s.is_finite() && *s >= 0.0);
    }
}

// ---------------------------------------------------------------------------
// segments

#[test]
fn segment_stats_fixtures() {
    let s = segment_stats(&[0.0, 0.0, 3.0]).unwrap();
    assert_eq!(s.values(), [Some(1.0), Some(1.0), Some(2.0)]);
    let c = segment_stats(&[0.4; 7]).unwrap();
    assert!(c.values().iter().all(|v| v.unwrap() <= 1e-15));
    let four = segment_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(four.rest, None);
    let json = serde_json::to_string(&four).unwrap();
    assert!(!json.contains("rest"));
    let one = segment_stats(&[5.0]).unwrap();
    assert_eq!(
        one,
        SegmentStats {
            first30: Some(0.0),
            mid30: None,
            rest: None
        }
    );
}
