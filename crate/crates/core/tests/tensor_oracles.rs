use mpquant::tensor::{
    kmeans_1d, matmul, matmul_f64, quantile, stats, svd_top, symmetric_eigen, Matrix, Rng, Tensor,
};
use mpquant::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.normal() as f32).collect(),
    )
    .unwrap()
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), &t.to_f64())
}

#[test]
fn rng_golden_stream() {
    let mut r = Rng::new(42);
    let got: Vec<u64> = (0..8).map(|_| r.next_u64()).collect();
    assert_eq!(
        got,
        [
            0x15780b2e0c2ec716,
            0x6104d9866d113a7e,
            0xae17533239e499a1,
            0xecb8ad4703b360a1,
            0xfde6dc7fe2ec5e64,
            0xc50da53101795238,
            0xb82154855a65ddb2,
            0xd99a2743ebe60087,
        ]
    );
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = random_tensor(&mut rng, m, k);
        let b = random_tensor(&mut rng, k, n);
        let c = matmul(&a, &b).unwrap();
        let c64 = matmul_f64(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
                assert!((c.data()[i * n + j] as f64 - s).abs() <= 1e-5 * (1.0 + s.abs()));
                assert!((c64[(i, j)] - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }
    let a = random_tensor(&mut rng, 2, 3);
    assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
}

#[test]
fn identity_product() {
    let mut rng = Rng::new(2);
    let a = random_tensor(&mut rng, 5, 5);
    assert!(matmul(&a, &Tensor::identity(5)).unwrap().bit_eq(&a));
}

#[test]
fn quantile_hand_values() {
    let v = Tensor::from_vec(vec![0.5, 0.1, 0.3, 0.05]).unwrap();
    assert!((quantile(&v, 0.5).unwrap() - 0.2).abs() < 1e-7);
    assert_eq!(quantile(&v, 0.0).unwrap(), 0.05f32 as f64);
    assert_eq!(quantile(&v, 1.0).unwrap(), 0.5f32 as f64);
    let ramp = Tensor::from_vec((1..=5).map(|i| i as f32).collect()).unwrap();
    assert_eq!(quantile(&ramp, 0.25).unwrap(), 2.0);
    assert!((quantile(&ramp, 0.1).unwrap() - 1.4).abs() < 1e-12);
}

#[test]
fn stats_match_two_pass() {
    let mut rng = Rng::new(3);
    let data: Vec<f32> = (0..1000)
        .map(|_| (rng.normal() * 3.0 + 1.0) as f32)
        .collect();
    let s = stats(&Tensor::from_vec(data.clone()).unwrap()).unwrap();
    let n = data.len() as f64;
    let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!((s.mean - mean).abs() < 1e-12);
    assert!((s.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(
        s.min,
        data.iter().copied().fold(f32::INFINITY, f32::min) as f64
    );
    assert_eq!(
        s.max,
        data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64
    );
}

#[test]
fn top_singular_value_matches_svd() {
    let mut rng = Rng::new(4);
    for &(r, c) in &[(4, 4), (10, 3), (3, 10), (32, 32)] {
        let a = random_tensor(&mut rng, r, c);
        let oracle = to_dmatrix(&a).singular_values().max();
        let got = svd_top(&a).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
    }
    assert_eq!(svd_top(&Tensor::zeros(&[3, 2])).unwrap(), 0.0);
    let d = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, -5.0]]).unwrap();
    assert!((svd_top(&d).unwrap() - 5.0).abs() < 1e-9);
}

#[test]
fn symmetric_eigen_matches_nalgebra() {
    let mut rng = Rng::new(5);
    for n in [1, 2, 5, 12] {
        let a = random_tensor(&mut rng, n, n);
        let s = to_dmatrix(&a).transpose() * to_dmatrix(&a);
        let m = Matrix::from_vec(n, n, s.transpose().as_slice().to_vec()).unwrap();
        let (vals, vecs) = symmetric_eigen(&m).unwrap();
        let mut oracle: Vec<f64> = s
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (g, o) in vals.iter().zip(&oracle) {
            assert!((g - o).abs() <= 1e-9 * (1.0 + oracle[0]), "{g} vs {o}");
        }
        for k in 0..n {
            let v: Vec<f64> = (0..n).map(|i| vecs[(i, k)]).collect();
            for i in 0..n {
                let av: f64 = (0..n).map(|j| s[(i, j)] * v[j]).sum();
                assert!((av - vals[k] * v[i]).abs() <= 1e-8 * (1.0 + oracle[0]));
            }
        }
    }
}

/// Best partition of sorted 1-D points into `k` contiguous groups by
/// trying every split.
fn exhaustive_sse(sorted: &[f64], k: usize) -> f64 {
    fn sse(g: &[f64]) -> f64 {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        g.iter().map(|x| (x - m).powi(2)).sum()
    }
    let n = sorted.len();
    let mut best = f64::INFINITY;
    if k == 3 {
        for a in 1..n - 1 {
            for b in a + 1..n {
                best = best.min(sse(&sorted[..a]) + sse(&sorted[a..b]) + sse(&sorted[b..]));
            }
        }
    } else {
        for a in 1..n {
            best = best.min(sse(&sorted[..a]) + sse(&sorted[a..]));
        }
    }
    best
}

/// Lloyd fixed point: every point sits with its nearest centroid and every
/// centroid is its cluster mean.
fn assert_fixed_point(pts: &[f64], labels: &[usize], centroids: &[f64]) {
    for (x, &l) in pts.iter().zip(labels) {
        let d = (x - centroids[l]).abs();
        assert!(centroids.iter().all(|c| d <= (x - c).abs() + 1e-12));
    }
    for (c, &m) in centroids.iter().enumerate() {
        let members: Vec<f64> = pts
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(x, _)| *x)
            .collect();
        if !members.is_empty() {
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((mean - m).abs() < 1e-9);
        }
    }
}

#[test]
fn kmeans_is_bounded_by_exhaustive_optimum() {
    let mut rng = Rng::new(6);
    for trial in 0..30 {
        let n = 6 + trial % 10;
        let pts: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut sorted = pts.clone();
        sorted.sort_by(f64::total_cmp);
        for k in [2, 3] {
            let km = kmeans_1d(&pts, k, &mut Rng::new(trial as u64)).unwrap();
            let oracle = exhaustive_sse(&sorted, k);
            assert!(
                km.sse >= oracle - 1e-9,
                "trial {trial} k {k}: {} below optimum {oracle}",
                km.sse
            );
            assert_fixed_point(&pts, &km.labels, &km.centroids);
        }
    }
}

#[test]
fn kmeans_finds_optimum_on_separated_groups() {
    let mut rng = Rng::new(9);
    for trial in 0..30 {
        let pts: Vec<f64> = (0..12)
            .map(|i| (i % 3) as f64 * 10.0 + 0.5 * rng.next_f64())
            .collect();
        let mut sorted = pts.clone();
        sorted.sort_by(f64::total_cmp);
        let km = kmeans_1d(&pts, 3, &mut Rng::new(trial)).unwrap();
        let oracle = exhaustive_sse(&sorted, 3);
        assert!((km.sse - oracle).abs() <= 1e-9 * (1.0 + oracle));
    }
}

#[test]
fn kmeans_history_never_increases() {
    let mut rng = Rng::new(8);
    let pts: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
    let km = kmeans_1d(&pts, 3, &mut Rng::new(1)).unwrap();
    for w in km.sse_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
}

#[test]
fn kmeans_rejects_too_few_distinct() {
    let r = kmeans_1d(&[1.0, 1.0, 2.0, 2.0], 3, &mut Rng::new(0));
    assert!(matches!(
        r,
        Err(Error::DegenerateClustering { distinct: 2, k: 3 })
    ));
}

proptest! {
    #[test]
    fn quantile_is_monotone(values in prop::collection::vec(-100.0f32..100.0, 1..50), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let t = Tensor::from_vec(values).unwrap();
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(quantile(&t, lo).unwrap() <= quantile(&t, hi).unwrap());
    }

    #[test]
    fn transpose_is_involution(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let t = random_tensor(&mut Rng::new(seed), rows, cols);
        prop_assert!(t.transpose().unwrap().transpose().unwrap().bit_eq(&t));
    }

    #[test]
    fn below_is_in_range(seed in any::<u64>(), n in 1u64..1000) {
        let mut r = Rng::new(seed);
        for _ in 0..20 {
            prop_assert!(r.below(n) < n);
        }
    }
}
