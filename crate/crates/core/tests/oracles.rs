//! Library results checked against independent computations in test code.

#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use lcfl_core::bounds::{self, PopulationSpec};
use lcfl_core::clustering::{self, ClusterAssignment, KMedoidsConfig, Linkage, Merge, NoiseHandling, StopRule, NOISE};
use lcfl_core::data::{ClientDataset, Targets};
use lcfl_core::metrics::{self, DistanceMatrix, MetricKind};
use lcfl_core::model::{self, ModelKind, ModelSpec, ParamVector};
use lcfl_core::seed;
use lcfl_core::trainer;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn library_loss_matches_naive_forward_pass() {
    let mut rng = seed::rng(1, &[]);
    for kind in [ModelKind::LinearRegression, ModelKind::Softmax, ModelKind::Mlp] {
        for _ in 0..10 {
            let spec = random_spec(kind, &mut rng);
            let data = random_dataset(&spec, 0, 17, &mut rng);
            let w = random_params(&spec, 1.0, &mut rng);
            let got = model::loss(&spec, &w, &data).unwrap();
            let want = oracle_loss(&spec, &w, &data);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{kind:?}: {got} vs {want}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = seed::rng(2, &[]);
    for kind in [ModelKind::LinearRegression, ModelKind::Softmax, ModelKind::Mlp] {
        let spec = random_spec(kind, &mut rng);
        let data = random_dataset(&spec, 0, 25, &mut rng);
        let w = random_params(&spec, 0.8, &mut rng);
        let g = model::full_gradient(&spec, &w, &data).unwrap();
        let h = 1e-5;
        for c in 0..spec.num_params() {
            let mut plus = w.clone();
            plus.values_mut()[c] += h;
            let mut minus = w.clone();
            minus.values_mut()[c] -= h;
            let fd = (oracle_loss(&spec, &plus, &data) - oracle_loss(&spec, &minus, &data)) / (2.0 * h);
            let gc = g.values()[c];
            assert!((fd - gc).abs() <= 1e-6 * gc.abs().max(1.0), "{kind:?} coord {c}: {gc} vs {fd}");
        }
    }
}

#[test]
fn closed_form_solves_the_normal_equations() {
    let mut rng = seed::rng(3, &[]);
    let spec = ModelSpec::linear(3);
    let data = random_dataset(&spec, 0, 40, &mut rng);
    let w = trainer::closed_form_linear(&data).unwrap();
    // the gradient of the empirical loss vanishes at the minimizer
    let g = model::full_gradient(&spec, &w, &data).unwrap();
    assert!(g.norm() < 1e-10, "gradient norm {}", g.norm());
    // and perturbing any coordinate raises the loss
    let base = oracle_loss(&spec, &w, &data);
    for c in 0..4 {
        let mut p = w.clone();
        p.values_mut()[c] += 1e-3;
        assert!(oracle_loss(&spec, &p, &data) > base);
    }
}

#[test]
fn k_medoids_reaches_the_brute_force_optimum() {
    let mut rng = seed::rng(4, &[]);
    let mut hits = 0;
    for t in 0..50 {
        let n = rng.random_range(4..=10);
        let k = rng.random_range(1..=3);
        let dm = random_planar_matrix(n, &mut rng);
        let run = clustering::k_medoids_best(&dm, &KMedoidsConfig::new(k), t).unwrap();
        let best = brute_force_medoid_objective(&dm, k);
        assert!(run.objective >= best - 1e-9);
        if (run.objective - best).abs() <= 1e-9 * best.max(1.0) {
            hits += 1;
        }
    }
    assert!(hits >= 45, "{hits}/50");
}

fn line_matrix(xs: &[f64]) -> DistanceMatrix {
    let rows: Vec<Vec<f64>> = xs.iter().map(|a| xs.iter().map(|b| (a - b).abs()).collect()).collect();
    DistanceMatrix::from_rows(&rows, MetricKind::LossGap).unwrap()
}

fn merge(left: usize, right: usize, distance: f64, size: usize) -> Merge {
    Merge { left, right, distance, size }
}

#[test]
fn agglomerative_matches_hand_traced_dendrograms() {
    // points 0, 1, 4, 10, 12, 20 on a line
    let dm = line_matrix(&[0.0, 1.0, 4.0, 10.0, 12.0, 20.0]);
    let single = clustering::agglomerative(&dm, Linkage::Single, StopRule::NumClusters(1)).unwrap();
    assert_eq!(
        single.merges,
        [merge(0, 1, 1.0, 2), merge(3, 4, 2.0, 2), merge(0, 2, 3.0, 3), merge(0, 3, 6.0, 5), merge(0, 5, 8.0, 6)]
    );
    let complete = clustering::agglomerative(&dm, Linkage::Complete, StopRule::NumClusters(1)).unwrap();
    assert_eq!(
        complete.merges,
        [merge(0, 1, 1.0, 2), merge(3, 4, 2.0, 2), merge(0, 2, 4.0, 3), merge(3, 5, 10.0, 3), merge(0, 3, 20.0, 6)]
    );
    let average = clustering::agglomerative(&dm, Linkage::Average, StopRule::NumClusters(2)).unwrap();
    assert_eq!(average.merges.len(), 4);
    assert_eq!(average.merges[2], merge(0, 2, 3.5, 3));
    assert_eq!((average.merges[3].left, average.merges[3].right), (3, 5));
    assert!((average.merges[3].distance - 9.0).abs() < 1e-12);
    assert_eq!(average.assignment.labels, [0, 0, 0, 1, 1, 1]);
    let full = clustering::agglomerative(&dm, Linkage::Average, StopRule::NumClusters(1)).unwrap();
    assert!((full.merges[4].distance - 111.0 / 9.0).abs() < 1e-12);
    let cut = clustering::agglomerative(&dm, Linkage::Single, StopRule::Threshold(2.5)).unwrap();
    assert_eq!(cut.assignment.labels, [0, 0, 1, 2, 2, 3]);
}

#[test]
fn dbscan_separates_two_blocks_and_an_outlier() {
    let mut rows = vec![vec![0.0; 7]; 7];
    for i in 0..7 {
        for j in 0..7 {
            rows[i][j] = match (i, j) {
                _ if i == j => 0.0,
                (6, _) | (_, 6) => 10.0,
                _ if (i < 3) == (j < 3) => 1.0,
                _ => 5.0,
            };
        }
    }
    let dm = DistanceMatrix::from_rows(&rows, MetricKind::LossGap).unwrap();
    let a = clustering::dbscan(&dm, 1.5, 3).unwrap();
    assert_eq!(a.num_clusters, 2);
    assert_eq!(&a.labels[..6], &[0, 0, 0, 1, 1, 1]);
    assert_eq!(a.labels[6], NOISE);
    assert!(a.is_noise(6));
}

#[test]
fn ari_matches_contingency_oracle() {
    let mut rng = seed::rng(5, &[]);
    for _ in 0..200 {
        let n = rng.random_range(2..30);
        let ka = rng.random_range(1..5);
        let kb = rng.random_range(1..5);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let got = clustering::ari_labels(&a, &b);
        let want = oracle_ari(&a, &b);
        assert!((got - want).abs() < 1e-12, "{a:?} {b:?}: {got} vs {want}");
        let pred = ClusterAssignment::from_labels(&a);
        assert!((clustering::adjusted_rand_index(&pred, &b, NoiseHandling::Singletons).unwrap() - want).abs() < 1e-12);
    }
    // 2x2 table [[2, 1], [0, 2]] by hand: index 1+1 = 2, rows 3+1 = 4,
    // columns 1+3 = 4, expected 16/10, max 4, ARI = 0.4 / 2.4
    let a = [0, 0, 0, 1, 1];
    let b = [0, 0, 1, 1, 1];
    assert!((clustering::ari_labels(&a, &b) - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn protocol_assembly_equals_pairwise_definition() {
    let mut rng = seed::rng(6, &[]);
    let spec = ModelSpec::softmax(3, 4);
    let data: Vec<ClientDataset> = (0..6).map(|i| random_dataset(&spec, i, 20, &mut rng)).collect();
    let params: Vec<ParamVector> = (0..6).map(|_| random_params(&spec, 1.0, &mut rng)).collect();
    let refs: Vec<&ClientDataset> = data.iter().collect();
    let dm = metrics::loss_gap_matrix(&spec, &refs, &params).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let l = |a: usize, b: usize| oracle_loss(&spec, &params[b], &data[a]);
            let want = if i == j { 0.0 } else { (l(i, i) - l(i, j)).abs() + (l(j, i) - l(j, j)).abs() };
            assert!((dm.get(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn expected_linear_loss_matches_monte_carlo() {
    let mut rng = seed::rng(7, &[]);
    let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let beta = [0.7, -1.2];
    let sxy = (&sigma * nalgebra::DVector::from_column_slice(&beta)).as_slice().to_vec();
    let noise_var = 0.25;
    let pop = PopulationSpec::centered(&sigma, sxy, noise_var).unwrap();
    let spec = ModelSpec::linear(2);
    let w = ParamVector::from_values(&spec, vec![0.1, 0.3, 0.2]).unwrap();
    let exact = bounds::expected_linear_loss(&pop, &w).unwrap();
    // E[(w^T x + b - y)^2] with x ~ N(0, Sigma), y = beta^T x + noise
    let chol = sigma.clone().cholesky().unwrap().l();
    let n = 400_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z = nalgebra::DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
        let x = &chol * z;
        let e: f64 = StandardNormal.sample(&mut rng);
        let y = beta[0] * x[0] + beta[1] * x[1] + noise_var.sqrt() * e;
        total += (0.1 * x[0] + 0.3 * x[1] + 0.2 - y).powi(2);
    }
    let mc = total / n as f64;
    assert!((mc - exact).abs() < 0.01 * exact, "{mc} vs {exact}");
    // closed form: (w - beta)^T Sigma (w - beta) + b^2 + noise
    let dw = nalgebra::DVector::from_column_slice(&[0.1 - beta[0], 0.3 - beta[1]]);
    let analytic = (dw.transpose() * &sigma * &dw)[0] + 0.04 + noise_var;
    assert!((exact - analytic).abs() < 1e-12);
}

#[test]
fn truncated_variance_matches_monte_carlo() {
    let mut rng = seed::rng(8, &[]);
    for (dim, radius) in [(2usize, 1.5f64), (3, 3.0)] {
        let c = bounds::truncated_variance(dim, radius).unwrap();
        let (mut kept, mut sq) = (0usize, 0.0);
        while kept < 200_000 {
            let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 <= radius * radius {
                kept += 1;
                sq += x[0] * x[0];
            }
        }
        let mc = sq / kept as f64;
        assert!((mc - c).abs() < 0.01, "dim {dim} R {radius}: {mc} vs {c}");
    }
}

#[test]
fn sgd_approaches_the_closed_form_optimum() {
    let mut rng = seed::rng(9, &[]);
    let spec = ModelSpec::linear(2);
    let m = 100;
    let features: Vec<f64> = (0..m * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..m)
        .map(|i| 1.5 * features[2 * i] - 0.5 * features[2 * i + 1] + 0.3 + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let data = ClientDataset::new(0, 2, features, Targets::Regression(y)).unwrap();
    let w_star = trainer::closed_form_linear(&data).unwrap();
    let cfg = trainer::TrainConfig { init_lr: 0.05, lr_decay: 0.9, batch_size: 10, local_epochs: 2 };
    let mut w = ParamVector::zeros(&spec);
    for round in 0..60 {
        w = trainer::local_sgd(&spec, &w, &data, &cfg, round, 1).unwrap();
    }
    let gap = oracle_loss(&spec, &w, &data) - oracle_loss(&spec, &w_star, &data);
    assert!((0.0..1e-3).contains(&gap), "gap {gap}");
}
