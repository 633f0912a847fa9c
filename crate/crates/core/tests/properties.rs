//! Property-based invariants.

mod common;

use common::*;
use lcfl_core::clustering::{self, ClusterAssignment, KMedoidsConfig, Linkage, StopRule};
use lcfl_core::data::ClientDataset;
use lcfl_core::fed;
use lcfl_core::metrics::{self, DistanceMatrix, MetricKind};
use lcfl_core::model::{self, ModelKind, ModelSpec, ParamVector};
use lcfl_core::seed;
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = ModelKind> {
    prop_oneof![Just(ModelKind::LinearRegression), Just(ModelKind::Softmax), Just(ModelKind::Mlp)]
}

fn instance(kind: ModelKind, n: usize, seed_v: u64) -> (ModelSpec, Vec<ClientDataset>, Vec<ParamVector>) {
    let mut rng = seed::rng(seed_v, &[]);
    let spec = random_spec(kind, &mut rng);
    let data = (0..n).map(|i| random_dataset(&spec, i, 8, &mut rng)).collect();
    let params = (0..n).map(|_| random_params(&spec, 1.0, &mut rng)).collect();
    (spec, data, params)
}

fn matrix_strategy() -> impl Strategy<Value = DistanceMatrix> {
    (2usize..9, any::<u64>()).prop_map(|(n, s)| random_planar_matrix(n, &mut seed::rng(s, &[])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_gap_axioms(kind in kind_strategy(), n in 2usize..8, s in any::<u64>()) {
        let (spec, data, params) = instance(kind, n, s);
        let refs: Vec<&ClientDataset> = data.iter().collect();
        let dm = metrics::loss_gap_matrix(&spec, &refs, &params).unwrap();
        for i in 0..n {
            prop_assert_eq!(dm.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(dm.get(i, j), dm.get(j, i));
                prop_assert!(dm.get(i, j) >= 0.0 && dm.get(i, j).is_finite());
            }
        }
    }

    #[test]
    fn loss_gap_is_permutation_equivariant(n in 2usize..7, s in any::<u64>(), rot in 0usize..7) {
        let (spec, data, params) = instance(ModelKind::Softmax, n, s);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let refs: Vec<&ClientDataset> = data.iter().collect();
        let dm = metrics::loss_gap_matrix(&spec, &refs, &params).unwrap();
        let prefs: Vec<&ClientDataset> = perm.iter().map(|&p| &data[p]).collect();
        let pparams: Vec<ParamVector> = perm.iter().map(|&p| params[p].clone()).collect();
        let pdm = metrics::loss_gap_matrix(&spec, &prefs, &pparams).unwrap();
        let expected = dm.permuted(&perm);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(pdm.get(i, j), expected.get(i, j));
            }
        }
    }

    #[test]
    fn softmax_row_shift_leaves_losses_unchanged(s in any::<u64>(), scale in 0.0f64..5.0) {
        let mut rng = seed::rng(s, &[]);
        let spec = random_spec(ModelKind::Softmax, &mut rng);
        let data = random_dataset(&spec, 0, 10, &mut rng);
        let w = random_params(&spec, 1.0, &mut rng);
        let phi: Vec<f64> = (0..=spec.input_dim).map(|i| scale * ((i as f64) - 0.5)).collect();
        let shifted = w.shift_class_rows(&phi).unwrap();
        let a = model::loss(&spec, &w, &data).unwrap();
        let b = model::loss(&spec, &shifted, &data).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn k_medoids_is_scale_invariant(dm in matrix_strategy(), k in 1usize..4, factor in 0.01f64..100.0) {
        prop_assume!(k <= dm.size());
        let cfg = KMedoidsConfig::new(k);
        let a = clustering::k_medoids(&dm, &cfg, 3).unwrap();
        let b = clustering::k_medoids(&dm.scaled(factor), &cfg, 3).unwrap();
        prop_assert_eq!(clustering::ari_labels(&a.labels, &b.labels), 1.0);
    }

    #[test]
    fn k_medoids_objective_never_increases(dm in matrix_strategy(), k in 1usize..4) {
        prop_assume!(k <= dm.size());
        let initial: Vec<usize> = (0..k).collect();
        let run = clustering::k_medoids_from(&dm, &initial, 100).unwrap();
        for w in run.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert_eq!(run.assignment.num_clusters, k);
    }

    #[test]
    fn agglomerative_cluster_count(dm in matrix_strategy(), k in 1usize..5, link in 0usize..3) {
        prop_assume!(k <= dm.size());
        let linkage = [Linkage::Single, Linkage::Complete, Linkage::Average][link];
        let a = clustering::agglomerative(&dm, linkage, StopRule::NumClusters(k)).unwrap();
        prop_assert_eq!(a.assignment.num_clusters, k);
        prop_assert_eq!(a.merges.len(), dm.size() - k);
        if linkage != Linkage::Average {
            for w in a.merges.windows(2) {
                prop_assert!(w[1].distance >= w[0].distance);
            }
        }
    }

    #[test]
    fn dbscan_labels_are_consistent(dm in matrix_strategy(), eps in 0.5f64..6.0, min_pts in 1usize..4) {
        let a = clustering::dbscan(&dm, eps, min_pts).unwrap();
        prop_assert_eq!(a.len(), dm.size());
        for i in 0..a.len() {
            prop_assert!(a.is_noise(i) || a.labels[i] < a.num_clusters);
        }
        if min_pts == 1 {
            prop_assert_eq!(a.num_noise(), 0);
        }
    }

    #[test]
    fn ari_is_symmetric_and_bounded(a in prop::collection::vec(0usize..4, 2..30), s in any::<u64>()) {
        let mut rng = seed::rng(s, &[]);
        let b: Vec<usize> = a.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let ab = clustering::ari_labels(&a, &b);
        prop_assert!((ab - clustering::ari_labels(&b, &a)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert_eq!(clustering::ari_labels(&a, &a), 1.0);
        let relabeled: Vec<usize> = a.iter().map(|v| 7 - v).collect();
        prop_assert_eq!(clustering::ari_labels(&a, &relabeled), 1.0);
        prop_assert_eq!(ClusterAssignment::from_labels(&a).num_clusters, {
            let mut u = a.clone();
            u.sort_unstable();
            u.dedup();
            u.len()
        });
    }

    #[test]
    fn participants_are_sorted_distinct_and_counted(n in 1usize..80, rate in 0.01f64..1.0, s in any::<u64>(), round in 0usize..50) {
        let p = fed::sample_participants(n, rate, s, round, 0);
        let want = ((rate * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        prop_assert_eq!(p.len(), want);
        prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.iter().all(|&i| i < n));
    }

    #[test]
    fn weighted_average_of_copies_is_exact(s in any::<u64>(), copies in 1usize..6) {
        let mut rng = seed::rng(s, &[]);
        let spec = ModelSpec::mlp(3, vec![4], 3);
        let w = random_params(&spec, 10.0, &mut rng);
        let items: Vec<(&ParamVector, usize)> = (0..copies).map(|i| (&w, i * 7 + 1)).collect();
        prop_assert_eq!(fed::weighted_average(&items).unwrap(), w);
    }

    #[test]
    fn distance_csv_round_trips(dm in matrix_strategy()) {
        let mut buf = Vec::new();
        dm.write_csv(&mut buf).unwrap();
        let back = DistanceMatrix::read_csv(buf.as_slice(), MetricKind::LossGap).unwrap();
        prop_assert_eq!(back, dm);
    }
}
