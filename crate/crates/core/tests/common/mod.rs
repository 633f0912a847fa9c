//! Instance generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use lcfl_core::data::{ClientDataset, ClientSplit, Targets};
use lcfl_core::metrics::{DistanceMatrix, MetricKind};
use lcfl_core::model::{ModelKind, ModelSpec, ParamVector};
use rand::Rng;

pub fn random_spec<R: Rng>(kind: ModelKind, rng: &mut R) -> ModelSpec {
    let dim = rng.random_range(1..=5);
    match kind {
        ModelKind::LinearRegression => ModelSpec::linear(dim),
        ModelKind::Softmax => ModelSpec::softmax(dim, rng.random_range(2..=5)),
        ModelKind::Mlp => ModelSpec::mlp(dim, vec![rng.random_range(2..=6)], rng.random_range(2..=4)),
    }
}

pub fn random_dataset<R: Rng>(spec: &ModelSpec, id: usize, m: usize, rng: &mut R) -> ClientDataset {
    let d = spec.input_dim;
    let features: Vec<f64> = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets = match spec.num_classes {
        None => Targets::Regression((0..m).map(|_| rng.random_range(-3.0..3.0)).collect()),
        Some(k) => Targets::Classes { labels: (0..m).map(|_| rng.random_range(0..k)).collect(), num_classes: k },
    };
    ClientDataset::new(id, d, features, targets).unwrap()
}

pub fn random_params<R: Rng>(spec: &ModelSpec, scale: f64, rng: &mut R) -> ParamVector {
    let values = (0..spec.num_params()).map(|_| rng.random_range(-scale..scale)).collect();
    ParamVector::from_values(spec, values).unwrap()
}

pub fn split(train: ClientDataset, test: ClientDataset) -> ClientSplit {
    ClientSplit { train, test }
}

/// Straight-line forward pass: layer rows are `[weights..., bias]`, tanh on
/// hidden layers.
pub fn oracle_output(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden_dims);
    dims.push(spec.num_classes.unwrap_or(1));
    let mut act = x.to_vec();
    let mut off = 0;
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut next = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &w[off + o * (n_in + 1)..off + (o + 1) * (n_in + 1)];
            let mut z = row[n_in];
            for i in 0..n_in {
                z += row[i] * act[i];
            }
            next.push(if l + 2 < dims.len() { z.tanh() } else { z });
        }
        off += n_out * (n_in + 1);
        act = next;
    }
    act
}

/// Mean squared error or mean cross-entropy, computed naively.
pub fn oracle_loss(spec: &ModelSpec, w: &ParamVector, data: &ClientDataset) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        let out = oracle_output(spec, w.values(), data.row(i));
        total += match &data.targets {
            Targets::Regression(y) => (out[0] - y[i]).powi(2),
            Targets::Classes { labels, .. } => {
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = out.iter().map(|v| (v - max).exp()).sum();
                -(out[labels[i]] - max - z.ln())
            }
        };
    }
    total / data.len() as f64
}

/// Euclidean distances between random points in the plane.
pub fn random_planar_matrix<R: Rng>(n: usize, rng: &mut R) -> DistanceMatrix {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))).collect();
    let rows: Vec<Vec<f64>> =
        pts.iter().map(|a| pts.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect()).collect();
    DistanceMatrix::from_rows(&rows, MetricKind::LossGap).unwrap()
}

/// Minimum over all `k`-subsets of medoids of the summed distance to the
/// nearest medoid.
pub fn brute_force_medoid_objective(dm: &DistanceMatrix, k: usize) -> f64 {
    let n = dm.size();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let meds: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let cost: f64 = (0..n).map(|i| meds.iter().map(|&m| dm.get(i, m)).fold(f64::INFINITY, f64::min)).sum();
        best = best.min(cost);
    }
    best
}

/// Adjusted Rand index from the contingency table, with a
/// one-both-trivial convention of 1 for identical partitions.
pub fn oracle_ari(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    let n = a.len() as f64;
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return if index == max { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}
