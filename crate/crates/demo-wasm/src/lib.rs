//! Browser demo: client distance matrices and cluster recovery, the softmax
//! shift that fools parameter distances, and the loss-gap sandwich bound.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no bindings beyond `wasm-bindgen`'s string glue.

use lcfl_core::bounds::{self, PopulationSpec};
use lcfl_core::clustering::{self, KMedoidsConfig, NoiseHandling};
use lcfl_core::data::{ClientDataset, FederationSpec, Generator, LinearFamily, Targets};
use lcfl_core::harness;
use lcfl_core::metrics::{self, MetricKind};
use lcfl_core::model::{ModelSpec, ParamVector};

use lcfl_core::seed;
use lcfl_core::trainer::{InitMode, WarmupConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Serialize)]
struct ClusterView {
    metric: &'static str,
    matrix: Vec<Vec<f64>>,
    truth: Vec<usize>,
    predicted: Vec<usize>,
    ari: f64,
}

/// Warm up a linear federation with `k` slope clusters and recover them with
/// k-medoids on the chosen metric (`loss-gap`, `param-norm`, `grad-cosine`).
#[wasm_bindgen]
pub fn cluster_demo(
    num_clients: usize,
    k: usize,
    separation: f64,
    noise_std: f64,
    warmup_steps: usize,
    metric: &str,
    seed_v: u64,
) -> Result<String, String> {
    let metric = match metric {
        "loss-gap" => MetricKind::LossGap,
        "param-norm" => MetricKind::ParamNorm,
        "grad-cosine" => MetricKind::GradCosine,
        other => return Err(format!("unknown metric `{other}`")),
    };
    if k == 0 || k > num_clients {
        return Err(format!("k = {k} must lie in [1, {num_clients}]"));
    }
    // cluster c gets slope direction at angle 2 pi c / k, scaled by `separation`
    let sigma_xy = (0..k)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / k as f64;
            vec![separation * a.cos(), separation * a.sin(), 0.2]
        })
        .collect();
    let mut cfg = harness::profile("linear-k2").ok_or("missing linear profile")?;
    cfg.federation = FederationSpec {
        num_clients,
        seed: seed_v,
        normalize: false,
        train_fraction: 0.8,
        generator: Generator::LinearFamily(LinearFamily { sigma_xy, sigma_xx: None, m_per_client: 40, noise_std }),
    };
    if let Some(l) = cfg.lcfl.as_mut() {
        l.warmup = WarmupConfig { steps: warmup_steps, step_size: 0.1, init: InitMode::Shared };
    }
    let dm = harness::warmup_matrix(&cfg, seed_v, metric).map_err(err)?;
    let truth = cfg.federation.build(seed_v).map_err(err)?.true_labels().ok_or("no ground truth")?;
    let assignment = clustering::k_medoids(&dm, &KMedoidsConfig::new(k), seed_v).map_err(err)?;
    let ari = clustering::adjusted_rand_index(&assignment, &truth, NoiseHandling::Singletons).map_err(err)?;
    to_json(&ClusterView {
        metric: metric.name(),
        matrix: (0..dm.size()).map(|i| dm.row(i).to_vec()).collect(),
        truth,
        predicted: assignment.labels,
        ari,
    })
}

#[derive(Serialize)]
struct ShiftView {
    loss_gap: f64,
    param_norm: f64,
    expected_param_norm: f64,
    loss_before: f64,
    loss_after: f64,
}

/// Subtract the same vector of norm `phi_norm` from every class row of a
/// random softmax model and compare the two client distances.
#[wasm_bindgen]
pub fn softmax_shift_demo(dim: usize, num_classes: usize, phi_norm: f64, seed_v: u64) -> Result<String, String> {
    if dim == 0 || num_classes < 2 {
        return Err("need dim >= 1 and at least 2 classes".into());
    }
    let spec = ModelSpec::softmax(dim, num_classes);
    let mut rng = seed::rng(seed_v, &[seed::stream::TRIAL]);
    let w = ParamVector::random(&spec, &mut rng);
    let mut phi: Vec<f64> = (0..=dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = phi.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    phi.iter_mut().for_each(|v| *v *= phi_norm / n);
    let w_shift = w.shift_class_rows(&phi).map_err(err)?;
    let data = [random_dataset(0, dim, num_classes, &mut rng)?, random_dataset(1, dim, num_classes, &mut rng)?];
    let refs: Vec<&ClientDataset> = data.iter().collect();
    let gap = metrics::loss_gap_matrix(&spec, &refs, &[w.clone(), w_shift.clone()]).map_err(err)?;
    to_json(&ShiftView {
        loss_gap: gap.get(0, 1),
        param_norm: w.distance(&w_shift).map_err(err)?,
        expected_param_norm: (num_classes as f64).sqrt() * phi_norm,
        loss_before: lcfl_core::model::loss(&spec, &w, &data[0]).map_err(err)?,
        loss_after: lcfl_core::model::loss(&spec, &w_shift, &data[0]).map_err(err)?,
    })
}

fn random_dataset<R: Rng>(id: usize, dim: usize, num_classes: usize, rng: &mut R) -> Result<ClientDataset, String> {
    let m = 30;
    let features = (0..m * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..m).map(|_| rng.random_range(0..num_classes)).collect();
    ClientDataset::new(id, dim, features, Targets::Classes { labels, num_classes }).map_err(err)
}

#[derive(Serialize)]
struct SandwichView {
    lower: f64,
    gap: f64,
    upper: f64,
    holds: bool,
}

/// Two centered 2-d populations with `Sigma_XX = R diag(l_min, l_max) R^T`
/// (rotation by `angle`) whose `Sigma_Xy` differ by `(dx, dy)`.
#[wasm_bindgen]
pub fn sandwich_demo(lambda_min: f64, lambda_max: f64, angle: f64, dx: f64, dy: f64) -> Result<String, String> {
    if !(lambda_min > 0.0 && lambda_max >= lambda_min) {
        return Err("need 0 < lambda_min <= lambda_max".into());
    }
    let (s, c) = angle.sin_cos();
    let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let sigma = &r * DMatrix::from_diagonal(&DVector::from_vec(vec![lambda_min, lambda_max])) * r.transpose();
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let base = vec![0.3, -0.2];
    let pop = PopulationSpec::centered(&sigma, base.clone(), 0.1).map_err(err)?;
    let pop_hat = PopulationSpec::centered(&sigma, vec![base[0] + dx, base[1] + dy], 0.1).map_err(err)?;
    let b = bounds::loss_gap_sandwich(&pop, &pop_hat).map_err(err)?;
    to_json(&SandwichView { lower: b.lower, gap: b.gap, upper: b.upper, holds: b.holds(1e-8) })
}
