//! Federated optimization: FedAvg, the clustered pipeline, IFCA and a
//! local-only baseline.
//!
//! Every engine evaluates all clients after each global iteration and
//! produces a [`RunLog`] with one [`RoundRecord`] per iteration. Accuracy is
//! the unweighted mean of per-client test accuracy unless
//! [`FedConfig::weighted_accuracy`] is set.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterAssignment, KMedoidsConfig, Linkage, StopRule};
use crate::data::{ClientDataset, ClientSplit};
use crate::metrics::{self, DistanceMatrix, MetricKind};
use crate::model::{self, ModelSpec, ParamVector};
use crate::seed::{self, stream};
use crate::trainer::{self, TrainConfig, WarmupConfig};
use crate::{parallel, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub participation_rate: f64,
    pub global_iterations: usize,
    pub train: TrainConfig,
    pub seed: u64,
    /// Weight per-client accuracy by test-split size.
    #[serde(default)]
    pub weighted_accuracy: bool,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config("fed.participation_rate", "must lie in (0, 1]"));
        }
        if self.global_iterations == 0 {
            return Err(Error::config("fed.global_iterations", "must be positive"));
        }
        self.train.validate().map_err(|e| e.in_section("fed"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based global iteration.
    pub iteration: usize,
    /// `None` for regression models.
    pub accuracy_mean: Option<f64>,
    pub accuracy_std_over_clients: Option<f64>,
    pub train_loss_mean: f64,
    pub test_loss_mean: f64,
    pub num_clusters: usize,
    pub cluster_sizes: Vec<usize>,
    /// Clients left out of the means (local-only divergence).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
    pub wall_clock_secs: f64,
}

impl RunLog {
    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }
}

/// Per-client evaluation after a round.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ClientEval {
    accuracy: Option<f64>,
    train_loss: f64,
    test_loss: f64,
    test_size: usize,
}

fn eval_client(spec: &ModelSpec, w: &ParamVector, split: &ClientSplit) -> Result<ClientEval> {
    Ok(ClientEval {
        accuracy: if spec.is_classifier() { Some(model::accuracy(spec, w, &split.test)?) } else { None },
        train_loss: model::loss(spec, w, &split.train)?,
        test_loss: model::loss(spec, w, &split.test)?,
        test_size: split.test.len(),
    })
}

fn record(iteration: usize, evals: &[Option<ClientEval>], cluster_sizes: Vec<usize>, weighted: bool) -> RoundRecord {
    let excluded: Vec<usize> = evals.iter().enumerate().filter(|(_, e)| e.is_none()).map(|(i, _)| i).collect();
    let live: Vec<&ClientEval> = evals.iter().flatten().collect();
    let n = live.len() as f64;
    let mean = |f: &dyn Fn(&ClientEval) -> f64| live.iter().map(|e| f(e)).sum::<f64>() / n;
    let (accuracy_mean, accuracy_std_over_clients) = if live.iter().all(|e| e.accuracy.is_some()) && !live.is_empty() {
        let accs: Vec<f64> = live.iter().map(|e| e.accuracy.unwrap_or(0.0)).collect();
        let plain = accs.iter().sum::<f64>() / n;
        let m = if weighted {
            let total: f64 = live.iter().map(|e| e.test_size as f64).sum();
            live.iter().zip(&accs).map(|(e, a)| a * e.test_size as f64).sum::<f64>() / total
        } else {
            plain
        };
        let var = accs.iter().map(|a| (a - plain).powi(2)).sum::<f64>() / n;
        (Some(m), Some(var.sqrt()))
    } else {
        (None, None)
    };
    RoundRecord {
        iteration,
        accuracy_mean,
        accuracy_std_over_clients,
        train_loss_mean: mean(&|e| e.train_loss),
        test_loss_mean: mean(&|e| e.test_loss),
        num_clusters: cluster_sizes.iter().filter(|&&s| s > 0).count(),
        cluster_sizes,
        excluded,
    }
}

struct Timer {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Timer {
    fn start() -> Self {
        Timer {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// `ceil(rate * n)` distinct positions in `0..n`, sorted. Seeded by the round
/// and the group's first client id so each group draws independently.
pub fn sample_participants(n: usize, rate: f64, seed_v: u64, round: usize, group_key: usize) -> Vec<usize> {
    let count = ((rate * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = seed::rng(seed_v, &[stream::PARTICIPATION, round as u64, group_key as u64]);
    let mut picked = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Sample-count weighted mean, accumulated incrementally so that identical
/// inputs are returned bit-for-bit.
pub fn weighted_average(params: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    let ((first, m0), rest) = params.split_first().ok_or(Error::EmptyInput("nothing to average"))?;
    let mut avg = (*first).clone();
    let mut total = *m0 as f64;
    for (w, m) in rest {
        if w.len() != avg.len() {
            return Err(Error::Shape("parameter vectors differ in length".into()));
        }
        total += *m as f64;
        let share = *m as f64 / total;
        for (a, x) in avg.values_mut().iter_mut().zip(w.values()) {
            let diff = x - *a;
            if diff != 0.0 {
                *a += share * diff;
            }
        }
    }
    Ok(avg)
}

fn train_participants(
    spec: &ModelSpec,
    group: &[&ClientSplit],
    starts: &[(usize, &ParamVector)],
    cfg: &FedConfig,
    round: usize,
) -> Result<Vec<ParamVector>> {
    parallel::map(starts, |&(pos, w)| {
        let data = &group[pos].train;
        trainer::local_sgd(spec, w, data, &cfg.train, round, cfg.seed).map_err(|e| e.with_client(data.client_id))
    })
    .into_iter()
    .collect()
}

/// FedAvg over one group; per-round evaluations are returned in group order.
fn run_group(
    spec: &ModelSpec,
    group: &[&ClientSplit],
    w_init: &ParamVector,
    cfg: &FedConfig,
) -> Result<(ParamVector, Vec<Vec<ClientEval>>)> {
    if group.is_empty() {
        return Err(Error::EmptyInput("federation group has no clients"));
    }
    w_init.check_spec(spec)?;
    let key = group[0].client_id();
    let mut global = w_init.clone();
    let mut history = Vec::with_capacity(cfg.global_iterations);
    for round in 0..cfg.global_iterations {
        let picked = sample_participants(group.len(), cfg.participation_rate, cfg.seed, round, key);
        let starts: Vec<(usize, &ParamVector)> = picked.iter().map(|&p| (p, &global)).collect();
        let updated = train_participants(spec, group, &starts, cfg, round)?;
        let weighted: Vec<(&ParamVector, usize)> =
            updated.iter().zip(&picked).map(|(w, &p)| (w, group[p].train.len())).collect();
        global = weighted_average(&weighted)?;
        let evals = parallel::map(group, |s| eval_client(spec, &global, s)).into_iter().collect::<Result<Vec<_>>>()?;
        history.push(evals);
    }
    Ok((global, history))
}

/// Plain FedAvg over `clients` starting from `w_init`.
pub fn fedavg(
    spec: &ModelSpec,
    clients: &[&ClientSplit],
    w_init: &ParamVector,
    cfg: &FedConfig,
) -> Result<(ParamVector, RunLog)> {
    cfg.validate()?;
    let timer = Timer::start();
    let (w, history) = run_group(spec, clients, w_init, cfg)?;
    let records = history
        .iter()
        .enumerate()
        .map(|(r, evals)| {
            let evals: Vec<Option<ClientEval>> = evals.iter().copied().map(Some).collect();
            record(r + 1, &evals, vec![clients.len()], cfg.weighted_accuracy)
        })
        .collect();
    Ok((w, RunLog { records, wall_clock_secs: timer.secs() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClusterMethod {
    KMedoids {
        k: usize,
        #[serde(default = "default_restarts")]
        restarts: usize,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
    },
    Agglomerative {
        linkage: Linkage,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
    },
    Dbscan {
        /// Defaults to [`clustering::default_eps`].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eps: Option<f64>,
        min_pts: usize,
    },
    /// Every client in one cluster.
    Single,
}

fn default_restarts() -> usize {
    5
}

fn default_max_iters() -> usize {
    100
}

impl ClusterMethod {
    pub fn cluster(&self, dm: &DistanceMatrix, seed_v: u64) -> Result<ClusterAssignment> {
        match self {
            ClusterMethod::KMedoids { k, restarts, max_iters } => {
                clustering::k_medoids(dm, &KMedoidsConfig { k: *k, restarts: *restarts, max_iters: *max_iters }, seed_v)
            }
            ClusterMethod::Agglomerative { linkage, k, threshold } => {
                let stop = match (k, threshold) {
                    (Some(k), None) => StopRule::NumClusters(*k),
                    (None, Some(t)) => StopRule::Threshold(*t),
                    _ => {
                        return Err(Error::config(
                            "lcfl.clustering",
                            "agglomerative needs exactly one of `k` or `threshold`",
                        ))
                    }
                };
                Ok(clustering::agglomerative(dm, *linkage, stop)?.assignment)
            }
            ClusterMethod::Dbscan { eps, min_pts } => {
                clustering::dbscan(dm, eps.unwrap_or_else(|| clustering::default_eps(dm)), *min_pts)
            }
            ClusterMethod::Single => Ok(ClusterAssignment::single(dm.size())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcflConfig {
    pub warmup: WarmupConfig,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    pub clustering: ClusterMethod,
}

fn default_metric() -> MetricKind {
    MetricKind::LossGap
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LcflOutcome {
    pub assignment: ClusterAssignment,
    /// One model per cluster of the effective assignment.
    pub models: Vec<ParamVector>,
    pub log: RunLog,
    pub distances: DistanceMatrix,
    pub warmup: Vec<ParamVector>,
    /// Noise points promoted to singleton clusters.
    pub noise_singletons: usize,
}

/// Distance matrix of the chosen kind from warm-up parameters.
pub fn similarity_matrix(
    spec: &ModelSpec,
    metric: MetricKind,
    train: &[&ClientDataset],
    warm: &[ParamVector],
) -> Result<DistanceMatrix> {
    let dm = match metric {
        MetricKind::LossGap => metrics::loss_gap_matrix(spec, train, warm)?,
        MetricKind::ParamNorm => metrics::param_norm_matrix(warm)?,
        MetricKind::GradCosine => metrics::grad_cosine_matrix(spec, train, &metrics::mean_params(warm)?)?.matrix,
        MetricKind::CrossLoss => metrics::cross_loss_matrix(spec, train, warm)?,
    };
    dm.with_client_ids(train.iter().map(|d| d.client_id).collect())
}

/// Warm-up, distance exchange, clustering, then independent FedAvg per
/// cluster initialized from the weighted average of its members' warm-up
/// parameters.
pub fn lcfl_pipeline(
    spec: &ModelSpec,
    clients: &[&ClientSplit],
    alg: &LcflConfig,
    cfg: &FedConfig,
) -> Result<LcflOutcome> {
    if clients.len() < 2 {
        return Err(Error::Parameter("the clustered pipeline needs at least two clients".into()));
    }
    cfg.validate()?;
    let timer = Timer::start();
    let train: Vec<&ClientDataset> = clients.iter().map(|c| &c.train).collect();
    let warm = trainer::warmup_all(spec, &train, &alg.warmup, cfg.seed)?;
    let distances = similarity_matrix(spec, alg.metric, &train, &warm)?;
    let raw = alg.clustering.cluster(&distances, seed::derive(cfg.seed, &[stream::CLUSTER]))?;
    let noise_singletons = raw.num_noise();
    let assignment = raw.noise_as_singletons();
    let (models, log) = run_clusters(spec, clients, &assignment, &warm, cfg)?;
    Ok(LcflOutcome {
        assignment,
        models,
        log: RunLog { wall_clock_secs: timer.secs(), ..log },
        distances,
        warmup: warm,
        noise_singletons,
    })
}

/// Independent FedAvg per cluster; logs are merged in client order.
pub fn run_clusters(
    spec: &ModelSpec,
    clients: &[&ClientSplit],
    assignment: &ClusterAssignment,
    warm: &[ParamVector],
    cfg: &FedConfig,
) -> Result<(Vec<ParamVector>, RunLog)> {
    if assignment.len() != clients.len() || warm.len() != clients.len() {
        return Err(Error::Shape("assignment, warm-up and clients must align".into()));
    }
    if assignment.num_noise() > 0 {
        return Err(Error::Contract("noise points must be resolved before training".into()));
    }
    let members = assignment.members();
    let runs = parallel::map(&members, |idx| {
        let group: Vec<&ClientSplit> = idx.iter().map(|&i| clients[i]).collect();
        let init = weighted_average(&idx.iter().map(|&i| (&warm[i], clients[i].train.len())).collect::<Vec<_>>())?;
        run_group(spec, &group, &init, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sizes = assignment.sizes();
    let mut records = Vec::with_capacity(cfg.global_iterations);
    for r in 0..cfg.global_iterations {
        let mut evals = vec![None; clients.len()];
        for (idx, (_, history)) in members.iter().zip(&runs) {
            for (&i, e) in idx.iter().zip(&history[r]) {
                evals[i] = Some(*e);
            }
        }
        records.push(record(r + 1, &evals, sizes.clone(), cfg.weighted_accuracy));
    }
    let models = runs.into_iter().map(|(w, _)| w).collect();
    Ok((models, RunLog { records, wall_clock_secs: 0.0 }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IfcaOutcome {
    /// Contiguous relabeling of `choices`.
    pub assignment: ClusterAssignment,
    /// Model index each client picked in the final evaluation pass.
    pub choices: Vec<usize>,
    pub models: Vec<ParamVector>,
    pub log: RunLog,
}

/// Lowest train loss among `models`; ties go to the lowest index.
fn pick_model(spec: &ModelSpec, models: &[ParamVector], data: &ClientDataset) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (j, w) in models.iter().enumerate() {
        let l = model::loss(spec, w, data)?;
        if l < best.1 || (j == 0 && l.is_nan()) {
            best = (j, l);
        }
    }
    Ok(best)
}

/// Iterative federated clustering: clients train the model with the lowest
/// train loss; clusters nobody picked keep their previous model.
pub fn ifca(spec: &ModelSpec, clients: &[&ClientSplit], inits: &[ParamVector], cfg: &FedConfig) -> Result<IfcaOutcome> {
    if inits.is_empty() {
        return Err(Error::Parameter("IFCA needs k >= 1 initial models".into()));
    }
    if clients.is_empty() {
        return Err(Error::EmptyInput("federation group has no clients"));
    }
    cfg.validate()?;
    for w in inits {
        w.check_spec(spec)?;
    }
    let timer = Timer::start();
    let k = inits.len();
    let key = clients[0].client_id();
    let mut models = inits.to_vec();
    let mut records = Vec::with_capacity(cfg.global_iterations);
    let mut choices = vec![0; clients.len()];
    for round in 0..cfg.global_iterations {
        let picked = sample_participants(clients.len(), cfg.participation_rate, cfg.seed, round, key);
        let picks = parallel::map(&picked, |&p| pick_model(spec, &models, &clients[p].train))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let starts: Vec<(usize, &ParamVector)> =
            picked.iter().zip(&picks).map(|(&p, &(j, _))| (p, &models[j])).collect();
        let updated = train_participants(spec, clients, &starts, cfg, round)?;
        let mut next = models.clone();
        for (j, slot) in next.iter_mut().enumerate() {
            let mine: Vec<(&ParamVector, usize)> = updated
                .iter()
                .zip(&picked)
                .zip(&picks)
                .filter(|(_, &(c, _))| c == j)
                .map(|((w, &p), _)| (w, clients[p].train.len()))
                .collect();
            if !mine.is_empty() {
                *slot = weighted_average(&mine)?;
            }
        }
        models = next;
        let evals = parallel::map(clients, |s| {
            let (j, _) = pick_model(spec, &models, &s.train)?;
            Ok((j, eval_client(spec, &models[j], s)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut sizes = vec![0; k];
        for (c, (j, _)) in choices.iter_mut().zip(&evals) {
            *c = *j;
            sizes[*j] += 1;
        }
        let evals: Vec<Option<ClientEval>> = evals.into_iter().map(|(_, e)| Some(e)).collect();
        records.push(record(round + 1, &evals, sizes, cfg.weighted_accuracy));
    }
    Ok(IfcaOutcome {
        assignment: ClusterAssignment::from_labels(&choices),
        choices,
        models,
        log: RunLog { records, wall_clock_secs: timer.secs() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalOutcome {
    /// `None` for clients that diverged.
    pub models: Vec<Option<ParamVector>>,
    pub diverged: Vec<usize>,
    pub log: RunLog,
}

/// Every client trains alone; global iteration `g` runs `local_epochs`
/// epochs at the decayed rate for `g`.
pub fn local_only(
    spec: &ModelSpec,
    clients: &[&ClientSplit],
    w_init: &ParamVector,
    cfg: &FedConfig,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    w_init.check_spec(spec)?;
    let timer = Timer::start();
    let trajectories = parallel::map(clients, |s| {
        let mut w = w_init.clone();
        let mut evals = Vec::with_capacity(cfg.global_iterations);
        for g in 0..cfg.global_iterations {
            match trainer::local_sgd(spec, &w, &s.train, &cfg.train, g, cfg.seed) {
                Ok(next) => w = next,
                Err(Error::Divergence { .. }) => {
                    evals.resize(cfg.global_iterations, None);
                    return Ok((None, evals));
                }
                Err(e) => return Err(e.with_client(s.client_id())),
            }
            evals.push(Some(eval_client(spec, &w, s)?));
        }
        Ok((Some(w), evals))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let diverged: Vec<usize> =
        trajectories.iter().zip(clients).filter(|((w, _), _)| w.is_none()).map(|(_, s)| s.client_id()).collect();
    let records = (0..cfg.global_iterations)
        .map(|r| {
            let evals: Vec<Option<ClientEval>> = trajectories.iter().map(|(_, e)| e[r]).collect();
            record(r + 1, &evals, vec![1; clients.len()], cfg.weighted_accuracy)
        })
        .collect();
    Ok(LocalOutcome {
        models: trajectories.into_iter().map(|(w, _)| w).collect(),
        diverged,
        log: RunLog { records, wall_clock_secs: timer.secs() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_linear_family, split_train_test, LinearFamily};
    use crate::trainer::InitMode;

    fn family(k: usize, m: usize) -> Vec<ClientSplit> {
        let sigma_xy = [vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 2.0]];
        let fam = LinearFamily { sigma_xy: sigma_xy[..k].to_vec(), sigma_xx: None, m_per_client: 40, noise_std: 0.1 };
        gen_linear_family(&fam, m, 9).unwrap().iter().map(|d| split_train_test(d, 0.8, 9).unwrap()).collect()
    }

    fn cfg(rate: f64) -> FedConfig {
        FedConfig {
            participation_rate: rate,
            global_iterations: 4,
            train: TrainConfig { init_lr: 0.05, lr_decay: 0.99, batch_size: 8, local_epochs: 2 },
            seed: 3,
            weighted_accuracy: false,
        }
    }

    #[test]
    fn weighted_mean_of_two() {
        let spec = ModelSpec::linear(1);
        let a = ParamVector::from_values(&spec, vec![0.0, 4.0]).unwrap();
        let b = ParamVector::from_values(&spec, vec![4.0, 8.0]).unwrap();
        let avg = weighted_average(&[(&a, 10), (&b, 30)]).unwrap();
        assert_eq!(avg.values(), &[3.0, 7.0]);
    }

    #[test]
    fn identical_inputs_average_exactly() {
        let spec = ModelSpec::linear(2);
        let w = ParamVector::from_values(&spec, vec![0.1, 1.0 / 3.0, -7.3e-5]).unwrap();
        let avg = weighted_average(&[(&w, 3), (&w, 17), (&w, 5)]).unwrap();
        assert_eq!(avg, w);
    }

    #[test]
    fn participation_counts() {
        for (rate, n, want) in [(0.1, 10, 1), (0.3, 10, 3), (0.25, 10, 3), (1.0, 7, 7), (0.01, 5, 1)] {
            let p = sample_participants(n, rate, 1, 0, 0);
            assert_eq!(p.len(), want, "rate {rate} n {n}");
            assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn single_client_matches_local_sgd() {
        let spec = ModelSpec::linear(2);
        let clients = family(1, 1);
        let refs: Vec<&ClientSplit> = clients.iter().collect();
        let w0 = ParamVector::zeros(&spec);
        let c = cfg(1.0);
        let (w, log) = fedavg(&spec, &refs, &w0, &c).unwrap();
        let mut manual = w0;
        for g in 0..c.global_iterations {
            manual = trainer::local_sgd(&spec, &manual, &clients[0].train, &c.train, g, c.seed).unwrap();
        }
        assert_eq!(w, manual);
        assert_eq!(log.records.len(), 4);
        assert!(log.records[0].accuracy_mean.is_none());
    }

    #[test]
    fn ifca_with_one_model_is_fedavg() {
        let spec = ModelSpec::linear(2);
        let clients = family(2, 6);
        let refs: Vec<&ClientSplit> = clients.iter().collect();
        let w0 = trainer::initial_params(&spec, InitMode::Shared, 0, 1);
        let c = cfg(0.5);
        let (w, log) = fedavg(&spec, &refs, &w0, &c).unwrap();
        let out = ifca(&spec, &refs, &[w0], &c).unwrap();
        assert_eq!(out.models[0], w);
        assert_eq!(out.log.records, log.records);
    }

    #[test]
    fn ifca_identical_inits_pick_zero() {
        let spec = ModelSpec::linear(2);
        let clients = family(2, 4);
        let refs: Vec<&ClientSplit> = clients.iter().collect();
        let w0 = ParamVector::zeros(&spec);
        let c = FedConfig { global_iterations: 1, ..cfg(1.0) };
        let out = ifca(&spec, &refs, &[w0.clone(), w0.clone(), w0.clone()], &c).unwrap();
        // every client trains model 0 in round one; the others keep the init
        assert_ne!(out.models[0], w0);
        assert_eq!(out.models[1], w0);
        assert_eq!(out.models[2], w0);
        assert!(ifca(&spec, &refs, &[], &c).is_err());
    }

    #[test]
    fn single_cluster_pipeline_is_fedavg_from_warmup() {
        let spec = ModelSpec::linear(2);
        let clients = family(2, 6);
        let refs: Vec<&ClientSplit> = clients.iter().collect();
        let c = cfg(0.5);
        let alg = LcflConfig {
            warmup: WarmupConfig { steps: 5, step_size: 0.1, init: InitMode::Shared },
            metric: MetricKind::LossGap,
            clustering: ClusterMethod::Single,
        };
        let out = lcfl_pipeline(&spec, &refs, &alg, &c).unwrap();
        let init =
            weighted_average(&out.warmup.iter().zip(&clients).map(|(w, s)| (w, s.train.len())).collect::<Vec<_>>())
                .unwrap();
        let (w, log) = fedavg(&spec, &refs, &init, &c).unwrap();
        assert_eq!(out.models, vec![w]);
        assert_eq!(out.log.records, log.records);
    }

    #[test]
    fn local_only_identical_clients() {
        let spec = ModelSpec::linear(2);
        let mut clients = family(1, 1);
        let mut twin = clients[0].clone();
        twin.train.client_id = 0;
        clients.push(twin);
        let refs: Vec<&ClientSplit> = clients.iter().collect();
        let out = local_only(&spec, &refs, &ParamVector::zeros(&spec), &cfg(1.0)).unwrap();
        assert_eq!(out.models[0], out.models[1]);
        assert!(out.diverged.is_empty());
    }

    #[test]
    fn local_only_excludes_divergent_clients() {
        let spec = ModelSpec::linear(2);
        let clients = family(2, 2);
        let refs: Vec<&ClientSplit> = clients.iter().collect();
        let mut c = cfg(1.0);
        c.train.init_lr = 1e6;
        let out = local_only(&spec, &refs, &ParamVector::zeros(&spec), &c).unwrap();
        assert_eq!(out.diverged.len(), 2);
        assert_eq!(out.log.last().unwrap().excluded, vec![0, 1]);
    }
}
