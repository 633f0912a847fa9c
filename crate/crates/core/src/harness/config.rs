//! Experiment and verification configs, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{AscentBudget, TheoremConfig};
use crate::data::{BaseTask, FederationSpec, Generator};
use crate::fed::{ClusterMethod, FedConfig, LcflConfig};
use crate::metrics::MetricKind;
use crate::model::ModelSpec;
use crate::trainer::{TrainConfig, WarmupConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Lcfl,
    Ifca,
    Fedavg,
    Local,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lcfl => "lcfl",
            Algorithm::Ifca => "ifca",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Local => "local",
        }
    }
}

/// Federated settings shared by every algorithm; the run seed is supplied
/// per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub participation_rate: f64,
    pub global_iterations: usize,
    pub train: TrainConfig,
    #[serde(default)]
    pub weighted_accuracy: bool,
}

impl FedSection {
    pub fn for_seed(&self, seed: u64) -> FedConfig {
        FedConfig {
            participation_rate: self.participation_rate,
            global_iterations: self.global_iterations,
            train: self.train.clone(),
            seed,
            weighted_accuracy: self.weighted_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcflSection {
    pub warmup: WarmupConfig,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    pub clustering: ClusterMethod,
    /// Required to select the two-model cross-loss metric.
    #[serde(default)]
    pub allow_rejected_metric: bool,
    /// Additional k-medoids runs, reported as `lcfl-k<k>`.
    #[serde(default)]
    pub extra_k: Vec<usize>,
}

fn default_metric() -> MetricKind {
    MetricKind::LossGap
}

impl LcflSection {
    pub fn pipeline(&self, k_override: Option<usize>) -> LcflConfig {
        let clustering = match (k_override, &self.clustering) {
            (Some(k), ClusterMethod::KMedoids { restarts, max_iters, .. }) => {
                ClusterMethod::KMedoids { k, restarts: *restarts, max_iters: *max_iters }
            }
            (Some(k), _) => ClusterMethod::KMedoids { k, restarts: 5, max_iters: 100 },
            (None, c) => c.clone(),
        };
        LcflConfig { warmup: self.warmup.clone(), metric: self.metric, clustering }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfcaSection {
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub federation: FederationSpec,
    pub model: ModelSpec,
    pub fed: FedSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lcfl: Option<LcflSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ifca: Option<IfcaSection>,
}

/// One labelled algorithm run inside an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub label: String,
    pub algorithm: Algorithm,
    pub k_override: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file; relative IDX paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.federation.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::config("algorithms", "at least one algorithm is required"));
        }
        let mut algs = self.algorithms.clone();
        algs.sort_unstable();
        algs.dedup();
        if algs.len() != self.algorithms.len() {
            return Err(Error::config("algorithms", "duplicate entries"));
        }
        self.federation.validate()?;
        self.model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.fed.for_seed(0).validate()?;
        let wants = |a| self.algorithms.contains(&a);
        match (&self.lcfl, wants(Algorithm::Lcfl)) {
            (None, true) => return Err(Error::config("lcfl", "section required when algorithms include lcfl")),
            (Some(_), false) => return Err(Error::config("lcfl", "section given but lcfl is not selected")),
            (Some(l), true) => {
                l.warmup.validate()?;
                if l.metric == MetricKind::CrossLoss && !l.allow_rejected_metric {
                    return Err(Error::config(
                        "lcfl.metric",
                        "cross-loss is a debugging metric; set lcfl.allow_rejected_metric = true",
                    ));
                }
                let check_k = |k: usize, key: &str| {
                    if k == 0 || k > self.federation.num_clients {
                        Err(Error::config(key, format!("k = {k} must lie in [1, num_clients]")))
                    } else {
                        Ok(())
                    }
                };
                match &l.clustering {
                    ClusterMethod::KMedoids { k, restarts, .. } => {
                        check_k(*k, "lcfl.clustering.k")?;
                        if *restarts == 0 {
                            return Err(Error::config("lcfl.clustering.restarts", "must be >= 1"));
                        }
                    }
                    ClusterMethod::Agglomerative { k, threshold, .. } => match (k, threshold) {
                        (Some(k), None) => check_k(*k, "lcfl.clustering.k")?,
                        (None, Some(t)) if *t >= 0.0 => {}
                        (None, Some(_)) => return Err(Error::config("lcfl.clustering.threshold", "must be >= 0")),
                        _ => {
                            return Err(Error::config(
                                "lcfl.clustering",
                                "agglomerative needs exactly one of `k` or `threshold`",
                            ))
                        }
                    },
                    ClusterMethod::Dbscan { eps, min_pts } => {
                        if eps.is_some_and(|e| !(e > 0.0)) {
                            return Err(Error::config("lcfl.clustering.eps", "must be > 0"));
                        }
                        if *min_pts == 0 {
                            return Err(Error::config("lcfl.clustering.min_pts", "must be >= 1"));
                        }
                    }
                    ClusterMethod::Single => {}
                }
                for &k in &l.extra_k {
                    check_k(k, "lcfl.extra_k")?;
                }
            }
            (None, false) => {}
        }
        match (&self.ifca, wants(Algorithm::Ifca)) {
            (None, true) => return Err(Error::config("ifca", "section required when algorithms include ifca")),
            (Some(_), false) => return Err(Error::config("ifca", "section given but ifca is not selected")),
            (Some(i), true) if i.k == 0 => return Err(Error::config("ifca.k", "must be >= 1")),
            _ => {}
        }
        Ok(())
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &a in &self.algorithms {
            out.push(RunSpec { label: a.name().to_string(), algorithm: a, k_override: None });
            if a == Algorithm::Lcfl {
                for &k in self.lcfl.iter().flat_map(|l| &l.extra_k) {
                    out.push(RunSpec { label: format!("lcfl-k{k}"), algorithm: a, k_override: Some(k) });
                }
            }
        }
        out
    }
}

impl FederationSpec {
    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.generator {
            Generator::IdxImport { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            Generator::RotatedClassification { base: BaseTask::Idx { images, labels, .. }, .. }
            | Generator::LabelShard { base: BaseTask::Idx { images, labels, .. }, .. } => {
                fix(images);
                fix(labels);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichSection {
    pub instances: usize,
    pub dim: usize,
    pub rel_slack: f64,
    pub seed: u64,
}

/// Sanity sweep of the Rademacher estimator on truncated Gaussian features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RademacherSection {
    pub dim: usize,
    pub m: usize,
    pub weight_bound: f64,
    pub radius: f64,
    pub num_sigma: usize,
    /// Datasets averaged per sample size in the trend check.
    pub repeats: usize,
    pub seed: u64,
    #[serde(default)]
    pub ascent: AscentBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancySection {
    /// Slack allowed in `d_hat <= 2 disc`.
    pub tolerance: f64,
    pub seed: u64,
    #[serde(default)]
    pub ascent: AscentBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theorem: Option<TheoremConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandwich: Option<SandwichSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rademacher: Option<RademacherSection>,
    /// Uses the populations of `theorem`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrepancy: Option<DiscrepancySection>,
}

impl VerifyConfig {
    pub fn standard() -> Self {
        Self {
            theorem: Some(TheoremConfig::standard()),
            sandwich: Some(SandwichSection { instances: 100, dim: 4, rel_slack: 1e-8, seed: 8 }),
            rademacher: Some(RademacherSection {
                dim: 2,
                m: 100,
                weight_bound: 2.0,
                radius: 3.0,
                num_sigma: 512,
                repeats: 10,
                seed: 10,
                ascent: AscentBudget::default(),
            }),
            discrepancy: Some(DiscrepancySection { tolerance: 1e-9, seed: 4, ascent: AscentBudget::default() }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.theorem {
            t.validate()?;
        }
        if let Some(s) = &self.sandwich {
            if s.dim == 0 || s.instances == 0 {
                return Err(Error::config("sandwich", "dim and instances must be positive"));
            }
            if !(s.rel_slack >= 0.0) {
                return Err(Error::config("sandwich.rel_slack", "must be >= 0"));
            }
        }
        if let Some(r) = &self.rademacher {
            if r.num_sigma < 2 {
                return Err(Error::config("rademacher.num_sigma", "must be >= 2"));
            }
            if r.dim == 0 || r.m == 0 || r.repeats == 0 {
                return Err(Error::config("rademacher", "dim, m and repeats must be positive"));
            }
            if !(r.weight_bound > 0.0 && r.radius > 0.0) {
                return Err(Error::config("rademacher.weight_bound", "bounds must be > 0"));
            }
        }
        if self.discrepancy.is_some() && self.theorem.is_none() {
            return Err(Error::config("discrepancy", "needs a [theorem] section for its populations"));
        }
        Ok(())
    }
}
