//! Seeded multi-run experiments and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Algorithm, ExperimentConfig, RunSpec};
use crate::clustering::{self, ClusterAssignment, NoiseHandling};
use crate::data::{ClientSplit, Federation, Targets};
use crate::fed::{self, RunLog};
use crate::metrics::DistanceMatrix;
use crate::model::{ModelKind, ParamVector};
use crate::seed::{self, stream};
use crate::trainer::{self, InitMode};
use crate::{parallel, Error, Result};

/// Result of one algorithm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmRun {
    pub label: String,
    pub algorithm: Algorithm,
    pub log: RunLog,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment: Option<ClusterAssignment>,
    /// Against the generator's ground truth, noise as singletons.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    pub noise_singletons: usize,
    #[serde(skip)]
    pub distances: Option<DistanceMatrix>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diverged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub client_ids: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
    pub runs: Vec<AlgorithmRun>,
}

impl SeedOutcome {
    pub fn run(&self, label: &str) -> Option<&AlgorithmRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub iteration: usize,
    pub algorithm: String,
    pub seed: u64,
    pub accuracy_mean_over_clients: Option<f64>,
    pub train_loss_mean: f64,
    pub num_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: usize,
    pub algorithm: String,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRow {
    pub seed: u64,
    pub algorithm: String,
    pub ari: Option<f64>,
    pub num_clusters: usize,
    pub noise_singletons: usize,
}

/// Check that the model fits the generated data.
fn check_model(cfg: &ExperimentConfig, fed: &Federation) -> Result<()> {
    let first = &fed.clients[0].train;
    if cfg.model.input_dim != first.dim() {
        return Err(Error::config(
            "model.input_dim",
            format!("{} does not match the generated feature dimension {}", cfg.model.input_dim, first.dim()),
        ));
    }
    match (&first.targets, cfg.model.kind) {
        (Targets::Regression(_), ModelKind::LinearRegression) => Ok(()),
        (Targets::Classes { num_classes, .. }, ModelKind::Softmax | ModelKind::Mlp) => {
            if cfg.model.num_classes != Some(*num_classes) {
                return Err(Error::config(
                    "model.num_classes",
                    format!("the generated data has {num_classes} classes"),
                ));
            }
            Ok(())
        }
        _ => Err(Error::config("model.kind", "does not match the generated target type")),
    }
}

fn run_algorithm(
    cfg: &ExperimentConfig,
    run: &RunSpec,
    clients: &[&ClientSplit],
    truth: Option<&[usize]>,
    seed_v: u64,
) -> Result<AlgorithmRun> {
    let spec = &cfg.model;
    let fed_cfg = cfg.fed.for_seed(seed_v);
    let init = || trainer::initial_params(spec, InitMode::Shared, 0, seed_v);
    let score = |a: &ClusterAssignment| -> Result<Option<f64>> {
        truth.map(|t| clustering::adjusted_rand_index(a, t, NoiseHandling::Singletons)).transpose()
    };
    let mut out = AlgorithmRun {
        label: run.label.clone(),
        algorithm: run.algorithm,
        log: RunLog { records: Vec::new(), wall_clock_secs: 0.0 },
        assignment: None,
        ari: None,
        noise_singletons: 0,
        distances: None,
        diverged: Vec::new(),
    };
    match run.algorithm {
        Algorithm::Fedavg => out.log = fed::fedavg(spec, clients, &init(), &fed_cfg)?.1,
        Algorithm::Local => {
            let res = fed::local_only(spec, clients, &init(), &fed_cfg)?;
            out.log = res.log;
            out.diverged = res.diverged;
        }
        Algorithm::Lcfl => {
            let section = cfg.lcfl.as_ref().ok_or_else(|| Error::config("lcfl", "missing section"))?;
            let res = fed::lcfl_pipeline(spec, clients, &section.pipeline(run.k_override), &fed_cfg)?;
            out.ari = score(&res.assignment)?;
            out.noise_singletons = res.noise_singletons;
            out.assignment = Some(res.assignment);
            out.distances = Some(res.distances);
            out.log = res.log;
        }
        Algorithm::Ifca => {
            let k = cfg.ifca.as_ref().ok_or_else(|| Error::config("ifca", "missing section"))?.k;
            let inits: Vec<ParamVector> = (0..k)
                .map(|j| ParamVector::random(spec, &mut seed::rng(seed_v, &[stream::INIT, 0x1FCA, j as u64])))
                .collect();
            let res = fed::ifca(spec, clients, &inits, &fed_cfg)?;
            out.ari = score(&res.assignment)?;
            out.assignment = Some(res.assignment);
            out.log = res.log;
        }
    }
    Ok(out)
}

/// Run every configured algorithm on the federation generated for `seed_v`.
pub fn run_seed(cfg: &ExperimentConfig, seed_v: u64) -> Result<SeedOutcome> {
    let federation = cfg.federation.build(seed_v)?;
    check_model(cfg, &federation)?;
    let clients: Vec<&ClientSplit> = federation.clients.iter().collect();
    let truth = federation.true_labels();
    let runs = cfg
        .runs()
        .iter()
        .map(|r| run_algorithm(cfg, r, &clients, truth.as_deref(), seed_v))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedOutcome {
        seed: seed_v,
        client_ids: clients.iter().map(|c| c.client_id()).collect(),
        true_labels: truth,
        runs,
    })
}

/// All seeds, in memory, in seed-list order.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    parallel::map(&cfg.seeds, |&s| run_seed(cfg, s)).into_iter().collect()
}

pub fn raw_rows(outcome: &SeedOutcome) -> Vec<RawRow> {
    outcome
        .runs
        .iter()
        .flat_map(|run| {
            run.log.records.iter().map(move |r| RawRow {
                iteration: r.iteration,
                algorithm: run.label.clone(),
                seed: outcome.seed,
                accuracy_mean_over_clients: r.accuracy_mean,
                train_loss_mean: r.train_loss_mean,
                num_clusters: r.num_clusters,
            })
        })
        .collect()
}

pub fn clustering_rows(outcome: &SeedOutcome) -> Vec<ClusteringRow> {
    outcome
        .runs
        .iter()
        .filter_map(|run| {
            let a = run.assignment.as_ref()?;
            Some(ClusteringRow {
                seed: outcome.seed,
                algorithm: run.label.clone(),
                ari: run.ari,
                num_clusters: a.num_clusters,
                noise_singletons: run.noise_singletons,
            })
        })
        .collect()
}

/// Per `(algorithm, iteration)` mean and population std of accuracy over
/// seeds, algorithms in first-seen order.
pub fn summarize(raw: &[RawRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<Option<f64>>> = BTreeMap::new();
    for row in raw {
        let pos = match order.iter().position(|a| *a == row.algorithm) {
            Some(p) => p,
            None => {
                order.push(&row.algorithm);
                order.len() - 1
            }
        };
        groups.entry((pos, row.iteration)).or_default().push(row.accuracy_mean_over_clients);
    }
    groups
        .into_iter()
        .map(|((pos, iteration), vals)| {
            let accs: Option<Vec<f64>> = vals.into_iter().collect();
            let (acc_mean, acc_std) = match accs {
                Some(a) if !a.is_empty() => {
                    let n = a.len() as f64;
                    let mean = a.iter().sum::<f64>() / n;
                    let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    (Some(mean), Some(var.sqrt()))
                }
                _ => (None, None),
            };
            SummaryRow { iteration, algorithm: order[pos].to_string(), acc_mean, acc_std }
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const RAW_HEADER: &[&str] =
    &["iteration", "algorithm", "seed", "accuracy_mean_over_clients", "train_loss_mean", "num_clusters"];
const CLUSTER_HEADER: &[&str] = &["seed", "algorithm", "ari", "num_clusters", "noise_singletons"];

/// 64-bit FNV-1a, used to tag completion markers with the resolved config.
fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest<'a> {
    pub software: &'static str,
    pub version: &'static str,
    pub fingerprint: String,
    pub config: &'a ExperimentConfig,
    pub runs: Vec<String>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub raw: Vec<RawRow>,
    pub summary: Vec<SummaryRow>,
    pub clustering: Vec<ClusteringRow>,
    /// Seeds whose artifacts were reused from an earlier identical run.
    pub resumed: Vec<u64>,
}

fn seed_dir(out: &Path, s: u64) -> PathBuf {
    out.join(format!("seed-{s}"))
}

fn write_seed(out: &Path, outcome: &SeedOutcome, stamp: &str) -> Result<()> {
    let dir = seed_dir(out, outcome.seed);
    fs::create_dir_all(&dir)?;
    write_rows(&dir.join("raw.csv"), &raw_rows(outcome), RAW_HEADER)?;
    write_rows(&dir.join("clustering.csv"), &clustering_rows(outcome), CLUSTER_HEADER)?;
    for run in &outcome.runs {
        if let Some(a) = &run.assignment {
            a.write_csv(&outcome.client_ids, fs::File::create(dir.join(format!("assignment-{}.csv", run.label)))?)?;
        }
        if let Some(dm) = &run.distances {
            dm.write_csv(fs::File::create(dir.join(format!("distances-{}.csv", run.label)))?)?;
        }
    }
    // wall-clock times vary between runs, so they stay out of the deterministic log
    let mut stripped = outcome.clone();
    let timings: Vec<(String, f64)> =
        stripped.runs.iter_mut().map(|r| (r.label.clone(), std::mem::take(&mut r.log.wall_clock_secs))).collect();
    fs::write(dir.join("log.json"), serde_json::to_string_pretty(&stripped)? + "\n")?;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
    fs::write(dir.join("COMPLETE"), format!("{stamp}\n"))?;
    Ok(())
}

fn completed(out: &Path, s: u64, stamp: &str) -> bool {
    let dir = seed_dir(out, s);
    fs::read_to_string(dir.join("COMPLETE")).is_ok_and(|m| m.trim() == stamp)
        && dir.join("raw.csv").exists()
        && dir.join("clustering.csv").exists()
}

/// Run (or resume) an experiment and write its artifacts under `out`.
///
/// A seed whose `COMPLETE` marker carries the current config fingerprint is
/// not recomputed; any other seed directory is overwritten.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let config_json = serde_json::to_string(cfg)?;
    let stamp = format!("{:016x}", fingerprint(config_json.as_bytes()));
    let (resumed, todo): (Vec<u64>, Vec<u64>) = cfg.seeds.iter().partition(|&&s| completed(out, s, &stamp));
    let results = parallel::map(&todo, |&s| run_seed(cfg, s));
    for r in results {
        write_seed(out, &r?, &stamp)?;
    }
    let mut raw = Vec::new();
    let mut clustering = Vec::new();
    for &s in &cfg.seeds {
        raw.extend(read_rows::<RawRow>(&seed_dir(out, s).join("raw.csv"))?);
        clustering.extend(read_rows::<ClusteringRow>(&seed_dir(out, s).join("clustering.csv"))?);
    }
    let summary = summarize(&raw);
    write_rows(&out.join("raw.csv"), &raw, RAW_HEADER)?;
    write_rows(&out.join("summary.csv"), &summary, &["iteration", "algorithm", "acc_mean", "acc_std"])?;
    write_rows(&out.join("clustering.csv"), &clustering, CLUSTER_HEADER)?;
    let mut artifacts = vec!["raw.csv".to_string(), "summary.csv".to_string(), "clustering.csv".to_string()];
    artifacts.extend(cfg.seeds.iter().map(|s| format!("seed-{s}/")));
    let manifest = Manifest {
        software: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        fingerprint: stamp,
        config: cfg,
        runs: cfg.runs().into_iter().map(|r| r.label).collect(),
        artifacts,
    };
    let mut f = fs::File::create(out.join("manifest.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentReport { output_dir: out.to_path_buf(), raw, summary, clustering, resumed })
}

// ---------------------------------------------------------------------------
// comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub iterations: Vec<usize>,
    pub columns: Vec<String>,
    /// `cells[row][col] = (mean, std)` of accuracy.
    pub cells: Vec<Vec<Option<(f64, f64)>>>,
}

impl ComparisonTable {
    /// Fixed-width text table with percentages.
    pub fn render(&self) -> String {
        let mut s = format!("{:>9}", "iteration");
        for c in &self.columns {
            s += &format!("  {c:>16}");
        }
        s.push('\n');
        for (it, row) in self.iterations.iter().zip(&self.cells) {
            s += &format!("{it:>9}");
            for cell in row {
                let text = match cell {
                    Some((m, sd)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd),
                    None => "n/a".to_string(),
                };
                s += &format!("  {text:>16}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let mut header = vec!["iteration".to_string()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        w.write_record(&header)?;
        for (it, row) in self.iterations.iter().zip(&self.cells) {
            let mut rec = vec![it.to_string()];
            for cell in row {
                match cell {
                    Some((m, sd)) => rec.extend([m.to_string(), sd.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Configs are comparable when they share federation, model and seeds.
pub fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    let first = configs.first().ok_or(Error::EmptyInput("no configs to compare"))?;
    for c in &configs[1..] {
        if c.federation != first.federation {
            return Err(Error::Comparability(format!("`{}` and `{}` use different federations", first.name, c.name)));
        }
        if c.model != first.model {
            return Err(Error::Comparability(format!("`{}` and `{}` use different models", first.name, c.name)));
        }
        if c.seeds != first.seeds {
            return Err(Error::Comparability(format!("`{}` and `{}` use different seeds", first.name, c.name)));
        }
    }
    Ok(())
}

/// Every requested iteration must exist in every config.
pub fn check_iterations(configs: &[ExperimentConfig], iterations: &[usize]) -> Result<()> {
    if iterations.is_empty() {
        return Err(Error::Range("no iterations requested".into()));
    }
    for c in configs {
        for &it in iterations {
            if it == 0 || it > c.fed.global_iterations {
                return Err(Error::Range(format!(
                    "iteration {it} outside 1..={} of `{}`",
                    c.fed.global_iterations, c.name
                )));
            }
        }
    }
    Ok(())
}

/// Table of mean ± std accuracy at the requested iterations, one column per
/// algorithm run across all configs.
pub fn compare(
    configs: &[ExperimentConfig],
    summaries: &[Vec<SummaryRow>],
    iterations: &[usize],
) -> Result<ComparisonTable> {
    check_comparable(configs)?;
    if configs.len() != summaries.len() {
        return Err(Error::Shape("one summary per config required".into()));
    }
    check_iterations(configs, iterations)?;
    let mut columns = Vec::new();
    let mut sources = Vec::new();
    for (c, summary) in configs.iter().zip(summaries) {
        for run in c.runs() {
            let name =
                if columns.contains(&run.label) { format!("{}@{}", run.label, c.name) } else { run.label.clone() };
            columns.push(name);
            sources.push((summary, run.label));
        }
    }
    let cells = iterations
        .iter()
        .map(|&it| {
            sources
                .iter()
                .map(|(summary, label)| {
                    summary
                        .iter()
                        .find(|r| r.iteration == it && &r.algorithm == label)
                        .and_then(|r| Some((r.acc_mean?, r.acc_std?)))
                })
                .collect()
        })
        .collect();
    Ok(ComparisonTable { iterations: iterations.to_vec(), columns, cells })
}

/// Run every config in memory and tabulate.
pub fn compare_configs(configs: &[ExperimentConfig], iterations: &[usize]) -> Result<ComparisonTable> {
    check_comparable(configs)?;
    check_iterations(configs, iterations)?;
    let summaries = configs
        .iter()
        .map(|c| {
            let raw: Vec<RawRow> = run_in_memory(c)?.iter().flat_map(raw_rows).collect();
            Ok(summarize(&raw))
        })
        .collect::<Result<Vec<_>>>()?;
    compare(configs, &summaries, iterations)
}
