//! Federation export and distance-matrix inspection.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::data::{ClientDataset, ClientSplit, Targets};
use crate::fed;
use crate::metrics::{self, DistanceMatrix, MetricKind};
use crate::trainer::{self, InitMode, WarmupConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ClientMeta {
    client_id: usize,
    true_cluster: Option<usize>,
    train: usize,
    test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct FederationMeta<'a> {
    config: &'a crate::data::FederationSpec,
    run_seed: u64,
    dim: usize,
    num_true_clusters: usize,
    clients: Vec<ClientMeta>,
}

fn write_dataset(path: &Path, data: &ClientDataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(ToString::to_string).collect();
        rec.push(match &data.targets {
            Targets::Regression(y) => y[i].to_string(),
            Targets::Classes { labels, .. } => labels[i].to_string(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `federation.json` and one train/test CSV pair per client.
pub fn gen_data(cfg: &ExperimentConfig, run_seed: u64, out: &Path) -> Result<usize> {
    let federation = cfg.federation.build(run_seed)?;
    let dir = out.join("clients");
    fs::create_dir_all(&dir)?;
    for c in &federation.clients {
        write_dataset(&dir.join(format!("client-{}-train.csv", c.client_id())), &c.train)?;
        write_dataset(&dir.join(format!("client-{}-test.csv", c.client_id())), &c.test)?;
    }
    let meta = FederationMeta {
        config: &cfg.federation,
        run_seed,
        dim: federation.clients[0].train.dim(),
        num_true_clusters: federation.num_true_clusters,
        clients: federation
            .clients
            .iter()
            .map(|c| ClientMeta {
                client_id: c.client_id(),
                true_cluster: c.true_cluster(),
                train: c.train.len(),
                test: c.test.len(),
            })
            .collect(),
    };
    fs::write(out.join("federation.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(federation.clients.len())
}

/// Warm up every client and compute the chosen distance matrix, using the
/// config's `[lcfl]` warm-up when present.
pub fn warmup_matrix(cfg: &ExperimentConfig, run_seed: u64, metric: MetricKind) -> Result<DistanceMatrix> {
    let federation = cfg.federation.build(run_seed)?;
    let warmup = cfg.lcfl.as_ref().map(|l| l.warmup.clone()).unwrap_or(WarmupConfig {
        steps: 10,
        step_size: 0.1,
        init: InitMode::Shared,
    });
    let train: Vec<&ClientDataset> = federation.clients.iter().map(|c: &ClientSplit| &c.train).collect();
    let warm = trainer::warmup_all(&cfg.model, &train, &warmup, run_seed)?;
    fed::similarity_matrix(&cfg.model, metric, &train, &warm)
}

/// Human-readable matrix dump with a short summary.
pub fn describe_matrix(dm: &DistanceMatrix) -> String {
    let n = dm.size();
    let pairs = dm.pairwise();
    let min = pairs.iter().cloned().fold(f64::INFINITY, f64::min);
    let tri = metrics::triangle_report(dm, 1e-12);
    let mut s = format!(
        "metric {} | {n} clients | off-diagonal min {:.4e} max {:.4e} | triangle violations {}/{}\n",
        dm.metric.name(),
        if pairs.is_empty() { 0.0 } else { min },
        dm.max_entry(),
        tri.violations,
        tri.triples
    );
    s += &format!("{:>6}", "id");
    for id in &dm.client_ids {
        s += &format!(" {id:>9}");
    }
    s.push('\n');
    for i in 0..n {
        s += &format!("{:>6}", dm.client_ids[i]);
        for v in dm.row(i) {
            s += &format!(" {v:>9.3e}");
        }
        s.push('\n');
    }
    s
}
