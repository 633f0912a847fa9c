//! `lcfl`: run experiments, compare them, check the bounds, export
//! federations and inspect distance matrices.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lcfl_core::clustering::{self, KMedoidsConfig};
use lcfl_core::harness::{self, ExperimentConfig, VerifyConfig};
use lcfl_core::metrics::{DistanceMatrix, MetricKind};

#[derive(Parser)]
#[command(name = "lcfl", version, about = "Clustered federated learning simulator")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "LCFL_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm of a config over its seeds and write artifacts.
    Run(RunArgs),
    /// Tabulate mean ± std accuracy of several configs at chosen iterations.
    Compare(CompareArgs),
    /// Run the bound verification suite; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Write one generated federation to CSV files.
    GenData(GenDataArgs),
    /// Print a client distance matrix and an optional k-medoids split.
    InspectMatrix(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file or shipped profile name (rotmnist-mini, femnist-mini, linear-k2).
    #[arg(long)]
    config: String,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Repeat once per config.
    #[arg(long, required = true)]
    config: Vec<String>,
    /// Comma-separated 1-based global iterations.
    #[arg(long, value_delimiter = ',', required = true)]
    iterations: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Also write comparison.csv here.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Verification config; the shipped standard suite when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the seed of every section.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: String,
    /// Run seed; the config's first seed when omitted.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    LossGap,
    ParamNorm,
    GradCosine,
    CrossLoss,
}

impl From<Metric> for MetricKind {
    fn from(m: Metric) -> Self {
        match m {
            Metric::LossGap => MetricKind::LossGap,
            Metric::ParamNorm => MetricKind::ParamNorm,
            Metric::GradCosine => MetricKind::GradCosine,
            Metric::CrossLoss => MetricKind::CrossLoss,
        }
    }
}

#[derive(Args)]
struct InspectArgs {
    /// Warm up the federation of this config and compute its matrix.
    #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
    config: Option<String>,
    /// Read a matrix CSV written by `run` instead.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "loss-gap")]
    metric: Metric,
    #[arg(long)]
    seed_override: Option<u64>,
    /// Also cluster with k-medoids and print the assignment.
    #[arg(long)]
    k: Option<usize>,
    /// Write the matrix (and assignment) CSVs here.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn load_experiment(name_or_path: &str) -> Result<ExperimentConfig> {
    let path = Path::new(name_or_path);
    if path.exists() {
        return ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()));
    }
    harness::profile(name_or_path).with_context(|| {
        let names: Vec<&str> = harness::PROFILES.iter().map(|p| p.0).collect();
        format!("`{name_or_path}` is neither a file nor a profile ({})", names.join(", "))
    })
}

fn with_seeds(cfg: ExperimentConfig, seeds: Option<Vec<u64>>) -> Result<ExperimentConfig> {
    let cfg = match seeds {
        Some(s) => cfg.with_seeds(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = with_seeds(load_experiment(&args.config)?, args.seed_override)?;
    let out =
        args.output_dir.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results").join(&cfg.name));
    let report = harness::run_experiment(&cfg, &out)?;
    if !report.resumed.is_empty() {
        eprintln!("reused completed seeds {:?}", report.resumed);
    }
    let last = cfg.fed.global_iterations;
    println!("{}: final iteration {last}, {} seeds", cfg.name, cfg.seeds.len());
    for row in report.summary.iter().filter(|r| r.iteration == last) {
        match (row.acc_mean, row.acc_std) {
            (Some(m), Some(s)) => println!("  {:<12} {:6.2} ± {:.2}", row.algorithm, 100.0 * m, 100.0 * s),
            _ => {
                let losses: Vec<f64> = report
                    .raw
                    .iter()
                    .filter(|r| r.iteration == last && r.algorithm == row.algorithm)
                    .map(|r| r.train_loss_mean)
                    .collect();
                let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
                println!("  {:<12} train loss {mean:.4}", row.algorithm);
            }
        }
    }
    for row in &report.clustering {
        if let Some(ari) = row.ari {
            println!("  seed {} {:<12} clusters {} ARI {ari:.4}", row.seed, row.algorithm, row.num_clusters);
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let configs = args
        .config
        .iter()
        .map(|c| with_seeds(load_experiment(c)?, args.seed_override.clone()))
        .collect::<Result<Vec<_>>>()?;
    let table = harness::compare_configs(&configs, &args.iterations)?;
    print!("{}", table.render());
    if let Some(dir) = args.output_dir {
        fs::create_dir_all(&dir)?;
        table.write_csv(&dir.join("comparison.csv"))?;
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => VerifyConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => VerifyConfig::from_toml(harness::VERIFY_PROFILE)?,
    };
    if let Some(s) = args.seed_override {
        if let Some(t) = cfg.theorem.as_mut() {
            t.seed = s;
        }
        if let Some(x) = cfg.sandwich.as_mut() {
            x.seed = s;
        }
        if let Some(x) = cfg.rademacher.as_mut() {
            x.seed = s;
        }
        if let Some(x) = cfg.discrepancy.as_mut() {
            x.seed = s;
        }
    }
    let outcome = harness::verify(&cfg, args.output_dir.as_deref())?;
    for line in &outcome.lines {
        println!("{line}");
    }
    Ok(outcome.all_pass())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = load_experiment(&args.config)?;
    let seed = args.seed_override.unwrap_or(cfg.seeds[0]);
    let n = harness::gen_data(&cfg, seed, &args.output_dir)?;
    println!("wrote {n} clients to {}", args.output_dir.display());
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let metric = MetricKind::from(args.metric);
    let dm = match (&args.matrix, &args.config) {
        (Some(p), _) => {
            DistanceMatrix::read_csv(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?, metric)?
        }
        (None, Some(c)) => {
            let cfg = load_experiment(c)?;
            harness::warmup_matrix(&cfg, args.seed_override.unwrap_or(cfg.seeds[0]), metric)?
        }
        (None, None) => bail!("either --config or --matrix is required"),
    };
    print!("{}", harness::describe_matrix(&dm));
    let assignment = match args.k {
        Some(k) => {
            let run = clustering::k_medoids_best(&dm, &KMedoidsConfig::new(k), args.seed_override.unwrap_or(0))?;
            println!("k-medoids k={k} objective {:.6e}", run.objective);
            for (id, label) in dm.client_ids.iter().zip(&run.assignment.labels) {
                println!("  client {id} -> cluster {label}");
            }
            Some(run.assignment)
        }
        None => None,
    };
    if let Some(dir) = args.output_dir {
        fs::create_dir_all(&dir)?;
        dm.write_csv(fs::File::create(dir.join("distances.csv"))?)?;
        if let Some(a) = assignment {
            a.write_csv(&dm.client_ids, fs::File::create(dir.join("assignment.csv"))?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run(a) => run(a).map(|()| true),
        Command::Compare(a) => compare(a).map(|()| true),
        Command::Verify(a) => verify(a),
        Command::GenData(a) => gen_data(a).map(|()| true),
        Command::InspectMatrix(a) => inspect(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
