//! Experiment orchestration: TOML configs, seeded multi-run experiments with
//! CSV/JSON artifacts, comparison tables and the bound verification suite.
//!
//! Raw logs use `iteration,algorithm,seed,accuracy_mean_over_clients,train_loss_mean,num_clusters`
//! and summaries `iteration,algorithm,acc_mean,acc_std`; accuracies are
//! fractions in `[0, 1]` and empty for regression models.

mod config;
mod run;
mod tools;
mod verify;

pub use config::{
    Algorithm, DiscrepancySection, ExperimentConfig, FedSection, IfcaSection, LcflSection, RademacherSection, RunSpec,
    SandwichSection, VerifyConfig,
};
pub use run::{
    check_comparable, check_iterations, clustering_rows, compare, compare_configs, raw_rows, read_rows, run_experiment,
    run_in_memory, run_seed, summarize, write_rows, AlgorithmRun, ClusteringRow, ComparisonTable, ExperimentReport,
    Manifest, RawRow, SeedOutcome, SummaryRow,
};
pub use tools::{describe_matrix, gen_data, warmup_matrix};
pub use verify::{
    discrepancy_check, rademacher_check, sandwich_check, verify, DiscrepancyReport, PropertyLine, RademacherReport,
    SandwichReport, VerifyOutcome,
};

/// Shipped desk-scale profiles, by name.
pub const PROFILES: &[(&str, &str)] = &[
    ("rotmnist-mini", include_str!("../../../../profiles/rotmnist-mini.toml")),
    ("femnist-mini", include_str!("../../../../profiles/femnist-mini.toml")),
    ("linear-k2", include_str!("../../../../profiles/linear-k2.toml")),
];

/// Default bound verification config.
pub const VERIFY_PROFILE: &str = include_str!("../../../../profiles/verify.toml");

pub fn profile(name: &str) -> Option<ExperimentConfig> {
    PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ExperimentConfig::from_toml(text).expect("shipped profiles are valid"))
}
