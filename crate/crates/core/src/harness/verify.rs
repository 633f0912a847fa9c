//! Bound verification suite: theorem frequency check, sandwich sweep,
//! Rademacher estimator sanity and the discrepancy chain.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{DiscrepancySection, RademacherSection, SandwichSection, VerifyConfig};
use crate::bounds::{self, BoundedProblem, FunctionClass, PopulationSpec, TheoremConfig, TruncatedLinear};
use crate::data::ClientDataset;
use crate::model::ModelSpec;
use crate::seed::{self, stream};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for PropertyLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn line(name: &str, pass: bool, detail: String) -> PropertyLine {
    PropertyLine { name: name.to_string(), pass, detail }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub sweep: bounds::SandwichSweep,
    pub tight: bounds::Sandwich,
}

pub fn sandwich_check(cfg: &SandwichSection) -> Result<(SandwichReport, Vec<PropertyLine>)> {
    let sweep = bounds::sandwich_sweep(cfg.instances, cfg.dim, cfg.rel_slack, cfg.seed)?;
    let d = cfg.dim.max(1);
    let eye = nalgebra::DMatrix::identity(d, d);
    let mut shifted = vec![0.0; d];
    shifted[0] = 2.0;
    let tight = bounds::loss_gap_sandwich(
        &PopulationSpec::centered(&eye, shifted, 0.0)?,
        &PopulationSpec::centered(&eye, vec![0.0; d], 0.0)?,
    )?;
    let lines = vec![
        line(
            "sandwich-sweep",
            sweep.passed == sweep.instances,
            format!("{}/{} instances within {:e} relative slack", sweep.passed, sweep.instances, cfg.rel_slack),
        ),
        line(
            "sandwich-tight",
            tight.lower == 4.0 && tight.gap == 4.0 && tight.upper == 4.0,
            format!("lower {} gap {} upper {} (expected 4)", tight.lower, tight.gap, tight.upper),
        ),
    ];
    Ok((SandwichReport { sweep, tight }, lines))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RademacherReport {
    pub degenerate: bounds::RademacherEstimate,
    pub linear: bounds::RademacherEstimate,
    pub linear_ceiling: f64,
    /// `(m, mean estimate over repeats)` for `m`, `2m`, `4m`.
    pub trend: Vec<(usize, f64)>,
}

fn sanity_source(cfg: &RademacherSection) -> Result<crate::data::LinearSource> {
    let mut beta = vec![0.0; cfg.dim];
    beta[0] = 0.5 * cfg.weight_bound;
    TruncatedLinear { beta, noise_half_width: 0.5 }.source(cfg.radius)
}

fn sample(cfg: &RademacherSection, m: usize, key: u64) -> Result<ClientDataset> {
    Ok(sanity_source(cfg)?.sample(0, m, &mut seed::rng(cfg.seed, &[stream::DATA, m as u64, key])).0)
}

pub fn rademacher_check(cfg: &RademacherSection) -> Result<(RademacherReport, Vec<PropertyLine>)> {
    let y_bound = 0.5 * cfg.weight_bound * cfg.radius + 0.5;
    let problem_with =
        |b: f64| BoundedProblem::new(ModelSpec::linear(cfg.dim).with_weight_bound(b), cfg.radius, y_bound);
    let problem = problem_with(cfg.weight_bound)?;
    let data = sample(cfg, cfg.m, 0)?;
    let degenerate = bounds::rademacher_estimate(
        &problem_with(0.0)?,
        FunctionClass::RescaledLoss,
        &data,
        cfg.num_sigma,
        cfg.ascent,
        cfg.seed,
    )?;
    let linear = bounds::rademacher_estimate(
        &problem,
        FunctionClass::LinearPredictor,
        &data,
        cfg.num_sigma,
        cfg.ascent,
        cfg.seed,
    )?;
    let max_norm =
        (0..data.len()).map(|i| (data.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0).sqrt()).fold(0.0, f64::max);
    let linear_ceiling = cfg.weight_bound * max_norm / (cfg.m as f64).sqrt();
    let mut trend = Vec::new();
    for m in [cfg.m, 2 * cfg.m, 4 * cfg.m] {
        let mut total = 0.0;
        for r in 0..cfg.repeats {
            let d = sample(cfg, m, r as u64 + 1)?;
            let key = seed::derive(cfg.seed, &[m as u64, r as u64]);
            total +=
                bounds::rademacher_estimate(&problem, FunctionClass::RescaledLoss, &d, cfg.num_sigma, cfg.ascent, key)?
                    .estimate;
        }
        trend.push((m, total / cfg.repeats as f64));
    }
    let lines = vec![
        line(
            "rademacher-degenerate",
            degenerate.estimate.abs() <= 2.0 * degenerate.std_error,
            format!("estimate {:.3e} vs 2 std errors {:.3e}", degenerate.estimate, 2.0 * degenerate.std_error),
        ),
        line(
            "rademacher-ceiling",
            linear.estimate <= linear_ceiling + 3.0 * linear.std_error,
            format!(
                "estimate {:.4} vs ceiling {:.4} + 3 std errors {:.4}",
                linear.estimate,
                linear_ceiling,
                3.0 * linear.std_error
            ),
        ),
        line(
            "rademacher-trend",
            trend.windows(2).all(|w| w[1].1 < w[0].1),
            trend.iter().map(|(m, v)| format!("m={m}: {v:.4}")).collect::<Vec<_>>().join(", "),
        ),
    ];
    Ok((RademacherReport { degenerate, linear, linear_ceiling, trend }, lines))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub d_hat: f64,
    pub disc_ij: f64,
    pub disc_ji: f64,
    pub tolerance: f64,
}

pub fn discrepancy_check(
    theorem: &TheoremConfig,
    cfg: &DiscrepancySection,
) -> Result<(DiscrepancyReport, Vec<PropertyLine>)> {
    theorem.validate()?;
    let problem = theorem.problem()?;
    let pi = theorem.pop_i.population(theorem.radius)?;
    let pj = theorem.pop_j.population(theorem.radius)?;
    let wi = bounds::population_optimizer(&pi)?;
    let wj = bounds::population_optimizer(&pj)?;
    let d_hat = (problem.expected_loss(&pi, &wj)? - problem.expected_loss(&pi, &wi)?).abs()
        + (problem.expected_loss(&pj, &wi)? - problem.expected_loss(&pj, &wj)?).abs();
    let disc_ij = bounds::label_discrepancy_estimate(&pi, &pj, &problem, cfg.ascent, cfg.seed)?;
    let disc_ji = bounds::label_discrepancy_estimate(&pj, &pi, &problem, cfg.ascent, cfg.seed)?;
    let lines = vec![
        line(
            "discrepancy-chain",
            d_hat <= 2.0 * disc_ij + cfg.tolerance,
            format!("d_hat {d_hat:.6} <= 2 disc {:.6}", 2.0 * disc_ij),
        ),
        line(
            "discrepancy-symmetric",
            (disc_ij - disc_ji).abs() <= cfg.tolerance.max(1e-9 * disc_ij.abs()),
            format!("disc(i,j) {disc_ij:.6} vs disc(j,i) {disc_ji:.6}"),
        ),
    ];
    Ok((DiscrepancyReport { d_hat, disc_ij, disc_ji, tolerance: cfg.tolerance }, lines))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub lines: Vec<PropertyLine>,
    pub theorem: Option<bounds::TheoremReport>,
    pub sandwich: Option<SandwichReport>,
    pub rademacher: Option<RademacherReport>,
    pub discrepancy: Option<DiscrepancyReport>,
}

impl VerifyOutcome {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }
}

/// Run every configured section; JSON reports go to `out` when given.
pub fn verify(cfg: &VerifyConfig, out: Option<&Path>) -> Result<VerifyOutcome> {
    cfg.validate()?;
    let mut outcome =
        VerifyOutcome { lines: Vec::new(), theorem: None, sandwich: None, rademacher: None, discrepancy: None };
    if let Some(t) = &cfg.theorem {
        let r = bounds::verify_theorem1(t)?;
        outcome.lines.push(line(
            "theorem-frequency",
            r.pass,
            format!(
                "{}/{} trials within C_delta (frequency {:.4}, {:.0}% lower bound {:.4}, required {:.4})",
                r.test.successes,
                r.test.trials,
                r.frequency,
                100.0 * r.test.confidence,
                r.test.lower_bound,
                r.required
            ),
        ));
        outcome.theorem = Some(r);
    }
    if let Some(s) = &cfg.sandwich {
        let (r, lines) = sandwich_check(s)?;
        outcome.lines.extend(lines);
        outcome.sandwich = Some(r);
    }
    if let Some(s) = &cfg.rademacher {
        let (r, lines) = rademacher_check(s)?;
        outcome.lines.extend(lines);
        outcome.rademacher = Some(r);
    }
    if let (Some(t), Some(s)) = (&cfg.theorem, &cfg.discrepancy) {
        let (r, lines) = discrepancy_check(t, s)?;
        outcome.lines.extend(lines);
        outcome.discrepancy = Some(r);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let write = |name: &str, json: String| fs::write(dir.join(name), json + "\n");
        if let Some(r) = &outcome.theorem {
            write("theorem1.json", serde_json::to_string_pretty(r)?)?;
        }
        if let Some(r) = &outcome.sandwich {
            write("sandwich.json", serde_json::to_string_pretty(r)?)?;
        }
        if let Some(r) = &outcome.rademacher {
            write("rademacher.json", serde_json::to_string_pretty(r)?)?;
        }
        if let Some(r) = &outcome.discrepancy {
            write("discrepancy.json", serde_json::to_string_pretty(r)?)?;
        }
        let text: String = outcome.lines.iter().map(|l| format!("{l}\n")).collect();
        fs::write(dir.join("verify.txt"), text)?;
    }
    Ok(outcome)
}
