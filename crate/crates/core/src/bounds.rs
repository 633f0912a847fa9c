//! Generalization-bound machinery for the loss-gap metric.
//!
//! Losses are squared errors of a linear predictor with an augmented bias,
//! rescaled to `[0, 1]` by an analytic bound that holds whenever the weights
//! lie in a ball of radius `B`, features in a ball of radius `R` and labels in
//! `[-Y, Y]`.
//!
//! The Rademacher estimates are Monte-Carlo averages of a supremum that is
//! itself found by projected gradient ascent. A local ascent can only miss
//! the true supremum, so every estimate here is a lower estimate and the
//! resulting `C_delta` is never larger than its exact value.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::data::{ClientDataset, LinearSource, Noise, Targets};
use crate::model::{ModelSpec, ParamVector};
use crate::seed::{self, stream};
use crate::{parallel, Error, Result};

const SYM_TOL: f64 = 1e-12;

/// Second-order description of a joint `(X, y)` law with `y` linear in `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub mu_x: Vec<f64>,
    /// Row-major `d x d`.
    pub sigma_xx: Vec<f64>,
    pub sigma_xy: Vec<f64>,
    pub mu_y: f64,
    pub noise_variance: f64,
}

impl PopulationSpec {
    pub fn centered(sigma_xx: &DMatrix<f64>, sigma_xy: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let d = sigma_xy.len();
        let pop = Self {
            mu_x: vec![0.0; d],
            sigma_xx: sigma_xx.transpose().as_slice().to_vec(),
            sigma_xy,
            mu_y: 0.0,
            noise_variance,
        };
        pop.validate()?;
        Ok(pop)
    }

    pub fn dim(&self) -> usize {
        self.mu_x.len()
    }

    pub fn sigma_xx_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.sigma_xx)
    }

    pub fn is_centered(&self) -> bool {
        self.mu_y == 0.0 && self.mu_x.iter().all(|&v| v == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.sigma_xy.len() != d || self.sigma_xx.len() != d * d {
            return Err(Error::Shape("population moments have inconsistent dimensions".into()));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Parameter("noise variance must be >= 0".into()));
        }
        let s = self.sigma_xx_matrix();
        if (&s - s.transpose()).amax() > SYM_TOL * s.amax().max(1.0) {
            return Err(Error::Parameter("Sigma_XX must be symmetric".into()));
        }
        if s.cholesky().is_none() {
            return Err(Error::Parameter("Sigma_XX must be positive definite".into()));
        }
        Ok(())
    }

    /// `Sigma_XX^{-1} Sigma_Xy`
    pub fn beta(&self) -> Result<Vec<f64>> {
        let chol = self
            .sigma_xx_matrix()
            .cholesky()
            .ok_or_else(|| Error::Parameter("Sigma_XX must be positive definite".into()))?;
        Ok(chol.solve(&DVector::from_column_slice(&self.sigma_xy)).as_slice().to_vec())
    }

    /// `E[y^2]` under `y = mu_y + beta^T (X - mu_X) + noise`.
    pub fn second_moment_y(&self) -> Result<f64> {
        let beta = self.beta()?;
        let explained: f64 = beta.iter().zip(&self.sigma_xy).map(|(b, s)| b * s).sum();
        Ok(explained + self.noise_variance + self.mu_y * self.mu_y)
    }

    /// Augmented moments `A = E[x~ x~^T]` and `b = E[x~ y]` with `x~ = (x, 1)`.
    pub fn augmented_moments(&self) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let s = self.sigma_xx_matrix();
        let mu = DVector::from_column_slice(&self.mu_x);
        let mut a = DMatrix::zeros(d + 1, d + 1);
        a.view_mut((0, 0), (d, d)).copy_from(&(s + &mu * mu.transpose()));
        a.view_mut((0, d), (d, 1)).copy_from(&mu);
        a.view_mut((d, 0), (1, d)).copy_from(&mu.transpose());
        a[(d, d)] = 1.0;
        let mut b = DVector::zeros(d + 1);
        for i in 0..d {
            b[i] = self.sigma_xy[i] + self.mu_y * self.mu_x[i];
        }
        b[d] = self.mu_y;
        (a, b)
    }
}

fn check_linear(pop: &PopulationSpec, w: &ParamVector) -> Result<()> {
    w.check_spec(&ModelSpec::linear(pop.dim()))
}

/// `E(w^T x~ - y)^2 = w^T A w - 2 w^T b + E[y^2]`, exactly.
pub fn expected_linear_loss(pop: &PopulationSpec, w: &ParamVector) -> Result<f64> {
    check_linear(pop, w)?;
    let (a, b) = pop.augmented_moments();
    let w = DVector::from_column_slice(w.values());
    Ok(w.dot(&(&a * &w)) - 2.0 * w.dot(&b) + pop.second_moment_y()?)
}

pub fn population_optimizer(pop: &PopulationSpec) -> Result<ParamVector> {
    pop.validate()?;
    let (a, b) = pop.augmented_moments();
    let chol = a.cholesky().ok_or(Error::Singular { condition: f64::INFINITY })?;
    ParamVector::from_values(&ModelSpec::linear(pop.dim()), chol.solve(&b).as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub lower: f64,
    pub gap: f64,
    pub upper: f64,
}

impl Sandwich {
    pub fn holds(&self, rel_slack: f64) -> bool {
        let slack = rel_slack * self.gap.abs().max(self.upper.abs()).max(f64::MIN_POSITIVE);
        self.lower <= self.gap + slack && self.gap <= self.upper + slack
    }
}

/// Excess loss under `pop` of the optimizer of `pop_hat`, bracketed by
/// `||dSigma_Xy||^2 / lambda_max` and `||dSigma_Xy||^2 / lambda_min`.
pub fn loss_gap_sandwich(pop: &PopulationSpec, pop_hat: &PopulationSpec) -> Result<Sandwich> {
    pop.validate()?;
    pop_hat.validate()?;
    if !pop.is_centered() || !pop_hat.is_centered() {
        return Err(Error::Contract("the sandwich bound needs centered populations".into()));
    }
    if pop.dim() != pop_hat.dim()
        || pop.sigma_xx.iter().zip(&pop_hat.sigma_xx).any(|(a, b)| (a - b).abs() > SYM_TOL * a.abs().max(1.0))
    {
        return Err(Error::Contract("the sandwich bound needs identical Sigma_XX".into()));
    }
    let w = population_optimizer(pop)?;
    let w_hat = population_optimizer(pop_hat)?;
    let gap = expected_linear_loss(pop, &w_hat)? - expected_linear_loss(pop, &w)?;
    let eig = pop.sigma_xx_matrix().symmetric_eigenvalues();
    let delta2: f64 = pop.sigma_xy.iter().zip(&pop_hat.sigma_xy).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(Sandwich { lower: delta2 / eig.max(), gap, upper: delta2 / eig.min() })
}

/// `sqrt(log(2 / delta) / (2 m))`
pub fn hoeffding_epsilon(m: usize, delta: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Parameter("sample count must be >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta = {delta} must lie in (0, 1)")));
    }
    Ok(((2.0 / delta).ln() / (2.0 * m as f64)).sqrt())
}

/// `2 eps(m_i) + 2 eps(m_j) + rad_i + rad_j`
pub fn c_delta(m_i: usize, m_j: usize, rad_i: f64, rad_j: f64, delta: f64) -> Result<f64> {
    if !(rad_i >= 0.0 && rad_j >= 0.0) {
        return Err(Error::Parameter("Rademacher terms must be >= 0".into()));
    }
    Ok(2.0 * hoeffding_epsilon(m_i, delta)? + 2.0 * hoeffding_epsilon(m_j, delta)? + rad_i + rad_j)
}

/// Linear predictors in a weight ball, evaluated on a bounded domain with a
/// loss rescaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedProblem {
    spec: ModelSpec,
    domain_bound: f64,
    label_bound: f64,
    loss_scale: f64,
}

impl BoundedProblem {
    /// `loss_scale = (B sqrt(R^2 + 1) + Y)^2` bounds `(w^T x~ - y)^2`.
    pub fn new(spec: ModelSpec, domain_bound: f64, label_bound: f64) -> Result<Self> {
        spec.validate()?;
        if spec.kind != crate::model::ModelKind::LinearRegression {
            return Err(Error::Unsupported("bounded problems are defined for linear models".into()));
        }
        let b = spec.weight_bound.ok_or_else(|| Error::Contract("a bounded problem needs a weight bound".into()))?;
        if !(domain_bound > 0.0 && label_bound >= 0.0) {
            return Err(Error::Parameter("domain and label bounds must be positive".into()));
        }
        let loss_scale = (b * (domain_bound * domain_bound + 1.0).sqrt() + label_bound).powi(2);
        if !(loss_scale > 0.0) {
            return Err(Error::Parameter("loss bound is zero".into()));
        }
        Ok(Self { spec, domain_bound, label_bound, loss_scale })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn weight_bound(&self) -> f64 {
        self.spec.weight_bound.unwrap_or(0.0)
    }

    pub fn domain_bound(&self) -> f64 {
        self.domain_bound
    }

    pub fn label_bound(&self) -> f64 {
        self.label_bound
    }

    pub fn loss_scale(&self) -> f64 {
        self.loss_scale
    }

    /// Rescaled loss of a single sample.
    pub fn sample_loss(&self, w: &[f64], x: &[f64], y: f64) -> f64 {
        let d = x.len();
        let pred: f64 = w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d];
        (pred - y).powi(2) / self.loss_scale
    }

    /// Rescaled mean loss on a dataset.
    pub fn empirical_loss(&self, w: &ParamVector, data: &ClientDataset) -> Result<f64> {
        let y = regression_targets(data)?;
        Ok((0..data.len()).map(|i| self.sample_loss(w.values(), data.row(i), y[i])).sum::<f64>() / data.len() as f64)
    }

    pub fn expected_loss(&self, pop: &PopulationSpec, w: &ParamVector) -> Result<f64> {
        Ok(expected_linear_loss(pop, w)? / self.loss_scale)
    }

    /// Empirical risk minimizer within the weight ball: the least-squares
    /// solution, or the ridge solution whose norm equals `B` when that lies
    /// outside.
    pub fn constrained_minimizer(&self, data: &ClientDataset) -> Result<ParamVector> {
        let (a, b) = empirical_moments(data)?;
        let radius = self.weight_bound();
        let solve = |lambda: f64| -> Result<DVector<f64>> {
            let mut m = a.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += lambda;
            }
            m.cholesky().map(|c| c.solve(&b)).ok_or(Error::Singular { condition: f64::INFINITY })
        };
        let eig = a.symmetric_eigenvalues();
        let condition = eig.max() / eig.min().max(f64::MIN_POSITIVE);
        let free = if condition <= crate::trainer::MAX_CONDITION { Some(solve(0.0)?) } else { None };
        let w = match free {
            Some(w) if w.norm() <= radius => w,
            _ if radius == 0.0 => DVector::zeros(b.len()),
            _ => {
                let mut hi = (b.norm() / radius).max(1e-12);
                while solve(hi)?.norm() > radius {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if solve(mid)?.norm() > radius {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                solve(hi)?
            }
        };
        ParamVector::from_values(&ModelSpec::linear(data.dim()), w.as_slice().to_vec())
    }
}

fn regression_targets(data: &ClientDataset) -> Result<&[f64]> {
    match &data.targets {
        Targets::Regression(y) => Ok(y),
        Targets::Classes { .. } => Err(Error::Unsupported("bounds need regression targets".into())),
    }
}

/// `(X~^T X~ / m, X~^T y / m)`
fn empirical_moments(data: &ClientDataset) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let y = regression_targets(data)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("moments need samples"));
    }
    let d = data.dim() + 1;
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    let mut xt = DVector::zeros(d);
    for i in 0..data.len() {
        xt.rows_mut(0, d - 1).copy_from_slice(data.row(i));
        xt[d - 1] = 1.0;
        a.ger(1.0, &xt, &xt, 1.0);
        b.axpy(y[i], &xt, 1.0);
    }
    let m = data.len() as f64;
    Ok((a / m, b / m))
}

// ---------------------------------------------------------------------------
// Rademacher complexity

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionClass {
    /// `x -> w^T x~` with `||w|| <= B`.
    LinearPredictor,
    /// `(x, y) -> loss(w; x, y) / loss_scale` with `||w|| <= B`.
    RescaledLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentBudget {
    pub starts: usize,
    pub steps: usize,
}

impl Default for AscentBudget {
    fn default() -> Self {
        Self { starts: 16, steps: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub num_sigma: usize,
}

/// Maximize `w^T Q w - 2 w^T r` over `||w|| <= radius` by projected gradient
/// ascent from several starts (the origin first, then seeded points in the ball).
fn ball_ascent(q: &DMatrix<f64>, r: &DVector<f64>, radius: f64, budget: AscentBudget, seed_v: u64) -> f64 {
    let f = |w: &DVector<f64>| w.dot(&(q * w)) - 2.0 * w.dot(r);
    if radius == 0.0 {
        return 0.0;
    }
    let n = r.len();
    let lip = 2.0 * q.norm() + f64::EPSILON;
    let step = 1.0 / lip;
    let project = |w: &mut DVector<f64>| {
        let norm = w.norm();
        if norm > radius {
            *w *= radius / norm;
        }
    };
    let mut rng = seed::rng(seed_v, &[]);
    let mut best = f64::NEG_INFINITY;
    for s in 0..budget.starts.max(1) {
        let mut w = DVector::zeros(n);
        if s > 0 {
            let dir: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
            let scale = radius * rng.random::<f64>().powf(1.0 / n as f64) / dir.norm().max(f64::MIN_POSITIVE);
            w = dir * scale;
        }
        let mut val = f(&w);
        best = best.max(val);
        for _ in 0..budget.steps {
            let grad = 2.0 * (q * &w - r);
            if grad.norm() == 0.0 {
                break;
            }
            // a pure linear objective has no curvature to set the step; jump to the boundary
            let mut next = if q.norm() == 0.0 { &w + grad.normalize() * (2.0 * radius) } else { &w + step * grad };
            project(&mut next);
            let next_val = f(&next);
            if next_val <= val + 1e-15 * val.abs().max(1.0) {
                best = best.max(next_val);
                break;
            }
            w = next;
            val = next_val;
            best = best.max(val);
        }
    }
    best
}

/// Monte-Carlo estimate of the empirical Rademacher complexity of a class on
/// one dataset. The supremum per sign draw is a local ascent, so this is a
/// lower estimate.
pub fn rademacher_estimate(
    problem: &BoundedProblem,
    class: FunctionClass,
    data: &ClientDataset,
    num_sigma: usize,
    budget: AscentBudget,
    seed_v: u64,
) -> Result<RademacherEstimate> {
    if num_sigma < 2 {
        return Err(Error::Parameter("num_sigma must be >= 2".into()));
    }
    if data.dim() != problem.dim() {
        return Err(Error::Shape("dataset dimension does not match the problem".into()));
    }
    let y = regression_targets(data)?;
    let m = data.len();
    if m == 0 {
        return Err(Error::EmptyInput("Rademacher estimate needs samples"));
    }
    let d = data.dim() + 1;
    let radius = problem.weight_bound();
    let draws: Vec<usize> = (0..num_sigma).collect();
    let sups = parallel::map(&draws, |&s| {
        let mut rng = seed::rng(seed_v, &[stream::SIGMA, s as u64]);
        let sigma: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut q = DMatrix::zeros(d, d);
        let mut r = DVector::zeros(d);
        let mut c = 0.0;
        let mut xt = DVector::zeros(d);
        for i in 0..m {
            xt.rows_mut(0, d - 1).copy_from_slice(data.row(i));
            xt[d - 1] = 1.0;
            match class {
                FunctionClass::LinearPredictor => r.axpy(-0.5 * sigma[i], &xt, 1.0),
                FunctionClass::RescaledLoss => {
                    q.ger(sigma[i], &xt, &xt, 1.0);
                    r.axpy(sigma[i] * y[i], &xt, 1.0);
                    c += sigma[i] * y[i] * y[i];
                }
            }
        }
        let scale = match class {
            FunctionClass::LinearPredictor => 1.0 / m as f64,
            FunctionClass::RescaledLoss => 1.0 / (m as f64 * problem.loss_scale()),
        };
        let sup = ball_ascent(&q, &r, radius, budget, seed::derive(seed_v, &[stream::SIGMA, s as u64, 1]));
        scale * (sup + c)
    });
    let n = num_sigma as f64;
    let mean = sups.iter().sum::<f64>() / n;
    let var = sups.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RademacherEstimate { estimate: mean, std_error: (var / n).sqrt(), num_sigma })
}

// ---------------------------------------------------------------------------
// Theorem verification

/// `y = beta^T x + U[-a, a]` with `x` standard normal truncated to `||x|| <= R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedLinear {
    pub beta: Vec<f64>,
    pub noise_half_width: f64,
}

/// Second moment of one coordinate of a standard normal vector conditioned
/// on `||x|| <= radius`.
pub fn truncated_variance(dim: usize, radius: f64) -> Result<f64> {
    let r2 = radius * radius;
    let chi = |k: usize| ChiSquared::new(k as f64).map_err(|e| Error::Parameter(e.to_string()));
    let denom = chi(dim)?.cdf(r2);
    if !(denom > 0.0) {
        return Err(Error::Parameter("truncation radius leaves no mass".into()));
    }
    Ok(chi(dim + 2)?.cdf(r2) / denom)
}

impl TruncatedLinear {
    pub fn population(&self, radius: f64) -> Result<PopulationSpec> {
        let d = self.beta.len();
        let c = truncated_variance(d, radius)?;
        PopulationSpec::centered(
            &(DMatrix::identity(d, d) * c),
            self.beta.iter().map(|b| b * c).collect(),
            self.noise_half_width.powi(2) / 3.0,
        )
    }

    pub fn source(&self, radius: f64) -> Result<LinearSource> {
        Ok(LinearSource::new(self.beta.clone(), None, Noise::Uniform(self.noise_half_width))?.truncated(radius))
    }

    /// Largest `|y|` on the truncated domain.
    pub fn label_bound(&self, radius: f64) -> f64 {
        self.beta.iter().map(|b| b * b).sum::<f64>().sqrt() * radius + self.noise_half_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum RademacherMode {
    /// Estimated once per population, averaged over fresh samples.
    Average { datasets: usize, num_sigma: usize },
    /// Estimated on each trial's own samples.
    PerTrial { num_sigma: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremConfig {
    pub pop_i: TruncatedLinear,
    pub pop_j: TruncatedLinear,
    pub radius: f64,
    pub weight_bound: f64,
    pub m_i: usize,
    pub m_j: usize,
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
    pub rademacher: RademacherMode,
    #[serde(default)]
    pub ascent: AscentBudget,
    /// Confidence level of the one-sided binomial test.
    pub confidence: f64,
}

impl TheoremConfig {
    pub fn standard() -> Self {
        Self {
            pop_i: TruncatedLinear { beta: vec![1.0, -0.5], noise_half_width: 0.5 },
            pop_j: TruncatedLinear { beta: vec![-0.5, 1.0], noise_half_width: 0.5 },
            radius: 3.0,
            weight_bound: 2.0,
            m_i: 200,
            m_j: 200,
            delta: 0.1,
            trials: 1000,
            seed: 2024,
            rademacher: RademacherMode::Average { datasets: 8, num_sigma: 64 },
            ascent: AscentBudget::default(),
            confidence: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("theorem.delta", format!("{} must lie in (0, 1)", self.delta)));
        }
        if self.pop_i.beta.len() != self.pop_j.beta.len() || self.pop_i.beta.is_empty() {
            return Err(Error::config("theorem.pop_j.beta", "both populations need the same nonzero dimension"));
        }
        if self.m_i == 0 || self.m_j == 0 {
            return Err(Error::config("theorem.m_i", "sample counts must be >= 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("theorem.trials", "must be >= 1"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("theorem.radius", "must be > 0"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("theorem.confidence", "must lie in (0, 1)"));
        }
        for (key, p) in [("theorem.pop_i", &self.pop_i), ("theorem.pop_j", &self.pop_j)] {
            let norm = p.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
            if !(norm < self.weight_bound) {
                return Err(Error::config(key, "the population optimizer must lie inside the weight ball"));
            }
            if !(p.noise_half_width >= 0.0) {
                return Err(Error::config(key, "noise_half_width must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn problem(&self) -> Result<BoundedProblem> {
        let y = self.pop_i.label_bound(self.radius).max(self.pop_j.label_bound(self.radius));
        BoundedProblem::new(
            ModelSpec::linear(self.pop_i.beta.len()).with_weight_bound(self.weight_bound),
            self.radius,
            y,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinomialCheck {
    pub successes: usize,
    pub trials: usize,
    pub threshold: f64,
    pub confidence: f64,
    /// One-sided lower Clopper-Pearson bound at `confidence`.
    pub lower_bound: f64,
    /// Two-sided Clopper-Pearson interval at `confidence`.
    pub interval: (f64, f64),
    /// `P(X >= successes)` when the true rate equals `threshold`.
    pub p_value: f64,
    pub pass: bool,
}

/// One-sided exact binomial test of `rate > threshold`.
pub fn binomial_check(successes: usize, trials: usize, threshold: f64, confidence: f64) -> Result<BinomialCheck> {
    if successes > trials || trials == 0 {
        return Err(Error::Parameter("successes must lie in [0, trials] with trials > 0".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) || !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Parameter("threshold and confidence must lie in (0, 1)".into()));
    }
    let (k, n) = (successes as f64, trials as f64);
    let beta = |a: f64, b: f64| Beta::new(a, b).map_err(|e| Error::Parameter(e.to_string()));
    let alpha = 1.0 - confidence;
    let lower =
        |level: f64| -> Result<f64> { Ok(if successes == 0 { 0.0 } else { beta(k, n - k + 1.0)?.inverse_cdf(level) }) };
    let upper = |level: f64| -> Result<f64> {
        Ok(if successes == trials { 1.0 } else { beta(k + 1.0, n - k)?.inverse_cdf(1.0 - level) })
    };
    let binom = Binomial::new(threshold, trials as u64).map_err(|e| Error::Parameter(e.to_string()))?;
    let p_value = if successes == 0 { 1.0 } else { binom.sf(successes as u64 - 1) };
    let lower_bound = lower(alpha)?;
    Ok(BinomialCheck {
        successes,
        trials,
        threshold,
        confidence,
        lower_bound,
        interval: (lower(alpha / 2.0)?, upper(alpha / 2.0)?),
        p_value,
        pass: lower_bound >= threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub config: TheoremConfig,
    pub loss_scale: f64,
    pub truncated_variance: f64,
    pub rejection_rate: f64,
    /// Expected-loss distance at the two population optimizers.
    pub d_hat: f64,
    pub rademacher_i: f64,
    pub rademacher_j: f64,
    /// One value per trial (constant under averaged Rademacher terms).
    pub c_delta: Vec<f64>,
    pub abs_error: Vec<f64>,
    /// Same as `abs_error` but with `d_hat` re-evaluated at each trial's
    /// empirical minimizers.
    pub abs_error_plugin: Vec<f64>,
    pub frequency: f64,
    pub frequency_plugin: f64,
    pub required: f64,
    pub test: BinomialCheck,
    pub pass: bool,
}

fn loss_gap(
    li: impl Fn(&ParamVector) -> Result<f64>,
    lj: impl Fn(&ParamVector) -> Result<f64>,
    wi: &ParamVector,
    wj: &ParamVector,
) -> Result<f64> {
    Ok((li(wj)? - li(wi)?).abs() + (lj(wi)? - lj(wj)?).abs())
}

/// Frequency check of `|d - d_hat| <= C_delta` over repeated sample draws.
pub fn verify_theorem1(cfg: &TheoremConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let problem = cfg.problem()?;
    let pop_i = cfg.pop_i.population(cfg.radius)?;
    let pop_j = cfg.pop_j.population(cfg.radius)?;
    let src_i = cfg.pop_i.source(cfg.radius)?;
    let src_j = cfg.pop_j.source(cfg.radius)?;
    let w_star_i = population_optimizer(&pop_i)?;
    let w_star_j = population_optimizer(&pop_j)?;
    let exp_i = |w: &ParamVector| problem.expected_loss(&pop_i, w);
    let exp_j = |w: &ParamVector| problem.expected_loss(&pop_j, w);
    let d_hat = loss_gap(exp_i, exp_j, &w_star_i, &w_star_j)?;

    let rad_of = |data: &ClientDataset, key: u64| -> Result<f64> {
        let num_sigma = match cfg.rademacher {
            RademacherMode::Average { num_sigma, .. } | RademacherMode::PerTrial { num_sigma } => num_sigma,
        };
        Ok(rademacher_estimate(&problem, FunctionClass::RescaledLoss, data, num_sigma, cfg.ascent, key)?
            .estimate
            .max(0.0))
    };
    let averaged = match cfg.rademacher {
        RademacherMode::Average { datasets, .. } => {
            let mut rad = [0.0; 2];
            for (side, (src, m)) in [(&src_i, cfg.m_i), (&src_j, cfg.m_j)].into_iter().enumerate() {
                let mut total = 0.0;
                for t in 0..datasets.max(1) {
                    let key = seed::derive(cfg.seed, &[stream::SIGMA, side as u64, t as u64]);
                    let (data, _) = src.sample(side, m, &mut seed::rng(key, &[]));
                    total += rad_of(&data, key)?;
                }
                rad[side] = total / datasets.max(1) as f64;
            }
            Some(rad)
        }
        RademacherMode::PerTrial { .. } => None,
    };

    let trials: Vec<usize> = (0..cfg.trials).collect();
    let outcomes = parallel::map(&trials, |&t| -> Result<(f64, f64, f64, usize, usize, [f64; 2])> {
        let mut rng = seed::rng(cfg.seed, &[stream::TRIAL, t as u64]);
        let (si, ri) = src_i.sample(0, cfg.m_i, &mut rng);
        let (sj, rj) = src_j.sample(1, cfg.m_j, &mut rng);
        let wi = problem.constrained_minimizer(&si)?;
        let wj = problem.constrained_minimizer(&sj)?;
        let d = loss_gap(|w| problem.empirical_loss(w, &si), |w| problem.empirical_loss(w, &sj), &wi, &wj)?;
        let d_plugin = loss_gap(exp_i, exp_j, &wi, &wj)?;
        let rad = match averaged {
            Some(r) => r,
            None => [
                rad_of(&si, seed::derive(cfg.seed, &[stream::TRIAL, t as u64, 0]))?,
                rad_of(&sj, seed::derive(cfg.seed, &[stream::TRIAL, t as u64, 1]))?,
            ],
        };
        let c = c_delta(cfg.m_i, cfg.m_j, rad[0], rad[1], cfg.delta)?;
        Ok(((d - d_hat).abs(), (d - d_plugin).abs(), c, ri + rj, si.len() + sj.len(), rad))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rejected = 0;
    let mut accepted = 0;
    let (mut hits, mut hits_plugin) = (0, 0);
    let mut rad_sum = [0.0; 2];
    let mut report_c = Vec::with_capacity(cfg.trials);
    let mut abs_error = Vec::with_capacity(cfg.trials);
    let mut abs_error_plugin = Vec::with_capacity(cfg.trials);
    for (err, err_p, c, rej, acc, rad) in outcomes {
        hits += usize::from(err <= c);
        hits_plugin += usize::from(err_p <= c);
        rejected += rej;
        accepted += acc;
        rad_sum[0] += rad[0];
        rad_sum[1] += rad[1];
        report_c.push(c);
        abs_error.push(err);
        abs_error_plugin.push(err_p);
    }
    let n = cfg.trials as f64;
    let required = (1.0 - cfg.delta).powi(4);
    let test = binomial_check(hits, cfg.trials, required, cfg.confidence)?;
    Ok(TheoremReport {
        loss_scale: problem.loss_scale(),
        truncated_variance: truncated_variance(cfg.pop_i.beta.len(), cfg.radius)?,
        rejection_rate: rejected as f64 / (rejected + accepted) as f64,
        d_hat,
        rademacher_i: rad_sum[0] / n,
        rademacher_j: rad_sum[1] / n,
        c_delta: report_c,
        abs_error,
        abs_error_plugin,
        frequency: hits as f64 / n,
        frequency_plugin: hits_plugin as f64 / n,
        required,
        pass: test.pass,
        test,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// discrepancy and divergence

/// `sup_{||w|| <= B} |L_i(w) - L_j(w)|` on rescaled expected losses, by
/// multi-start projected ascent on both signs of the (quadratic) difference.
pub fn label_discrepancy_estimate(
    pop_i: &PopulationSpec,
    pop_j: &PopulationSpec,
    problem: &BoundedProblem,
    budget: AscentBudget,
    seed_v: u64,
) -> Result<f64> {
    if pop_i.dim() != problem.dim() || pop_j.dim() != problem.dim() {
        return Err(Error::Contract("populations must match the problem dimension".into()));
    }
    pop_i.validate()?;
    pop_j.validate()?;
    let (ai, bi) = pop_i.augmented_moments();
    let (aj, bj) = pop_j.augmented_moments();
    let q = (ai - aj) / problem.loss_scale();
    let r = (bi - bj) / problem.loss_scale();
    let c = (pop_i.second_moment_y()? - pop_j.second_moment_y()?) / problem.loss_scale();
    let radius = problem.weight_bound();
    let up = ball_ascent(&q, &r, radius, budget, seed_v) + c;
    let down = ball_ascent(&(-&q), &(-&r), radius, budget, seed_v) - c;
    Ok(up.max(down).max(0.0))
}

/// `KL(p || q)` between two histograms, normalized first. Infinite when `p`
/// puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape("histograms must have equal nonzero length".into()));
    }
    if p.iter().chain(q).any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Parameter("histogram entries must be finite and >= 0".into()));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if sp == 0.0 || sq == 0.0 {
        return Err(Error::Parameter("histograms need positive mass".into()));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += a * (a / b).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichSweep {
    pub instances: usize,
    pub passed: usize,
    pub worst_relative_violation: f64,
}

/// Random centered equal-covariance instances of the sandwich bound.
pub fn sandwich_sweep(instances: usize, dim: usize, rel_slack: f64, seed_v: u64) -> Result<SandwichSweep> {
    let mut passed = 0;
    let mut worst = 0.0f64;
    for t in 0..instances {
        let mut rng = seed::rng(seed_v, &[stream::TRIAL, t as u64]);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let g = DMatrix::from_fn(dim, dim, |_, _| normal());
        let sigma = &g * g.transpose() + DMatrix::identity(dim, dim) * 0.1;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let sxy: Vec<f64> = (0..dim).map(|_| normal()).collect();
        let sxy_hat: Vec<f64> = (0..dim).map(|_| normal()).collect();
        let pop = PopulationSpec::centered(&sigma, sxy, 0.25)?;
        let pop_hat = PopulationSpec::centered(&sigma, sxy_hat, 0.25)?;
        let s = loss_gap_sandwich(&pop, &pop_hat)?;
        let scale = s.gap.abs().max(f64::MIN_POSITIVE);
        worst = worst.max((s.lower - s.gap) / scale).max((s.gap - s.upper) / scale);
        passed += usize::from(s.holds(rel_slack));
    }
    Ok(SandwichSweep { instances, passed, worst_relative_violation: worst.max(0.0) })
}
