//! Local optimization on a single client.
//!
//! Two regimes are exposed. Federated rounds run `local_epochs` passes of
//! seeded mini-batch SGD with a learning rate that decays geometrically per
//! global iteration. The clustering warm-up runs a fixed number `T` of
//! full-batch gradient steps with a constant step size.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, Targets};
use crate::model::{self, ModelSpec, ParamVector};
use crate::seed::{self, stream};
use crate::{parallel, Error, Result};

/// Condition numbers above this make the moment matrix count as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub init_lr: f64,
    /// Multiplicative decay applied once per global iteration.
    pub lr_decay: f64,
    /// Clipped to the client's sample count.
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(Error::config("train.init_lr", "must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }

    /// `init_lr * lr_decay^global_iter`
    pub fn effective_lr(&self, global_iter: usize) -> f64 {
        self.init_lr * self.lr_decay.powi(global_iter as i32)
    }
}

/// Run `cfg.local_epochs` shuffled mini-batch passes starting from `w_init`.
///
/// Batch order for epoch `e` is seeded by `(run_seed, client_id, global_iter, e)`.
pub fn local_sgd(
    spec: &ModelSpec,
    w_init: &ParamVector,
    data: &ClientDataset,
    cfg: &TrainConfig,
    global_iter: usize,
    run_seed: u64,
) -> Result<ParamVector> {
    w_init.check_spec(spec)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("local training needs samples"));
    }
    let lr = cfg.effective_lr(global_iter);
    let batch = cfg.batch_size.clamp(1, data.len());
    let mut w = w_init.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.local_epochs {
        let mut rng = seed::rng(run_seed, &[stream::BATCH, data.client_id as u64, global_iter as u64, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (loss, grad) = model::evaluate(spec, &w, data, Some(chunk), true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { client: None, iteration: step });
            }
            w.axpy(-lr, &grad.expect("gradient requested"))?;
            if !w.is_finite() {
                return Err(Error::Divergence { client: None, iteration: step });
            }
            step += 1;
        }
    }
    Ok(w)
}

/// `steps` full-batch gradient steps with constant step size.
pub fn gradient_descent(
    spec: &ModelSpec,
    w_init: &ParamVector,
    data: &ClientDataset,
    steps: usize,
    step_size: f64,
) -> Result<ParamVector> {
    let mut w = w_init.clone();
    for t in 0..steps {
        let (loss, grad) = model::evaluate(spec, &w, data, None, true)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { client: None, iteration: t });
        }
        w.axpy(-step_size, &grad.expect("gradient requested"))?;
        if !w.is_finite() {
            return Err(Error::Divergence { client: None, iteration: t });
        }
    }
    Ok(w)
}

/// Exact minimizer of the empirical squared loss (bias folded in as a
/// constant-1 feature), from the empirical second-moment matrix.
pub fn closed_form_linear(data: &ClientDataset) -> Result<ParamVector> {
    let Targets::Regression(y) = &data.targets else {
        return Err(Error::Unsupported("closed form needs regression targets".into()));
    };
    if data.is_empty() {
        return Err(Error::EmptyInput("closed form needs samples"));
    }
    let d = data.dim() + 1;
    let m = data.len() as f64;
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut xt = vec![1.0; d];
    for i in 0..data.len() {
        xt[..d - 1].copy_from_slice(data.row(i));
        for a in 0..d {
            rhs[a] += xt[a] * y[i] / m;
            for b in a..d {
                gram[(a, b)] += xt[a] * xt[b] / m;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let (lo, hi) =
        eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let w = gram.cholesky().ok_or(Error::Singular { condition })?.solve(&rhs);
    ParamVector::from_values(&ModelSpec::linear(d - 1), w.as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// One seeded random `w^0` shared by every client.
    Shared,
    /// Independent seeded init per client.
    PerClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    /// Number of local gradient steps `T`.
    pub steps: usize,
    /// Constant step size `gamma`.
    pub step_size: f64,
    pub init: InitMode,
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("lcfl.warmup.step_size", "must be > 0"));
        }
        Ok(())
    }
}

pub fn initial_params(spec: &ModelSpec, mode: InitMode, client_id: usize, run_seed: u64) -> ParamVector {
    let mut rng = match mode {
        InitMode::Shared => seed::rng(run_seed, &[stream::INIT]),
        InitMode::PerClient => seed::rng(run_seed, &[stream::INIT, client_id as u64 + 1]),
    };
    ParamVector::random(spec, &mut rng)
}

/// Train every client independently for exactly `T` full-batch steps; the
/// result is ordered like `datasets`.
pub fn warmup_all(
    spec: &ModelSpec,
    datasets: &[&ClientDataset],
    cfg: &WarmupConfig,
    run_seed: u64,
) -> Result<Vec<ParamVector>> {
    cfg.validate()?;
    parallel::map(datasets, |data| {
        let init = initial_params(spec, cfg.init, data.client_id, run_seed);
        gradient_descent(spec, &init, data, cfg.steps, cfg.step_size).map_err(|e| e.with_client(data.client_id))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_linear_family, LinearFamily};

    fn linear_data(seed_v: u64) -> ClientDataset {
        let fam =
            LinearFamily { sigma_xy: vec![vec![1.0, -0.5, 0.25]], sigma_xx: None, m_per_client: 80, noise_std: 0.3 };
        gen_linear_family(&fam, 1, seed_v).unwrap().remove(0)
    }

    fn cfg() -> TrainConfig {
        TrainConfig { init_lr: 0.02, lr_decay: 0.99, batch_size: 20, local_epochs: 3 }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let spec = ModelSpec::linear(3);
        let data = linear_data(1);
        let w0 = initial_params(&spec, InitMode::Shared, 0, 4);
        let c = TrainConfig { local_epochs: 0, ..cfg() };
        assert_eq!(local_sgd(&spec, &w0, &data, &c, 0, 1).unwrap(), w0);
    }

    #[test]
    fn decayed_learning_rate() {
        let lr = cfg().effective_lr(10);
        assert!((lr - 0.02 * 0.99f64.powi(10)).abs() < 1e-18);
    }

    #[test]
    fn interpolation_gives_exact_weight() {
        let data = ClientDataset::new(0, 1, vec![1.0, 2.0, 3.0, -1.0], Targets::Regression(vec![2.0, 4.0, 6.0, -2.0]))
            .unwrap();
        let w = closed_form_linear(&data).unwrap();
        assert!((w.values()[0] - 2.0).abs() < 1e-12);
        assert!(w.values()[1].abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_closed_form() {
        let data = linear_data(7);
        let w = closed_form_linear(&data).unwrap();
        let g = model::full_gradient(&ModelSpec::linear(3), &w, &data).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn duplicate_columns_are_singular() {
        let data =
            ClientDataset::new(0, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], Targets::Regression(vec![1.0, 2.0, 3.0]))
                .unwrap();
        assert!(matches!(closed_form_linear(&data), Err(Error::Singular { .. })));
    }

    #[test]
    fn sgd_approaches_closed_form() {
        let spec = ModelSpec::linear(3);
        let data = linear_data(3);
        let best = model::loss(&spec, &closed_form_linear(&data).unwrap(), &data).unwrap();
        let c = TrainConfig { init_lr: 0.05, lr_decay: 1.0, batch_size: 80, local_epochs: 400 };
        let w = local_sgd(&spec, &ParamVector::zeros(&spec), &data, &c, 0, 0).unwrap();
        assert!(model::loss(&spec, &w, &data).unwrap() - best < 1e-3);
    }

    #[test]
    fn full_batch_loss_is_monotone_below_inverse_lambda_max() {
        let spec = ModelSpec::linear(3);
        let data = linear_data(5);
        let c = TrainConfig { init_lr: 0.1, lr_decay: 1.0, batch_size: 1000, local_epochs: 1 };
        let mut w = ParamVector::zeros(&spec);
        let mut prev = model::loss(&spec, &w, &data).unwrap();
        for _ in 0..50 {
            w = local_sgd(&spec, &w, &data, &c, 0, 0).unwrap();
            let l = model::loss(&spec, &w, &data).unwrap();
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn divergence_is_reported() {
        let spec = ModelSpec::linear(3);
        let mut data = linear_data(2);
        data.features_mut().iter_mut().for_each(|v| *v *= 1e3);
        let c = TrainConfig { init_lr: 10.0, lr_decay: 1.0, batch_size: 10, local_epochs: 50 };
        let err = local_sgd(&spec, &ParamVector::zeros(&spec), &data, &c, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn warmup_identity_and_determinism() {
        let spec = ModelSpec::linear(3);
        let a = linear_data(9);
        let mut b = a.clone();
        b.client_id = 1;
        let zero = WarmupConfig { steps: 0, step_size: 0.1, init: InitMode::Shared };
        let out = warmup_all(&spec, &[&a, &b], &zero, 3).unwrap();
        assert_eq!(out[0], initial_params(&spec, InitMode::Shared, 0, 3));
        let ten = WarmupConfig { steps: 10, ..zero };
        let out = warmup_all(&spec, &[&a, &b], &ten, 3).unwrap();
        assert_eq!(out[0], out[1]);
        let per = WarmupConfig { init: InitMode::PerClient, ..ten };
        let out = warmup_all(&spec, &[&a, &b], &per, 3).unwrap();
        assert_ne!(out[0], out[1]);
    }
}
