//! Parametric bootstrap CMSE estimator for any hyperparameter estimator.
//!
//! Every area except the target is redrawn from the fitted model, `eta` is
//! refitted the same way, and
//! `cmse = 2 T1(y_i, eta_hat) - mean T1(y_i, eta*) + mean {xi_hat(y_i, eta_hat) - xi_hat(y_i, eta*)}^2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::EstimatingBlocks;
use crate::cmse::{mse_unconditional, relative_difference, t1_conditional, CmseBreakdown, CmseMode};
use crate::error::{Result, SaeError};
use crate::estimate::{fit, FitResult, Method};
use crate::model::{Dataset, Hyperparameters};
use crate::predict::bayes_estimate;
use crate::rng::{domain, pair_index, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub target_area_index: usize,
    pub replications: usize,
    pub seed: u64,
    pub estimator: Method,
}

impl BootstrapPlan {
    pub fn new(target_area_index: usize, replications: usize, seed: u64, estimator: Method) -> Self {
        Self { target_area_index, replications, seed, estimator }
    }

    /// Successful replications needed for an estimate: half of `B`, and at
    /// least 100 when `B` allows it.
    pub fn required_successes(&self) -> usize {
        let b = self.replications;
        b.div_ceil(2).max(b.min(100))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub breakdown: CmseBreakdown,
    /// `T1(y_i, eta_hat)`.
    pub t1_plug_in: f64,
    /// `2 T1 - mean T1*`.
    pub t1_corrected: f64,
    /// `mean {xi_hat(eta_hat) - xi_hat(eta*)}^2`.
    pub t2_star: f64,
    pub standard_error: f64,
    pub successes: usize,
    pub failures: usize,
    /// Set when `B < 100`.
    pub low_replication_warning: bool,
}

/// Sum in a fixed pairwise tree so the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn rep_stream(plan: &BootstrapPlan, rep: usize) -> rand_chacha::ChaCha8Rng {
    stream(plan.seed, domain::BOOTSTRAP, pair_index(plan.target_area_index as u64, rep as u64))
}

/// Bootstrap sample `rep` and its refit. The target area is copied unchanged.
pub fn bootstrap_resample(dataset: &Dataset, fit_hat: &FitResult, plan: &BootstrapPlan, rep: usize) -> Result<(Dataset, FitResult)> {
    if !fit_hat.converged {
        return Err(SaeError::UnconvergedFit);
    }
    let mut rng = rep_stream(plan, rep);
    let star = dataset.resample(&fit_hat.eta_hat, Some(plan.target_area_index), &mut rng);
    let refit = fit(&star, plan.estimator, Some(&fit_hat.eta_hat))?;
    Ok((star, refit))
}

/// Bootstrap estimate from given replicate hyperparameters.
pub fn cmse_from_replicates(dataset: &Dataset, eta_hat: &Hyperparameters, target: usize, replicates: &[Hyperparameters], failures: usize, requested: usize) -> Result<BootstrapEstimate> {
    let family = dataset.family();
    let obs = dataset.area(target);
    let plan_check = BootstrapPlan::new(target, requested, 0, Method::Gt);
    if replicates.len() < plan_check.required_successes() {
        return Err(SaeError::InsufficientReplications {
            successes: replicates.len(),
            required: plan_check.required_successes(),
        });
    }
    let m_hat = family.mean_link(obs.linear_predictor(&eta_hat.beta));
    let t1 = t1_conditional(family, obs.y, obs.n, m_hat, eta_hat.nu);
    let xi_hat = bayes_estimate(obs.y, obs.n, m_hat, eta_hat.nu);
    let mut t1_star = Vec::with_capacity(replicates.len());
    let mut sq = Vec::with_capacity(replicates.len());
    for e in replicates {
        let m = family.mean_link(obs.linear_predictor(&e.beta));
        t1_star.push(t1_conditional(family, obs.y, obs.n, m, e.nu));
        sq.push((xi_hat - bayes_estimate(obs.y, obs.n, m, e.nu)).powi(2));
    }
    let b = replicates.len() as f64;
    let mean_t1 = pairwise_sum(&t1_star) / b;
    let t2_star = pairwise_sum(&sq) / b;
    let t1_corrected = 2.0 * t1 - mean_t1;
    let cmse_hat = t1_corrected + t2_star;
    let diffs: Vec<f64> = sq.iter().zip(&t1_star).map(|(s, t)| s - t).collect();
    let dm = pairwise_sum(&diffs) / b;
    let dev: Vec<f64> = diffs.iter().map(|d| (d - dm) * (d - dm)).collect();
    let var = if replicates.len() > 1 { pairwise_sum(&dev) / (b - 1.0) } else { 0.0 };
    let mse_hat = EstimatingBlocks::compute(dataset, eta_hat)
        .map(|blk| mse_unconditional(family, obs.n, &obs.x, eta_hat, &blk))?;
    let breakdown = CmseBreakdown {
        area_id: obs.area_id.clone(),
        t1,
        t2: t2_star,
        t11: t1 - t1_corrected,
        t12: 0.0,
        cmse_hat,
        cmse_floor: cmse_hat.max(t2_star),
        negative: cmse_hat < 0.0,
        mse_hat,
        rd_percent: relative_difference(cmse_hat, mse_hat)?,
        mode: CmseMode::Bootstrap,
    };
    Ok(BootstrapEstimate {
        breakdown,
        t1_plug_in: t1,
        t1_corrected,
        t2_star,
        standard_error: (var / b).sqrt(),
        successes: replicates.len(),
        failures,
        low_replication_warning: requested < 100,
    })
}

/// Runs the plan's replications (in parallel, results identical to a serial run).
pub fn bootstrap_replicates(dataset: &Dataset, fit_hat: &FitResult, plan: &BootstrapPlan) -> Result<(Vec<Hyperparameters>, usize)> {
    if !fit_hat.converged {
        return Err(SaeError::UnconvergedFit);
    }
    if plan.replications == 0 {
        return Err(SaeError::Domain("bootstrap needs at least one replication".into()));
    }
    if plan.target_area_index >= dataset.m() {
        return Err(SaeError::Domain(format!("target area {} out of range", plan.target_area_index)));
    }
    let fits: Vec<Option<Hyperparameters>> = (0..plan.replications)
        .into_par_iter()
        .map(|rep| bootstrap_resample(dataset, fit_hat, plan, rep).ok().map(|(_, f)| f.eta_hat))
        .collect();
    let failures = fits.iter().filter(|f| f.is_none()).count();
    Ok((fits.into_iter().flatten().collect(), failures))
}

pub fn cmse_bootstrap(dataset: &Dataset, fit_hat: &FitResult, plan: &BootstrapPlan) -> Result<BootstrapEstimate> {
    let (reps, failures) = bootstrap_replicates(dataset, fit_hat, plan)?;
    cmse_from_replicates(dataset, &fit_hat.eta_hat, plan.target_area_index, &reps, failures, plan.replications)
}
