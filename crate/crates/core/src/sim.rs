//! Monte Carlo study of CMSE estimators conditioned on a quantile of the
//! target area's response, and the conditional-to-unconditional ratio curves.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bias::shared_bias;
use crate::blocks::EstimatingBlocks;
use crate::bootstrap::{cmse_bootstrap, pairwise_sum, BootstrapPlan};
use crate::cmse::{cmse_analytical, t1_conditional, t1_unconditional, t2_conditional, t2_unconditional};
use crate::error::{Result, SaeError};
use crate::estimate::{fit, Method};
use crate::family::Family;
use crate::model::{AreaObservation, Dataset, Hyperparameters};
use crate::predict::bayes_estimate;
use crate::rng::{domain, stream};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub family: Family,
    pub m: usize,
    pub n: f64,
    pub nu_true: f64,
    pub linear_predictor: f64,
    pub alphas: Vec<f64>,
    pub r_true: usize,
    pub t_eval: usize,
    pub b_boot: usize,
    pub seed: u64,
}

impl SimConfig {
    /// m = 25, n = 10, nu = 15, x'beta = 0 at reduced replication
    /// (R = 2000, T = 200, B = 500).
    pub fn desk(family: Family, seed: u64) -> Self {
        Self {
            family,
            m: 25,
            n: 10.0,
            nu_true: 15.0,
            linear_predictor: 0.0,
            alphas: DEFAULT_ALPHAS.to_vec(),
            r_true: 2000,
            t_eval: 200,
            b_boot: 500,
            seed,
        }
    }

    /// Same design with R = 10000, T = 2000.
    pub fn full_scale(family: Family, seed: u64) -> Self {
        Self { r_true: 10_000, t_eval: 2000, ..Self::desk(family, seed) }
    }

    pub fn eta_true(&self) -> Hyperparameters {
        Hyperparameters::new(vec![self.linear_predictor], self.nu_true)
    }

    pub fn prior_mean(&self) -> f64 {
        self.family.mean_link(self.linear_predictor)
    }

    fn validate(&self) -> Result<()> {
        if self.m < 3 || self.r_true == 0 || self.t_eval == 0 || self.b_boot == 0 {
            return Err(SaeError::Domain("simulation needs m >= 3 and positive R, T, B".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(SaeError::Domain(format!("alpha = {a} is outside (0, 1)")));
        }
        self.eta_true().validate(self.family)
    }

    /// All areas share `(n, x = 1)`; area 0 carries `y1`, the rest are placeholders.
    fn template(&self, y1: f64) -> Result<Dataset> {
        let areas = (0..self.m)
            .map(|i| AreaObservation::new(format!("{:04}", i + 1), y1, self.n, vec![1.0]))
            .collect();
        Dataset::new(self.family, areas)
    }

    /// Stored conditioning values for the default design, where known.
    pub fn reference_quantiles(&self) -> Option<[f64; 5]> {
        let default = self.m == 25 && self.n == 10.0 && self.nu_true == 15.0 && self.linear_predictor == 0.0;
        if !default || self.alphas != DEFAULT_ALPHAS {
            return None;
        }
        match self.family {
            Family::PoissonGamma => Some([0.40, 0.70, 1.00, 1.30, 1.70]),
            Family::BinomialBeta => Some([0.10, 0.30, 0.40, 0.50, 0.70]),
            Family::Gaussian => None,
        }
    }
}

/// Lattice points `y = z/n` and their marginal masses. Unbounded lattices are cut
/// once the masses past the mode fall below `1e-18` of the peak.
pub fn lattice_distribution(family: Family, n: f64, m: f64, nu: f64) -> Result<Vec<(f64, f64)>> {
    if !family.is_discrete() {
        return Err(SaeError::Domain(format!("{family} has no lattice")));
    }
    let mut out = Vec::new();
    let mut peak = 0.0f64;
    let mut z = 0u64;
    loop {
        let y = z as f64 / n;
        if family == Family::BinomialBeta && z as f64 > n.round() {
            break;
        }
        let p = family.log_marginal_density(y, n, m, nu)?.exp();
        peak = peak.max(p);
        out.push((y, p));
        if family == Family::PoissonGamma && p < 1e-18 * peak && (z as f64) > n * m {
            break;
        }
        if z > 50_000_000 {
            return Err(SaeError::Domain("marginal lattice too long to sum".into()));
        }
        z += 1;
    }
    Ok(out)
}

/// Smallest lattice point with cumulative mass at least `alpha`; the exact
/// normal quantile for the Gaussian family.
pub fn marginal_quantile(family: Family, n: f64, m: f64, nu: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SaeError::Domain(format!("alpha = {alpha} is outside (0, 1)")));
    }
    if family == Family::Gaussian {
        let sd = (1.0 / n + 1.0 / nu).sqrt();
        let normal = Normal::new(m, sd).map_err(|e| SaeError::Domain(e.to_string()))?;
        return Ok(normal.inverse_cdf(alpha));
    }
    let mut cum = 0.0;
    for (y, p) in lattice_distribution(family, n, m, nu)? {
        cum += p;
        if cum >= alpha {
            return Ok(y);
        }
    }
    Err(SaeError::Domain(format!("cumulative mass never reaches {alpha}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEstimate {
    pub cmse: f64,
    pub standard_error: f64,
    /// `T1(y1, eta)`, the deterministic part.
    pub t1: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbCv {
    pub rb: f64,
    pub cv: f64,
    pub mean_estimate: f64,
    pub successes: usize,
    pub failures: usize,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let sd = if xs.len() > 1 { (pairwise_sum(&dev) / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// MC truth `T1(y1, eta) + mean {xi_hat(y1, eta_hat) - xi_hat(y1, eta)}^2` with
/// areas 2..m regenerated each replication. Replication `r` uses the same draws
/// for every `alpha`.
pub fn true_cmse_mc(config: &SimConfig, alpha: f64, estimator: Method) -> Result<TruthEstimate> {
    config.validate()?;
    let family = config.family;
    let eta = config.eta_true();
    let m = config.prior_mean();
    let y1 = marginal_quantile(family, config.n, m, config.nu_true, alpha)?;
    let template = config.template(y1)?;
    let xi_true = bayes_estimate(y1, config.n, m, config.nu_true);
    let sq: Vec<Option<f64>> = (0..config.r_true)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(config.seed, domain::TRUTH, r as u64);
            let data = template.resample(&eta, Some(0), &mut rng);
            let f = fit(&data, estimator, None).ok().filter(|f| f.converged)?;
            let m_hat = family.mean_link(f.eta_hat.beta[0]);
            Some((bayes_estimate(y1, config.n, m_hat, f.eta_hat.nu) - xi_true).powi(2))
        })
        .collect();
    let ok: Vec<f64> = sq.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(SaeError::NoConvergence { best_norm: f64::INFINITY, starts: config.r_true });
    }
    let (mean, sd) = mean_sd(&ok);
    let t1 = t1_conditional(family, y1, config.n, m, config.nu_true);
    Ok(TruthEstimate {
        cmse: t1 + mean,
        standard_error: sd / (ok.len() as f64).sqrt(),
        t1,
        successes: ok.len(),
        failures: sq.len() - ok.len(),
    })
}

/// One CMSE estimate for the target area: analytical for GT, bootstrap for ML.
pub fn estimate_target_cmse(data: &Dataset, estimator: Method, b_boot: usize, boot_seed: u64) -> Result<f64> {
    let f = fit(data, estimator, None)?;
    if !f.converged {
        return Err(SaeError::UnconvergedFit);
    }
    match estimator {
        Method::Gt => {
            let blocks = EstimatingBlocks::compute(data, &f.eta_hat)?;
            let shared = shared_bias(data, &blocks)?;
            Ok(cmse_analytical(data, &blocks, &shared, 0)?.cmse_hat)
        }
        Method::Ml => {
            let plan = BootstrapPlan::new(0, b_boot, boot_seed, Method::Ml);
            Ok(cmse_bootstrap(data, &f, &plan)?.breakdown.cmse_hat)
        }
    }
}

/// RB and CV of the estimator paired with `estimator` over `T` fresh samples.
pub fn rb_cv(config: &SimConfig, alpha: f64, estimator: Method, truth: f64) -> Result<RbCv> {
    config.validate()?;
    let family = config.family;
    let eta = config.eta_true();
    let y1 = marginal_quantile(family, config.n, config.prior_mean(), config.nu_true, alpha)?;
    let template = config.template(y1)?;
    let est: Vec<Option<f64>> = (0..config.t_eval)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(config.seed, domain::EVAL, t as u64);
            let data = template.resample(&eta, Some(0), &mut rng);
            let boot_seed: u64 = stream(config.seed, domain::BOOTSTRAP, t as u64).random();
            estimate_target_cmse(&data, estimator, config.b_boot, boot_seed).ok()
        })
        .collect();
    let ok: Vec<f64> = est.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(SaeError::NoConvergence { best_norm: f64::INFINITY, starts: config.t_eval });
    }
    let (rb, cv) = relative_bias_cv(&ok, truth);
    Ok(RbCv {
        rb,
        cv,
        mean_estimate: pairwise_sum(&ok) / ok.len() as f64,
        successes: ok.len(),
        failures: est.len() - ok.len(),
    })
}

/// `(mean(est) - truth)/truth` and `sqrt(mean (est - truth)^2)/truth`.
pub fn relative_bias_cv(estimates: &[f64], truth: f64) -> (f64, f64) {
    let n = estimates.len() as f64;
    let mean = pairwise_sum(estimates) / n;
    let sq: Vec<f64> = estimates.iter().map(|e| (e - truth) * (e - truth)).collect();
    ((mean - truth) / truth, (pairwise_sum(&sq) / n).sqrt() / truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub alpha: f64,
    pub y_quantile: f64,
    pub reference_y_quantile: Option<f64>,
    pub cmse_true: TruthEstimate,
    pub cmse_true_ml: TruthEstimate,
    pub gt: RbCv,
    pub ml: RbCv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub rows: Vec<SimRow>,
}

/// Full table: truth under both estimators, RB/CV of analytical GT and bootstrap ML.
pub fn run_table(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let reference = config.reference_quantiles();
    let mut rows = Vec::with_capacity(config.alphas.len());
    for (k, &alpha) in config.alphas.iter().enumerate() {
        let y_quantile = marginal_quantile(config.family, config.n, config.prior_mean(), config.nu_true, alpha)?;
        let cmse_true = true_cmse_mc(config, alpha, Method::Gt)?;
        let cmse_true_ml = true_cmse_mc(config, alpha, Method::Ml)?;
        let gt = rb_cv(config, alpha, Method::Gt, cmse_true.cmse)?;
        let ml = rb_cv(config, alpha, Method::Ml, cmse_true_ml.cmse)?;
        rows.push(SimRow {
            alpha,
            y_quantile,
            reference_y_quantile: reference.map(|r| r[k]),
            cmse_true,
            cmse_true_ml,
            gt,
            ml,
        });
    }
    Ok(SimReport { config: config.clone(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioParams {
    pub n: f64,
    /// Prior mean `m = psi'(x'beta)`.
    pub mean: f64,
    pub nu: f64,
    /// Number of areas, used by the second-order terms only.
    pub m_areas: usize,
}

fn check_support(family: Family, y: f64) -> Result<()> {
    let ok = match family {
        Family::Gaussian => y.is_finite(),
        Family::PoissonGamma => y.is_finite() && y >= 0.0,
        Family::BinomialBeta => (0.0..=1.0).contains(&y),
    };
    if ok {
        Ok(())
    } else {
        Err(SaeError::Domain(format!("grid point y = {y} is outside the {family} support")))
    }
}

/// `E[T1(y, eta)]` by summation over the marginal lattice (closed form for Gaussian).
pub fn expected_t1(family: Family, n: f64, m: f64, nu: f64) -> Result<f64> {
    if family == Family::Gaussian {
        return Ok(t1_unconditional(family, n, m, nu));
    }
    let terms: Vec<f64> = lattice_distribution(family, n, m, nu)?
        .into_iter()
        .map(|(y, p)| p * t1_conditional(family, y, n, m, nu))
        .collect();
    Ok(pairwise_sum(&terms))
}

fn identical_areas(family: Family, p: &RatioParams) -> Result<(Dataset, Hyperparameters)> {
    let eta = Hyperparameters::new(vec![family.link(p.mean)], p.nu);
    // U does not depend on y; any valid lattice point will do
    let y = if family.is_discrete() { (p.n * p.mean).round() / p.n } else { p.mean };
    let areas = (0..p.m_areas)
        .map(|i| AreaObservation::new(format!("{i:04}"), y, p.n, vec![1.0]))
        .collect();
    Ok((Dataset::new(family, areas)?, eta))
}

/// `Ratio1 = T1(y)/E[T1]` or `Ratio2 = (T1 + T2)(y)/E[T1 + T2]` at the true `eta`.
pub fn ratio_curves(family: Family, order: u8, grid: &[f64], params: &RatioParams) -> Result<Vec<(f64, f64)>> {
    for &y in grid {
        check_support(family, y)?;
    }
    let RatioParams { n, mean, nu, .. } = *params;
    let e_t1 = expected_t1(family, n, mean, nu)?;
    match order {
        1 => Ok(grid.iter().map(|&y| (y, t1_conditional(family, y, n, mean, nu) / e_t1)).collect()),
        2 => {
            let (data, eta) = identical_areas(family, params)?;
            let blocks = EstimatingBlocks::compute(&data, &eta)?;
            let x = [1.0];
            let denom = e_t1 + t2_unconditional(family, n, &x, &eta, &blocks);
            Ok(grid
                .iter()
                .map(|&y| {
                    let num = t1_conditional(family, y, n, mean, nu) + t2_conditional(family, y, n, &x, &eta, &blocks);
                    (y, num / denom)
                })
                .collect())
        }
        _ => Err(SaeError::Domain(format!("ratio order must be 1 or 2, got {order}"))),
    }
}

/// `points` equally spaced values on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePreset {
    pub order: u8,
    pub params: RatioParams,
    pub grid: Vec<f64>,
}

/// Curve settings for the two ratio figures: figure 1 is `Ratio1` at
/// `n = 10, nu = 1, x'beta = 0`; figure 2 is `Ratio2` at `n = 5, nu = 1` and
/// `m in {10, 15, 20}` with prior means 0, `e^2`, `logistic(1.5)`.
pub fn figure_preset(figure: u8, family: Family, points: usize) -> Result<Vec<CurvePreset>> {
    let grid = |hi_pg: f64| match family {
        Family::Gaussian => linear_grid(-3.0, 3.0, points),
        Family::PoissonGamma => linear_grid(0.0, hi_pg, points),
        Family::BinomialBeta => linear_grid(0.0, 1.0, points),
    };
    match figure {
        1 => Ok(vec![CurvePreset {
            order: 1,
            params: RatioParams { n: 10.0, mean: family.mean_link(0.0), nu: 1.0, m_areas: 10 },
            grid: grid(3.0),
        }]),
        2 => {
            let mean = match family {
                Family::Gaussian => 0.0,
                Family::PoissonGamma => 2f64.exp(),
                Family::BinomialBeta => family.mean_link(1.5),
            };
            Ok([10, 15, 20]
                .into_iter()
                .map(|m_areas| CurvePreset {
                    order: 2,
                    params: RatioParams { n: 5.0, mean, nu: 1.0, m_areas },
                    grid: grid(20.0),
                })
                .collect())
        }
        _ => Err(SaeError::Domain(format!("figure must be 1 or 2, got {figure}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn poisson_gamma_quantiles() {
        let q: Vec<f64> = DEFAULT_ALPHAS
            .iter()
            .map(|&a| marginal_quantile(Family::PoissonGamma, 10.0, 1.0, 15.0, a).unwrap())
            .collect();
        for (got, want) in q.iter().zip([0.4, 0.7, 1.0, 1.3, 1.7]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_median() {
        assert_eq!(marginal_quantile(Family::Gaussian, 10.0, 0.0, 1.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn lattice_masses_sum_to_one() {
        for (f, m) in [(Family::PoissonGamma, 1.0), (Family::BinomialBeta, 0.5), (Family::PoissonGamma, 2f64.exp())] {
            let s: f64 = lattice_distribution(f, 10.0, m, 1.0).unwrap().iter().map(|p| p.1).sum();
            assert!((s - 1.0).abs() < 1e-12, "{f}: {s}");
        }
    }

    #[test]
    fn ratio_examples() {
        let p = RatioParams { n: 10.0, mean: 1.0, nu: 15.0, m_areas: 10 };
        let r = ratio_curves(Family::PoissonGamma, 1, &[1.0, 2.0], &p).unwrap();
        assert_relative_eq!(r[0].1, 1.0, epsilon = 1e-10);
        assert_relative_eq!(r[1].1, 1.4, epsilon = 1e-10);
        let g = ratio_curves(Family::Gaussian, 1, &[-2.0, 0.0, 5.0], &p).unwrap();
        assert!(g.iter().all(|(_, v)| (*v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn grid_outside_support() {
        let p = RatioParams { n: 10.0, mean: 0.5, nu: 15.0, m_areas: 10 };
        assert!(ratio_curves(Family::BinomialBeta, 1, &[1.2], &p).is_err());
        assert!(ratio_curves(Family::PoissonGamma, 1, &[-0.1], &p).is_err());
        assert!(ratio_curves(Family::PoissonGamma, 3, &[0.1], &p).is_err());
    }

    #[test]
    fn rb_cv_at_truth() {
        assert_eq!(relative_bias_cv(&[2.0, 2.0, 2.0], 2.0), (0.0, 0.0));
    }

    #[test]
    fn presets() {
        assert_eq!(figure_preset(1, Family::Gaussian, 200).unwrap()[0].grid.len(), 200);
        assert_eq!(figure_preset(2, Family::PoissonGamma, 50).unwrap().len(), 3);
        assert!(figure_preset(3, Family::Gaussian, 10).is_err());
    }
}
