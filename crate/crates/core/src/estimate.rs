//! Hyperparameter estimation: GT estimating equations and marginal ML.
//!
//! Both solvers work in `theta = (beta, tau)` with `nu = exp(tau)`, so every
//! iterate keeps `nu > 0`. Starts come from a deterministic grid of `tau`
//! offsets around a method-of-moments pilot.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::score;
use crate::error::{Result, SaeError};
use crate::family::Family;
use crate::model::{Dataset, Hyperparameters};
use crate::optim::{nelder_mead, newton_max, newton_root, MaxOptions, NelderMeadOptions, RootOptions};

pub const NU_MIN: f64 = 1e-4;
pub const NU_MAX: f64 = 1e8;
/// Fits with `nu` above this are flagged as sitting on the upper boundary.
pub const NU_BOUNDARY: f64 = 1e6;
/// Offsets added to the pilot `log nu`, in start-index order.
pub const TAU_OFFSETS: [f64; 6] = [0.0, -1.0, 1.0, -2.0, 2.0, 3.0];

pub const GT_TOL: f64 = 1e-8;
pub const ML_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gt,
    Ml,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Gt => "gt",
            Method::Ml => "ml",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = SaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" => Ok(Method::Gt),
            "ml" => Ok(Method::Ml),
            other => Err(SaeError::Domain(format!("unknown estimator '{other}' (expected gt or ml)"))),
        }
    }
}

/// One multistart attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub start_index: usize,
    pub start: Hyperparameters,
    pub eta: Option<Hyperparameters>,
    /// Equation norm (GT) or relative gradient norm (ML).
    pub norm: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FitDiagnostic {
    MultipleRoots { start_indices: Vec<usize>, max_relative_gap: f64 },
    FlatLikelihood { curvature: f64 },
    BoundaryNu { nu: f64 },
    WarmStartFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub eta_hat: Hyperparameters,
    pub method: Method,
    /// `|s_m|^2` for GT, the log marginal likelihood for ML.
    pub objective_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equation_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_norm: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub multistart_index: usize,
    pub at_boundary: bool,
    pub candidates: Vec<Candidate>,
    pub diagnostics: Vec<FitDiagnostic>,
}

impl FitResult {
    pub fn norm(&self) -> f64 {
        self.equation_norm.or(self.gradient_norm).unwrap_or(f64::NAN)
    }
}

fn tau_bounds() -> (f64, f64) {
    (NU_MIN.ln(), NU_MAX.ln())
}

fn theta_to_eta(theta: &[f64]) -> Option<Hyperparameters> {
    let (lo, hi) = tau_bounds();
    let tau = *theta.last()?;
    if !(lo..=hi).contains(&tau) || theta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut eta = Hyperparameters::from_slice(theta);
    eta.nu = tau.exp();
    Some(eta)
}

fn eta_to_theta(eta: &Hyperparameters) -> Vec<f64> {
    let (lo, hi) = tau_bounds();
    let mut t: Vec<f64> = eta.beta.clone();
    t.push(eta.nu.ln().clamp(lo, hi));
    t
}

/// Summed log marginal density over areas, in reduction order.
pub fn log_likelihood(dataset: &Dataset, eta: &Hyperparameters) -> Result<f64> {
    let family = dataset.family();
    eta.validate(family)?;
    let mut total = 0.0;
    for &i in dataset.reduction_order() {
        let a = dataset.area(i);
        let m = family.mean_link(a.linear_predictor(&eta.beta));
        total += family.log_marginal_density(a.y, a.n, m, eta.nu)?;
    }
    Ok(total)
}

/// Weighted least squares of the linked, continuity-adjusted `y` on `x`
/// with weights `n`.
pub fn pilot_beta(dataset: &Dataset) -> Vec<f64> {
    let family = dataset.family();
    let p = dataset.p();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xtz = DVector::<f64>::zeros(p);
    for &i in dataset.reduction_order() {
        let a = dataset.area(i);
        let z = match family {
            Family::Gaussian => a.y,
            Family::PoissonGamma => (a.y + 0.5 / a.n).ln(),
            Family::BinomialBeta => {
                let r = (a.y * a.n + 0.5) / (a.n + 1.0);
                (r / (1.0 - r)).ln()
            }
        };
        let w = if family == Family::Gaussian { 1.0 } else { a.n };
        let x = DVector::from_column_slice(&a.x);
        xtx += &x * x.transpose() * w;
        xtz += x * (w * z);
    }
    match xtx.cholesky() {
        Some(ch) => ch.solve(&xtz).iter().copied().collect(),
        None => vec![0.0; p],
    }
}

/// Method-of-moments `nu` given `beta`: solves
/// `sum (y - m)^2 / Q(m) = sum (n + nu) / (n (nu - v2))`, clamped to the
/// search range.
pub fn pilot_nu(dataset: &Dataset, beta: &[f64]) -> f64 {
    let family = dataset.family();
    let v2 = family.v2();
    let mut lhs = 0.0;
    for &i in dataset.reduction_order() {
        let a = dataset.area(i);
        let m = family.mean_link(a.linear_predictor(beta));
        let q = family.q(m).max(1e-12);
        lhs += (a.y - m).powi(2) / q;
    }
    let rhs = |nu: f64| -> f64 {
        dataset.reduction_order().iter().map(|&i| {
            let n = dataset.area(i).n;
            (n + nu) / (n * (nu - v2))
        }).sum()
    };
    let (mut lo, mut hi) = (1e-3f64.ln(), 1e6f64.ln());
    if rhs(lo.exp()) <= lhs {
        return lo.exp();
    }
    if rhs(hi.exp()) >= lhs {
        return hi.exp();
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rhs(mid.exp()) > lhs {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

pub fn multistart_grid(dataset: &Dataset) -> Vec<Hyperparameters> {
    let beta = pilot_beta(dataset);
    let nu0 = pilot_nu(dataset, &beta);
    let (lo, hi) = tau_bounds();
    TAU_OFFSETS
        .iter()
        .map(|off| Hyperparameters::new(beta.clone(), (nu0.ln() + off).clamp(lo + 1.0, hi - 1.0).exp()))
        .collect()
}

/// Relative `nu` offset used to probe either side of a solution.
const PROBE: f64 = 0.05;

/// A genuine root has the `nu` equation change sign across it. Without
/// between-area overdispersion `|s_m|` only decays as `nu` grows, and the
/// solver can stop on the decaying tail.
fn gt_root_is_interior(dataset: &Dataset, eta: &Hyperparameters) -> bool {
    let side = |f: f64| {
        let e = Hyperparameters::new(eta.beta.clone(), eta.nu * f);
        score(dataset, &e).ok().map(|s| s[s.len() - 1])
    };
    match (side((-PROBE).exp()), side(PROBE.exp())) {
        (Some(lo), Some(hi)) => lo.signum() != hi.signum(),
        _ => false,
    }
}

/// The likelihood must drop on both sides of the optimum along `nu`.
fn ml_peak_is_interior(dataset: &Dataset, eta: &Hyperparameters, value: f64) -> bool {
    let side = |f: f64| log_likelihood(dataset, &Hyperparameters::new(eta.beta.clone(), eta.nu * f)).ok();
    match (side((-PROBE).exp()), side(PROBE.exp())) {
        (Some(lo), Some(hi)) => lo < value && hi < value,
        _ => false,
    }
}

fn gt_candidate(dataset: &Dataset, start: &Hyperparameters, index: usize) -> Candidate {
    let eq = |theta: &[f64]| -> Option<Vec<f64>> {
        let eta = theta_to_eta(theta)?;
        score(dataset, &eta).ok().map(|s| s.iter().copied().collect())
    };
    let sq = |theta: &[f64]| -> Option<f64> { eq(theta).map(|s| s.iter().map(|v| v * v).sum()) };
    let theta0 = eta_to_theta(start);
    let mut steps: Vec<f64> = start.beta.iter().map(|b| 0.1 * b.abs().max(0.5)).collect();
    steps.push(0.5);
    let nm_opts = NelderMeadOptions { max_iter: 400, f_tol: 1e-22, x_tol: 1e-8 };
    let nm = nelder_mead(sq, &theta0, &steps, &nm_opts);
    let mut iterations = nm.iterations;
    let polished = newton_root(eq, &nm.x, &RootOptions::default());
    let (theta, norm) = match polished {
        Some(r) => {
            iterations += r.iterations;
            (r.x, r.norm)
        }
        None => (nm.x.clone(), nm.value.sqrt()),
    };
    let eta = theta_to_eta(&theta);
    let at_boundary = eta.as_ref().is_some_and(|e| e.nu > NU_BOUNDARY || !gt_root_is_interior(dataset, e));
    let converged = eta.is_some() && norm < GT_TOL;
    Candidate {
        start_index: index,
        start: start.clone(),
        eta,
        norm,
        objective: norm * norm,
        iterations,
        converged,
        at_boundary,
    }
}

fn ml_candidate(dataset: &Dataset, start: &Hyperparameters, index: usize) -> Candidate {
    let ll = |theta: &[f64]| -> Option<f64> {
        let eta = theta_to_eta(theta)?;
        log_likelihood(dataset, &eta).ok()
    };
    let theta0 = eta_to_theta(start);
    let opts = MaxOptions { grad_tol: ML_TOL, ..MaxOptions::default() };
    let res = newton_max(&ll, &theta0, &opts).and_then(|mut r| {
        // two extra Newton steps tighten the optimum well below the tolerance
        if r.relative_gradient < ML_TOL {
            let tight = MaxOptions { grad_tol: 1e-11, max_iter: 2, ..opts.clone() };
            if let Some(t) = newton_max(&ll, &r.x, &tight) {
                if t.value >= r.value - 1e-12 * r.value.abs().max(1.0) && t.relative_gradient < ML_TOL {
                    let iters = r.iterations + t.iterations;
                    r = t;
                    r.iterations = iters;
                }
            }
        }
        Some(r)
    });
    match res {
        Some(r) => {
            let eta = theta_to_eta(&r.x);
            let at_boundary = eta.as_ref().is_some_and(|e| e.nu > NU_BOUNDARY || !ml_peak_is_interior(dataset, e, r.value));
            Candidate {
                start_index: index,
                start: start.clone(),
                converged: eta.is_some() && r.relative_gradient < ML_TOL,
                eta,
                norm: r.relative_gradient,
                objective: r.value,
                iterations: r.iterations,
                at_boundary,
            }
        }
        None => Candidate {
            start_index: index,
            start: start.clone(),
            eta: None,
            norm: f64::INFINITY,
            objective: f64::NEG_INFINITY,
            iterations: 0,
            converged: false,
            at_boundary: false,
        },
    }
}

/// Picks the winning candidate: converged interior fits first, then
/// converged boundary fits; within a class GT takes the lowest norm and ML
/// the highest likelihood, ties going to the lowest start index.
fn select(method: Method, cands: &[Candidate]) -> Option<usize> {
    let better = |a: &Candidate, b: &Candidate| -> bool {
        match method {
            Method::Gt => a.norm < b.norm,
            Method::Ml => a.objective > b.objective + 1e-10 * b.objective.abs().max(1.0),
        }
    };
    for interior in [true, false] {
        let mut best: Option<usize> = None;
        for (i, c) in cands.iter().enumerate() {
            if !c.converged || c.at_boundary == interior {
                continue;
            }
            if best.is_none_or(|b| better(c, &cands[b])) {
                best = Some(i);
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

fn multiple_roots(cands: &[Candidate], chosen: &Candidate) -> Option<FitDiagnostic> {
    let eta0 = chosen.eta.as_ref()?;
    let mut idx = vec![chosen.start_index];
    let mut gap: f64 = 0.0;
    for c in cands.iter().filter(|c| c.converged && c.start_index != chosen.start_index) {
        let Some(e) = &c.eta else { continue };
        if (c.norm - chosen.norm).abs() > 1e-6 {
            continue;
        }
        let rel = (0..eta0.dim())
            .map(|k| {
                let (a, b) = (eta0.component(k), e.component(k));
                (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
            })
            .fold(0.0, f64::max);
        if rel > 1e-3 {
            idx.push(c.start_index);
            gap = gap.max(rel);
        }
    }
    (idx.len() > 1).then_some(FitDiagnostic::MultipleRoots { start_indices: idx, max_relative_gap: gap })
}

fn nu_curvature(dataset: &Dataset, eta: &Hyperparameters) -> f64 {
    let h = 1e-4 * eta.nu;
    let f = |nu: f64| log_likelihood(dataset, &Hyperparameters::new(eta.beta.clone(), nu)).unwrap_or(f64::NAN);
    let lo = (eta.nu - h).max(0.5 * eta.nu);
    let (fp, f0, fm) = (f(eta.nu + h), f(eta.nu), f(lo));
    (fp - 2.0 * f0 + fm) / (h * h)
}

fn assemble(dataset: &Dataset, method: Method, candidates: Vec<Candidate>, mut diagnostics: Vec<FitDiagnostic>) -> Result<FitResult> {
    let Some(best) = select(method, &candidates) else {
        let best_norm = candidates.iter().map(|c| c.norm).fold(f64::INFINITY, f64::min);
        return Err(SaeError::NoConvergence { best_norm, starts: candidates.len() });
    };
    let chosen = candidates[best].clone();
    let eta_hat = chosen.eta.clone().expect("converged candidate has eta");
    if method == Method::Gt {
        if let Some(d) = multiple_roots(&candidates, &chosen) {
            diagnostics.push(d);
        }
    } else {
        let curvature = nu_curvature(dataset, &eta_hat);
        if !(curvature.abs() >= 1e-10) {
            diagnostics.push(FitDiagnostic::FlatLikelihood { curvature });
        }
    }
    if chosen.at_boundary {
        diagnostics.push(FitDiagnostic::BoundaryNu { nu: eta_hat.nu });
    }
    let (equation_norm, gradient_norm) = match method {
        Method::Gt => (Some(chosen.norm), None),
        Method::Ml => (None, Some(chosen.norm)),
    };
    Ok(FitResult {
        eta_hat,
        method,
        objective_value: chosen.objective,
        equation_norm,
        gradient_norm,
        iterations: chosen.iterations,
        converged: true,
        multistart_index: chosen.start_index,
        at_boundary: chosen.at_boundary,
        candidates,
        diagnostics,
    })
}

fn solve(dataset: &Dataset, init: Option<&Hyperparameters>, method: Method) -> Result<FitResult> {
    let run = |start: &Hyperparameters, index: usize| match method {
        Method::Gt => gt_candidate(dataset, start, index),
        Method::Ml => ml_candidate(dataset, start, index),
    };
    let mut candidates = Vec::new();
    let mut diagnostics = Vec::new();
    if let Some(init) = init {
        if init.dim() != dataset.p() + 1 {
            return Err(SaeError::Domain("initial point has the wrong dimension".into()));
        }
        // the warm start is logged with index equal to the grid size
        let c = run(init, TAU_OFFSETS.len());
        if c.converged && !c.at_boundary {
            candidates.push(c);
            return assemble(dataset, method, candidates, diagnostics);
        }
        candidates.push(c);
        diagnostics.push(FitDiagnostic::WarmStartFailed);
    }
    for (i, start) in multistart_grid(dataset).iter().enumerate() {
        candidates.push(run(start, i));
    }
    assemble(dataset, method, candidates, diagnostics)
}

/// GT estimator: minimizes `|s_m(eta)|^2` and polishes the root by Newton.
pub fn solve_gt(dataset: &Dataset, init: Option<&Hyperparameters>) -> Result<FitResult> {
    solve(dataset, init, Method::Gt)
}

/// Marginal maximum likelihood.
pub fn solve_ml(dataset: &Dataset, init: Option<&Hyperparameters>) -> Result<FitResult> {
    solve(dataset, init, Method::Ml)
}

pub fn fit(dataset: &Dataset, method: Method, init: Option<&Hyperparameters>) -> Result<FitResult> {
    solve(dataset, init, method)
}
