//! Conditional MSE of the EB predictor given the area's own `y_i`.
//!
//! `CMSE ~ T1 + T2`, with `T1 = Q(xi_hat)/(n + nu - v2)` the posterior
//! variance and `T2 = tr(P_i U^-1)` the estimation-error term. The analytical
//! estimator subtracts `T11 = r'b` and `T12 = tr(R U^-1)/2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bias::{conditional_bias, shared_bias, SharedBias};
use crate::blocks::EstimatingBlocks;
use crate::error::{Result, SaeError};
use crate::estimate::{FitResult, Method};
use crate::family::Family;
use crate::model::{Dataset, Hyperparameters};
use crate::predict::bayes_estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmseMode {
    Analytical,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmseBreakdown {
    pub area_id: String,
    pub t1: f64,
    pub t2: f64,
    pub t11: f64,
    pub t12: f64,
    pub cmse_hat: f64,
    /// `max(cmse_hat, t2)`.
    pub cmse_floor: f64,
    pub negative: bool,
    pub mse_hat: f64,
    pub rd_percent: f64,
    pub mode: CmseMode,
}

/// Posterior variance `Q(xi_hat)/(n + nu - v2)`.
pub fn t1_conditional(family: Family, y: f64, n: f64, m: f64, nu: f64) -> f64 {
    family.q(bayes_estimate(y, n, m, nu)) / (n + nu - family.v2())
}

/// `d xi_hat / d eta = (nu/(n + nu) Q(m) x, -n g1/(n + nu)^2)`.
pub fn xi_gradient(family: Family, y: f64, n: f64, x: &[f64], eta: &Hyperparameters) -> DVector<f64> {
    let m = family.mean_link(x.iter().zip(&eta.beta).map(|(a, b)| a * b).sum());
    let nu = eta.nu;
    let s = nu / (n + nu) * family.q(m);
    let mut g: DVector<f64> = DVector::zeros(eta.dim());
    for (k, &xk) in x.iter().enumerate() {
        g[k] = s * xk;
    }
    g[x.len()] = -n * (y - m) / ((n + nu) * (n + nu));
    g
}

/// `P_i` assembled block by block.
pub fn p_matrix(family: Family, y: f64, n: f64, x: &[f64], eta: &Hyperparameters) -> DMatrix<f64> {
    let q = eta.dim();
    let p = q - 1;
    let m = family.mean_link(x.iter().zip(&eta.beta).map(|(a, b)| a * b).sum());
    let (nu, qm, g1) = (eta.nu, family.q(m), y - m);
    let s = n + nu;
    let mut out = DMatrix::zeros(q, q);
    for a in 0..p {
        for b in 0..p {
            out[(a, b)] = nu * nu * qm * qm * x[a] * x[b];
        }
        let cross = -n * nu / s * qm * g1 * x[a];
        out[(a, p)] = cross;
        out[(p, a)] = cross;
    }
    out[(p, p)] = n * n / (s * s) * g1 * g1;
    out / (s * s)
}

pub fn t2_conditional(family: Family, y: f64, n: f64, x: &[f64], eta: &Hyperparameters, blocks: &EstimatingBlocks) -> f64 {
    (p_matrix(family, y, n, x, eta) * blocks.info_inv()).trace()
}

/// Gradient `r` and Hessian `R` of `T1` in `(beta, nu)`.
pub fn t1_derivatives(family: Family, y: f64, n: f64, x: &[f64], eta: &Hyperparameters) -> (DVector<f64>, DMatrix<f64>) {
    let q = eta.dim();
    let p = q - 1;
    let v2 = family.v2();
    let nu = eta.nu;
    let m = family.mean_link(x.iter().zip(&eta.beta).map(|(a, b)| a * b).sum());
    let xi = bayes_estimate(y, n, m, nu);
    let (q_xi, qp_xi) = family.qvf(xi);
    let (q_m, qp_m) = family.qvf(m);
    let g1 = y - m;
    let s = n + nu;
    let lam = 1.0 / (s - v2);

    let mut r = DVector::zeros(q);
    let rb = nu / s * lam * qp_xi * q_m;
    for k in 0..p {
        r[k] = rb * x[k];
    }
    r[p] = -lam * lam * q_xi - lam * n / (s * s) * qp_xi * g1;

    let mut big_r = DMatrix::zeros(q, q);
    let t11 = nu / (s * s) * lam * q_m * (2.0 * v2 * nu * q_m + qp_xi * qp_m * s);
    let t12 = q_m * lam / (s * s) * (qp_xi * (n - nu * s * lam) - 2.0 * v2 * n * nu * g1 / s);
    let t22 = 2.0 * lam.powi(3) * q_xi
        + 2.0 * lam * lam * n / (s * s) * qp_xi * g1
        + 2.0 * lam * n / s.powi(4) * g1 * (s * qp_xi + n * v2 * g1);
    for a in 0..p {
        for b in 0..p {
            big_r[(a, b)] = t11 * x[a] * x[b];
        }
        big_r[(a, p)] = t12 * x[a];
        big_r[(p, a)] = t12 * x[a];
    }
    big_r[(p, p)] = t22;
    (r, big_r)
}

/// Leading term of the unconditional MSE, `nu Q(m)/((n + nu)(nu - v2))`.
pub fn t1_unconditional(family: Family, n: f64, m: f64, nu: f64) -> f64 {
    nu * family.q(m) / ((n + nu) * (nu - family.v2()))
}

/// `E[T2]`: the trace of the block-diagonal expectation of `P_i` against `U^-1`.
pub fn t2_unconditional(family: Family, n: f64, x: &[f64], eta: &Hyperparameters, blocks: &EstimatingBlocks) -> f64 {
    let q = eta.dim();
    let p = q - 1;
    let m = family.mean_link(x.iter().zip(&eta.beta).map(|(a, b)| a * b).sum());
    let (nu, qm) = (eta.nu, family.q(m));
    let s = n + nu;
    let mut e = DMatrix::zeros(q, q);
    for a in 0..p {
        for b in 0..p {
            e[(a, b)] = nu * nu * qm * qm * x[a] * x[b];
        }
    }
    e[(p, p)] = n / s * qm / (nu - family.v2());
    (e * blocks.info_inv()).trace() / (s * s)
}

pub fn mse_unconditional(family: Family, n: f64, x: &[f64], eta: &Hyperparameters, blocks: &EstimatingBlocks) -> f64 {
    let m = family.mean_link(x.iter().zip(&eta.beta).map(|(a, b)| a * b).sum());
    t1_unconditional(family, n, m, eta.nu) + t2_unconditional(family, n, x, eta, blocks)
}

/// `100 (cmse - mse) / mse`.
pub fn relative_difference(cmse_hat: f64, mse_hat: f64) -> Result<f64> {
    if !(mse_hat > 0.0) {
        return Err(SaeError::Domain(format!("mse_hat must be positive, got {mse_hat}")));
    }
    Ok(100.0 * (cmse_hat - mse_hat) / mse_hat)
}

/// Analytical CMSE estimate for area `i` with everything evaluated at `blocks.eta`.
pub fn cmse_analytical(dataset: &Dataset, blocks: &EstimatingBlocks, shared: &SharedBias, i: usize) -> Result<CmseBreakdown> {
    let family = dataset.family();
    let obs = dataset.area(i);
    let eta = &blocks.eta;
    let m = family.mean_link(obs.linear_predictor(&eta.beta));
    let t1 = t1_conditional(family, obs.y, obs.n, m, eta.nu);
    let t2 = t2_conditional(family, obs.y, obs.n, &obs.x, eta, blocks);
    let bias = conditional_bias(dataset, blocks, shared, i);
    let t11 = bias.r.dot(&bias.b);
    let t12 = 0.5 * (&bias.big_r * blocks.info_inv()).trace();
    let cmse_hat = t1 + t2 - t11 - t12;
    let mse_hat = mse_unconditional(family, obs.n, &obs.x, eta, blocks);
    Ok(CmseBreakdown {
        area_id: obs.area_id.clone(),
        t1,
        t2,
        t11,
        t12,
        cmse_hat,
        cmse_floor: cmse_hat.max(t2),
        negative: cmse_hat < 0.0,
        mse_hat,
        rd_percent: relative_difference(cmse_hat, mse_hat)?,
        mode: CmseMode::Analytical,
    })
}

/// Analytical CMSE for every area of a GT fit, in input order.
pub fn analytical_report(dataset: &Dataset, fit: &FitResult) -> Result<Vec<CmseBreakdown>> {
    if !fit.converged {
        return Err(SaeError::UnconvergedFit);
    }
    if fit.method != Method::Gt {
        return Err(SaeError::Unsupported("analytical CMSE requires a GT fit; use the bootstrap for ML".into()));
    }
    let blocks = EstimatingBlocks::compute(dataset, &fit.eta_hat)?;
    let shared = shared_bias(dataset, &blocks)?;
    (0..dataset.m()).map(|i| cmse_analytical(dataset, &blocks, &shared, i)).collect()
}
