//! Area-level data, hyperparameters and the exact marginal moments of `y - m`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::family::Family;

/// One small area: direct estimate, size parameter and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaObservation {
    pub area_id: String,
    /// Direct estimate on the rate scale (`z/n` for the discrete families).
    pub y: f64,
    /// Sample size, exposure, or `1/D_i` for the Gaussian family.
    pub n: f64,
    pub x: Vec<f64>,
}

impl AreaObservation {
    pub fn new(area_id: impl Into<String>, y: f64, n: f64, x: Vec<f64>) -> Self {
        Self { area_id: area_id.into(), y, n, x }
    }

    pub fn linear_predictor(&self, beta: &[f64]) -> f64 {
        self.x.iter().zip(beta).map(|(a, b)| a * b).sum()
    }
}

/// Hyperparameters `eta = (beta, nu)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub beta: Vec<f64>,
    pub nu: f64,
}

impl Hyperparameters {
    pub fn new(beta: Vec<f64>, nu: f64) -> Self {
        Self { beta, nu }
    }

    /// Dimension `q = p + 1`.
    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.beta.iter().copied().chain(std::iter::once(self.nu)))
    }

    pub fn from_slice(values: &[f64]) -> Self {
        let (beta, nu) = values.split_at(values.len() - 1);
        Self { beta: beta.to_vec(), nu: nu[0] }
    }

    /// Component `k` of the stacked vector `(beta, nu)`.
    pub fn component(&self, k: usize) -> f64 {
        if k < self.beta.len() {
            self.beta[k]
        } else {
            self.nu
        }
    }

    pub fn with_component(&self, k: usize, value: f64) -> Self {
        let mut out = self.clone();
        if k < out.beta.len() {
            out.beta[k] = value;
        } else {
            out.nu = value;
        }
        out
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        let bound = family.nu_lower_bound();
        if !(self.nu > bound) || !self.nu.is_finite() {
            return Err(SaeError::MomentDoesNotExist { nu: self.nu, bound });
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(SaeError::Domain("non-finite regression coefficient".into()));
        }
        Ok(())
    }
}

/// Areas plus the family they follow.
///
/// Every reduction over areas (scores, information, likelihood) runs in
/// `reduction_order`, the permutation sorting areas by `area_id`, so results do
/// not depend on the row order of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    family: Family,
    areas: Vec<AreaObservation>,
    order: Vec<usize>,
}

impl Dataset {
    pub fn new(family: Family, areas: Vec<AreaObservation>) -> Result<Self> {
        let m = areas.len();
        let p = areas.first().map(|a| a.x.len()).unwrap_or(0);
        if p == 0 {
            return Err(SaeError::InvalidDataset("at least one covariate column is required".into()));
        }
        if m < p + 2 {
            return Err(SaeError::InvalidDataset(format!(
                "m = {m} areas is too few for p = {p} covariates (need m >= p + 2)"
            )));
        }
        for (row, area) in areas.iter().enumerate() {
            if area.x.len() != p {
                return Err(SaeError::InvalidDataset(format!(
                    "row {}: expected {p} covariates, found {}",
                    row + 1,
                    area.x.len()
                )));
            }
            if area.x.iter().any(|v| !v.is_finite()) || !area.y.is_finite() {
                return Err(SaeError::InvalidDataset(format!("row {}: non-finite value", row + 1)));
            }
            if !(area.n > 0.0) || !area.n.is_finite() {
                return Err(SaeError::InvalidDataset(format!(
                    "row {}: size parameter n = {} must be positive",
                    row + 1,
                    area.n
                )));
            }
            if family.is_discrete() {
                family
                    .lattice_count(area.y, area.n)
                    .map_err(|e| SaeError::InvalidDataset(format!("row {}: {e}", row + 1)))?;
            }
        }
        let x = DMatrix::from_fn(m, p, |i, j| areas[i].x[j]);
        let gram = x.transpose() * &x;
        let eig = nalgebra::SymmetricEigen::new(gram);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-12 * max.max(1e-300)) {
            return Err(SaeError::InvalidDataset("design matrix is not of full column rank".into()));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| areas[a].area_id.cmp(&areas[b].area_id).then(a.cmp(&b)));
        Ok(Self { family, areas, order })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn areas(&self) -> &[AreaObservation] {
        &self.areas
    }

    pub fn area(&self, i: usize) -> &AreaObservation {
        &self.areas[i]
    }

    /// Number of areas.
    pub fn m(&self) -> usize {
        self.areas.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.areas[0].x.len()
    }

    pub fn reduction_order(&self) -> &[usize] {
        &self.order
    }

    /// Same areas and design with new direct estimates.
    ///
    /// The caller guarantees the responses lie in the family support; this is
    /// the path used for simulated and bootstrap data.
    pub fn with_responses(&self, ys: &[f64]) -> Self {
        assert_eq!(ys.len(), self.areas.len());
        let mut out = self.clone();
        for (area, &y) in out.areas.iter_mut().zip(ys) {
            area.y = y;
        }
        out
    }

    /// Redraws every response from the model at `eta`, except area `keep`
    /// when given. Areas are drawn in input order from one stream.
    pub fn resample<R: Rng + ?Sized>(&self, eta: &Hyperparameters, keep: Option<usize>, rng: &mut R) -> Self {
        let ys: Vec<f64> = self
            .areas
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if Some(i) == keep {
                    a.y
                } else {
                    let m = self.family.mean_link(a.linear_predictor(&eta.beta));
                    self.family.sample_area(a.n, m, eta.nu, rng).y
                }
            })
            .collect();
        self.with_responses(&ys)
    }

    /// Prior mean `m_i = psi'(x_i' beta)` for every area.
    pub fn prior_means(&self, beta: &[f64]) -> Vec<f64> {
        self.areas
            .iter()
            .map(|a| self.family.mean_link(a.linear_predictor(beta)))
            .collect()
    }
}

/// Moments of the latent mean around its prior mean, `E[(xi - m)^r]`, r = 2, 3, 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentMoments {
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

/// Exact central moments `mu_r = E[(y - m)^r]`, r = 2, 3, 4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralMoments {
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
}

impl CentralMoments {
    /// Closed form `mu4 mu2 - mu2^3 - mu3^2`.
    pub fn det_sigma(&self) -> f64 {
        self.mu4 * self.mu2 - self.mu2.powi(3) - self.mu3 * self.mu3
    }
}

fn check_moment_domain(family: Family, nu: f64) -> Result<()> {
    let bound = family.nu_lower_bound();
    if nu > bound && nu.is_finite() {
        Ok(())
    } else {
        Err(SaeError::MomentDoesNotExist { nu, bound })
    }
}

pub fn latent_moments(family: Family, m: f64, nu: f64) -> Result<LatentMoments> {
    check_moment_domain(family, nu)?;
    let v2 = family.v2();
    let (q, qp) = family.qvf(m);
    let d1 = nu - v2;
    let d2 = nu - 2.0 * v2;
    let d3 = nu - 3.0 * v2;
    Ok(LatentMoments {
        c2: q / d1,
        c3: 2.0 * q * qp / (d1 * d2),
        c4: 3.0 * q * (d2 * q + 2.0 * qp * qp) / (d1 * d2 * d3),
    })
}

pub fn central_moments(family: Family, n: f64, m: f64, nu: f64) -> Result<CentralMoments> {
    let lat = latent_moments(family, m, nu)?;
    let v2 = family.v2();
    let (q, qp) = family.qvf(m);
    let r = nu / n;
    let mu2 = q * (r + 1.0) / (nu - v2);
    let mu3 = q * qp * (r + 1.0) * (r + 2.0) / ((nu - v2) * (nu - 2.0 * v2));
    let d = v2 / n;
    let mu4 = (d + 1.0) * (2.0 * d + 1.0) * (3.0 * d + 1.0) * lat.c4
        + 6.0 / n * qp * (d + 1.0) * (2.0 * d + 1.0) * lat.c3
        + (d + 1.0) / (n * n) * (7.0 * qp * qp + 2.0 * n * (4.0 * d + 3.0) * q) * lat.c2
        + q / (n * n * n) * (n * (2.0 * d + 3.0) * q + qp * qp);
    Ok(CentralMoments { mu2, mu3, mu4 })
}

/// `phi = (1 + nu/n)/(nu - v2)`, so that `Var(y) = Q(m) phi`.
pub fn phi(family: Family, n: f64, nu: f64) -> f64 {
    (1.0 + nu / n) / (nu - family.v2())
}

/// The two estimating functions of one area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPair {
    pub g1: f64,
    pub g2: f64,
    pub phi: f64,
}

pub fn residual_pair(family: Family, y: f64, n: f64, m: f64, nu: f64) -> ResidualPair {
    let phi = phi(family, n, nu);
    let g1 = y - m;
    ResidualPair { g1, g2: g1 * g1 - phi * family.q(m), phi }
}
