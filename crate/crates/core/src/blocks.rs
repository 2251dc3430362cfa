//! Per-area estimating-equation blocks `g_i`, `D_i`, `Sigma_i` and their
//! aggregates `s_m = sum D_i' Sigma_i^-1 g_i` and `U = sum D_i' Sigma_i^-1 D_i`.
//!
//! `D_i` is stored as a `2 x q` matrix, `q = p + 1`, with rows
//! `Q(m) (x', 0)` and `Q(m) (Q'(m) phi x', -(1 + v2/n)/(nu - v2)^2)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Vector2};

use crate::error::{Result, SaeError};
use crate::family::Family;
use crate::model::{central_moments, phi, CentralMoments, Dataset, Hyperparameters};

/// Scalars that determine one area's blocks.
#[derive(Debug, Clone, Copy)]
struct AreaScalars {
    m: f64,
    q: f64,
    q_prime: f64,
    phi: f64,
    g1: f64,
    g2: f64,
    moments: CentralMoments,
    det: f64,
    /// `D` entries: row 0 is `d_beta0 * x'`, row 1 is `(d_beta1 * x', d_nu)`.
    d_beta0: f64,
    d_beta1: f64,
    d_nu: f64,
}

impl AreaScalars {
    fn sigma_inv(&self) -> Matrix2<f64> {
        let s22 = self.moments.mu4 - self.moments.mu2 * self.moments.mu2;
        Matrix2::new(s22, -self.moments.mu3, -self.moments.mu3, self.moments.mu2) / self.det
    }
}

fn area_scalars(
    family: Family,
    y: f64,
    n: f64,
    x: &[f64],
    eta: &Hyperparameters,
    area: usize,
) -> Result<AreaScalars> {
    let lp: f64 = x.iter().zip(&eta.beta).map(|(a, b)| a * b).sum();
    let m = family.mean_link(lp);
    let nu = eta.nu;
    let v2 = family.v2();
    let (q, q_prime) = family.qvf(m);
    let moments = central_moments(family, n, m, nu)?;
    let det = moments.det_sigma();
    let scale = moments.mu2 * (moments.mu4 - moments.mu2 * moments.mu2);
    if !(det > 1e-12 * scale.abs()) || !det.is_finite() {
        return Err(SaeError::SingularSigma { area, det });
    }
    let phi = phi(family, n, nu);
    let g1 = y - m;
    let g2 = g1 * g1 - phi * q;
    Ok(AreaScalars {
        m,
        q,
        q_prime,
        phi,
        g1,
        g2,
        moments,
        det,
        d_beta0: q,
        d_beta1: q * q_prime * phi,
        d_nu: -q * (1.0 + v2 / n) / ((nu - v2) * (nu - v2)),
    })
}

/// Blocks of a single area.
#[derive(Debug, Clone)]
pub struct AreaBlock {
    pub prior_mean: f64,
    pub q: f64,
    pub q_prime: f64,
    pub phi: f64,
    pub moments: CentralMoments,
    /// `(g1, g2)`.
    pub g: Vector2<f64>,
    /// `2 x q`.
    pub d: DMatrix<f64>,
    pub sigma: Matrix2<f64>,
    pub det_sigma: f64,
    /// `R_i = D_i' Sigma_i^-1`, `q x 2`.
    pub r: DMatrix<f64>,
}

/// Per-area blocks plus the score and information aggregates at one `eta`.
#[derive(Debug, Clone)]
pub struct EstimatingBlocks {
    pub eta: Hyperparameters,
    pub areas: Vec<AreaBlock>,
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    info_inv: DMatrix<f64>,
}

impl EstimatingBlocks {
    pub fn compute(dataset: &Dataset, eta: &Hyperparameters) -> Result<Self> {
        let family = dataset.family();
        let q = eta.dim();
        let p = q - 1;
        if dataset.p() != p {
            return Err(SaeError::Domain(format!(
                "eta has {p} regression coefficients but data has {} covariates",
                dataset.p()
            )));
        }
        eta.validate(family)?;
        let mut areas = Vec::with_capacity(dataset.m());
        for (i, obs) in dataset.areas().iter().enumerate() {
            let s = area_scalars(family, obs.y, obs.n, &obs.x, eta, i)?;
            let (d, r) = area_matrices(family, obs.n, &obs.x, eta, i)?;
            let sigma = Matrix2::new(
                s.moments.mu2,
                s.moments.mu3,
                s.moments.mu3,
                s.moments.mu4 - s.moments.mu2 * s.moments.mu2,
            );
            areas.push(AreaBlock {
                prior_mean: s.m,
                q: s.q,
                q_prime: s.q_prime,
                phi: s.phi,
                moments: s.moments,
                g: Vector2::new(s.g1, s.g2),
                d,
                sigma,
                det_sigma: s.det,
                r,
            });
        }
        let mut score = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        for &i in dataset.reduction_order() {
            let a = &areas[i];
            let g = DVector::from_column_slice(a.g.as_slice());
            score += &a.r * g;
            info += &a.r * &a.d;
        }
        // exact symmetry; the two triangles differ only by rounding
        let info = (&info + info.transpose()) * 0.5;
        let chol = Cholesky::new(info.clone()).ok_or(SaeError::SingularU)?;
        let info_inv = chol.inverse();
        if info_inv.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::SingularU);
        }
        Ok(Self { eta: eta.clone(), areas, score, info, chol, info_inv })
    }

    /// `U^-1`.
    pub fn info_inv(&self) -> &DMatrix<f64> {
        &self.info_inv
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `D_i' Sigma_i^-1 g_i`.
    pub fn area_score(&self, i: usize) -> DVector<f64> {
        let a = &self.areas[i];
        &a.r * DVector::from_column_slice(a.g.as_slice())
    }
}

/// `(D_i, R_i = D_i' Sigma_i^-1)` for one area; neither depends on `y`.
pub fn area_matrices(family: Family, n: f64, x: &[f64], eta: &Hyperparameters, area: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = eta.dim();
    let s = area_scalars(family, 0.0, n, x, eta, area)?;
    let mut d = DMatrix::zeros(2, q);
    for (k, &xk) in x.iter().enumerate() {
        d[(0, k)] = s.d_beta0 * xk;
        d[(1, k)] = s.d_beta1 * xk;
    }
    d[(1, q - 1)] = s.d_nu;
    let si = s.sigma_inv();
    let r = d.transpose() * DMatrix::from_column_slice(2, 2, si.as_slice());
    Ok((d, r))
}

/// `s_m(eta)` without materializing per-area matrices; this is the solver hot path.
pub fn score(dataset: &Dataset, eta: &Hyperparameters) -> Result<DVector<f64>> {
    let family = dataset.family();
    let q = eta.dim();
    let p = q - 1;
    let mut out = DVector::zeros(q);
    for &i in dataset.reduction_order() {
        let obs = dataset.area(i);
        let s = area_scalars(family, obs.y, obs.n, &obs.x, eta, i)?;
        let w = s.sigma_inv() * Vector2::new(s.g1, s.g2);
        let beta_weight = s.d_beta0 * w[0] + s.d_beta1 * w[1];
        for (k, &xk) in obs.x.iter().enumerate() {
            out[k] += xk * beta_weight;
        }
        out[p] += s.d_nu * w[1];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AreaObservation;
    use approx::assert_relative_eq;

    fn toy(family: Family) -> Dataset {
        let ys = [0.0, 0.2, 0.5, 0.3, 0.8, 0.1, 0.6];
        let areas = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| AreaObservation::new(format!("a{i}"), y, 10.0, vec![1.0, i as f64 / 6.0 - 0.5]))
            .collect();
        Dataset::new(family, areas).unwrap()
    }

    #[test]
    fn shapes_and_symmetry() {
        for fam in Family::ALL {
            let d = toy(fam);
            let eta = Hyperparameters::new(vec![-0.4, 0.3], 6.0);
            let b = EstimatingBlocks::compute(&d, &eta).unwrap();
            assert_eq!(b.areas[0].d.shape(), (2, 3));
            assert_eq!(b.areas[0].r.shape(), (3, 2));
            assert_eq!(b.info.shape(), (3, 3));
            assert_eq!(b.score.len(), 3);
            assert!((&b.info - b.info.transpose()).abs().max() <= 1e-12 * b.info.abs().max());
            let fast = score(&d, &eta).unwrap();
            for k in 0..3 {
                assert_relative_eq!(fast[k], b.score[k], epsilon = 1e-12, max_relative = 1e-12);
            }
            for a in &b.areas {
                assert_relative_eq!(a.det_sigma, a.sigma.determinant(), max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn blocks_finite_at_binomial_edges() {
        let areas = vec![
            AreaObservation::new("a", 0.0, 10.0, vec![1.0]),
            AreaObservation::new("b", 1.0, 10.0, vec![1.0]),
            AreaObservation::new("c", 0.5, 10.0, vec![1.0]),
        ];
        let d = Dataset::new(Family::BinomialBeta, areas).unwrap();
        let b = EstimatingBlocks::compute(&d, &Hyperparameters::new(vec![0.2], 15.0)).unwrap();
        assert!(b.score.iter().chain(b.info.iter()).all(|v| v.is_finite()));
    }

    /// The Gaussian score reduces to the two Fay-Herriot equations
    /// `sum x (y - x'b)/(A + D)` and `sum (y - x'b)^2/(A + D)^2 - sum 1/(A + D)`,
    /// up to the factors the weighting introduces on the nu row.
    #[test]
    fn gaussian_score_matches_fay_herriot_equations() {
        let d = toy(Family::Gaussian);
        let mut state = 3u64;
        let mut unif = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..5 {
            let eta = Hyperparameters::new(vec![unif() - 0.5, unif() - 0.5], 0.5 + 4.0 * unif());
            let s = score(&d, &eta).unwrap();
            let a = 1.0 / eta.nu;
            let mut eq_beta = [0.0; 2];
            let mut eq_nu = 0.0;
            for obs in d.areas() {
                let v = a + 1.0 / obs.n;
                let r = obs.y - obs.linear_predictor(&eta.beta);
                for k in 0..2 {
                    eq_beta[k] += obs.x[k] * r / v;
                }
                eq_nu += r * r / (v * v) - 1.0 / v;
            }
            assert_relative_eq!(s[0], eq_beta[0], epsilon = 1e-8);
            assert_relative_eq!(s[1], eq_beta[1], epsilon = 1e-8);
            // nu row: D_nu = -1/nu^2 and Sigma_22 = 2 (A + D)^2
            assert_relative_eq!(s[2], -eq_nu / (2.0 * eta.nu * eta.nu), epsilon = 1e-8);
        }
    }

    #[test]
    fn singular_u_is_reported() {
        // huge nu drives the nu column of every D_i to zero
        let d = toy(Family::PoissonGamma);
        let r = EstimatingBlocks::compute(&d, &Hyperparameters::new(vec![0.0, 0.0], 1e300));
        assert!(r.is_err());
    }
}
