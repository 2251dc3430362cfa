//! Second-order conditional bias of the GT estimator,
//! `E[eta_hat - eta | y_i] = U^-1 (R_i g_i + a1 + a2 / 2)`.
//!
//! `a1` and `a2` collect the expectation of the quadratic terms in the
//! expansion of `s_m(eta_hat) = 0`; they only depend on `eta` and the design,
//! so they are computed once per dataset. Derivatives of `D_j` and
//! `R_j = D_j' Sigma_j^-1` come from [`central_difference`].
//!
//! ```text
//! a1   = sum_j sum_k dR_j/deta_k (D_j U^-1)[:, k]
//!      + sum_j R_j[:, 1] (mu_j' R_j' U^-1 c_j),        c_j = (-2 Q_j x_j, 0)
//! a2_l = tr(U^-1 sum_j M_jl),
//! M_jl[a][b] = -sum_c dR_j[l][c]/deta_a D_j[c][b] - (a <-> b) + sum_c R_j[l][c] Z_j[c][a][b]
//! Z_j[c][a][b] = E[d2 g_jc / deta_a deta_b]
//!              = -dD_j[c][a]/deta_b + 2 Q_j^2 x_ja x_jb [c = 1, a, b in beta]
//! ```

use nalgebra::{DMatrix, DVector};

use crate::blocks::{area_matrices, EstimatingBlocks};
use crate::cmse::t1_derivatives;
use crate::diff::central_difference;
use crate::error::Result;
use crate::model::{Dataset, Hyperparameters};

/// Dataset-level pieces of the bias expansion at one `eta`.
#[derive(Debug, Clone)]
pub struct SharedBias {
    pub a1: DVector<f64>,
    pub a2: DVector<f64>,
    /// `U^-1 (a1 + a2 / 2)`, the unconditional second-order bias.
    pub unconditional: DVector<f64>,
    /// Derivatives `dD_j/deta_k`, indexed `[j][k]`.
    d_derivs: Vec<Vec<DMatrix<f64>>>,
}

/// Per-area output of the conditional bias computation.
#[derive(Debug, Clone)]
pub struct BiasConstituents {
    pub a1: DVector<f64>,
    pub a2: DVector<f64>,
    pub b: DVector<f64>,
    /// `Z_i` stacked as a `2q x q` matrix: row `c q + a`, column `b`.
    pub z: DMatrix<f64>,
    pub r: DVector<f64>,
    pub big_r: DMatrix<f64>,
    /// `(n_i + nu - v2)^-1`.
    pub lambda_shrink: f64,
    /// Leading conditional covariance of `eta_hat`, `U^-1`.
    pub covariance: DMatrix<f64>,
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn derivative_matrices(
    dataset: &Dataset,
    eta: &Hyperparameters,
    j: usize,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let family = dataset.family();
    let obs = dataset.area(j);
    let q = eta.dim();
    let mut dd = Vec::with_capacity(q);
    let mut dr = Vec::with_capacity(q);
    for k in 0..q {
        let both = central_difference(
            |e| {
                let (d, r) = area_matrices(family, obs.n, &obs.x, e, j)?;
                let mut v = flatten(&d);
                v.extend(flatten(&r));
                Ok(v)
            },
            eta,
            k,
            dataset.m(),
        )?;
        dd.push(DMatrix::from_column_slice(2, q, &both[..2 * q]));
        dr.push(DMatrix::from_column_slice(q, 2, &both[2 * q..]));
    }
    Ok((dd, dr))
}

/// `Z_j`, stacked as in [`BiasConstituents::z`].
fn z_matrix(dd: &[DMatrix<f64>], q_m: f64, x: &[f64], random_sign: f64) -> DMatrix<f64> {
    let q = dd.len();
    let p = q - 1;
    let mut z = DMatrix::zeros(2 * q, q);
    for c in 0..2 {
        for a in 0..q {
            for b in 0..q {
                let mut v = -dd[b][(c, a)];
                if c == 1 && a < p && b < p {
                    v += random_sign * 2.0 * q_m * q_m * x[a] * x[b];
                }
                z[(c * q + a, b)] = v;
            }
        }
    }
    z
}

/// `random_sign = 1` is the correct expansion. `-1` flips the sign of the
/// random part of `d g2 / d beta`; it exists to compare the two conventions
/// against simulation.
#[doc(hidden)]
pub fn shared_bias_with_sign(dataset: &Dataset, blocks: &EstimatingBlocks, random_sign: f64) -> Result<SharedBias> {
    let eta = &blocks.eta;
    let q = eta.dim();
    let p = q - 1;
    let u_inv = blocks.info_inv();
    let mut a1 = DVector::zeros(q);
    let mut m_sum: Vec<DMatrix<f64>> = vec![DMatrix::zeros(q, q); q];
    let mut d_derivs = vec![Vec::new(); dataset.m()];
    for &j in dataset.reduction_order() {
        let blk = &blocks.areas[j];
        let x = &dataset.area(j).x;
        let (dd, dr) = derivative_matrices(dataset, eta, j)?;
        let du = &blk.d * u_inv;
        for k in 0..q {
            a1 += &dr[k] * du.column(k);
        }
        let mut c = DVector::zeros(q);
        for a in 0..p {
            c[a] = random_sign * (-2.0) * blk.q * x[a];
        }
        let mu = DVector::from_vec(vec![blk.moments.mu2, blk.moments.mu3]);
        let scalar = (mu.transpose() * blk.r.transpose() * u_inv * &c)[(0, 0)];
        a1 += blk.r.column(1) * scalar;

        let z = z_matrix(&dd, blk.q, x, random_sign);
        for l in 0..q {
            let ml = &mut m_sum[l];
            for a in 0..q {
                for b in 0..q {
                    let mut v = 0.0;
                    for cc in 0..2 {
                        v -= dr[a][(l, cc)] * blk.d[(cc, b)];
                        v -= dr[b][(l, cc)] * blk.d[(cc, a)];
                        v += blk.r[(l, cc)] * z[(cc * q + a, b)];
                    }
                    ml[(a, b)] += v;
                }
            }
        }
        d_derivs[j] = dd;
    }
    let a2 = DVector::from_iterator(q, m_sum.iter().map(|ml| (u_inv * ml).trace()));
    let unconditional = blocks.solve(&(&a1 + &a2 * 0.5));
    Ok(SharedBias { a1, a2, unconditional, d_derivs })
}

pub fn shared_bias(dataset: &Dataset, blocks: &EstimatingBlocks) -> Result<SharedBias> {
    shared_bias_with_sign(dataset, blocks, 1.0)
}

/// Conditional bias constituents for area `i`.
pub fn conditional_bias(dataset: &Dataset, blocks: &EstimatingBlocks, shared: &SharedBias, i: usize) -> BiasConstituents {
    let family = dataset.family();
    let obs = dataset.area(i);
    let eta = &blocks.eta;
    let blk = &blocks.areas[i];
    let rhs = blocks.area_score(i) + &shared.a1 + &shared.a2 * 0.5;
    let b = blocks.solve(&rhs);
    let (r, big_r) = t1_derivatives(family, obs.y, obs.n, &obs.x, eta);
    BiasConstituents {
        a1: shared.a1.clone(),
        a2: shared.a2.clone(),
        b,
        z: z_matrix(&shared.d_derivs[i], blk.q, &obs.x, 1.0),
        r,
        big_r,
        lambda_shrink: 1.0 / (obs.n + eta.nu - family.v2()),
        covariance: blocks.info_inv().clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use crate::model::AreaObservation;

    fn dataset(family: Family) -> Dataset {
        let areas = (0..12)
            .map(|i| {
                let y = match family {
                    Family::BinomialBeta => (i % 7) as f64 / 10.0,
                    _ => 0.3 + 0.1 * (i % 5) as f64,
                };
                AreaObservation::new(format!("{i:02}"), y, 10.0, vec![1.0, (i as f64) / 12.0 - 0.4])
            })
            .collect();
        Dataset::new(family, areas).unwrap()
    }

    #[test]
    fn dimensions_and_symmetry() {
        for fam in Family::ALL {
            let d = dataset(fam);
            let eta = Hyperparameters::new(vec![-0.3, 0.4], 9.0);
            let blocks = EstimatingBlocks::compute(&d, &eta).unwrap();
            let shared = shared_bias(&d, &blocks).unwrap();
            let c = conditional_bias(&d, &blocks, &shared, 3);
            assert_eq!(c.a1.len(), 3);
            assert_eq!(c.a2.len(), 3);
            assert_eq!(c.b.len(), 3);
            assert_eq!(c.z.shape(), (6, 3));
            for cc in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        let (u, v) = (c.z[(cc * 3 + a, b)], c.z[(cc * 3 + b, a)]);
                        assert!((u - v).abs() <= 5e-3 * u.abs().max(v.abs()).max(1e-3), "{fam} {cc} {a} {b}: {u} {v}");
                    }
                }
            }
            assert!((&c.big_r - c.big_r.transpose()).abs().max() < 1e-10);
            assert!(c.b.iter().chain(c.a1.iter()).chain(c.a2.iter()).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gaussian_z_is_analytic() {
        // Gaussian: D = [[x', 0], [0, -1/nu^2]], so only Z[1][nu][nu] = -2/nu^3 is non-zero
        let d = dataset(Family::Gaussian);
        let eta = Hyperparameters::new(vec![0.1, 0.2], 15.0);
        let blocks = EstimatingBlocks::compute(&d, &eta).unwrap();
        let shared = shared_bias(&d, &blocks).unwrap();
        let c = conditional_bias(&d, &blocks, &shared, 0);
        let x = &d.area(0).x;
        let mut expect = DMatrix::zeros(6, 3);
        for a in 0..2 {
            for b in 0..2 {
                expect[(3 + a, b)] = 2.0 * x[a] * x[b];
            }
        }
        expect[(5, 2)] = -2.0 / eta.nu.powi(3);
        assert!((&c.z - expect).abs().max() < 1e-6, "{}", c.z);
    }
}
