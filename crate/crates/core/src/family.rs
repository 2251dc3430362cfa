//! The three NEF-QVF mixed-model families.
//!
//! Each family fixes a quadratic variance function `Q(x) = v0 + v1 x + v2 x^2`,
//! a canonical mean link `m = psi'(x'beta)`, a conjugate prior sampler and a
//! closed-form marginal likelihood. The enumeration is closed: coefficients,
//! link, sampler and marginal always travel together.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SaeError};

/// Tolerance used to decide whether `n * y` sits on the integer lattice.
pub const LATTICE_TOL: f64 = 1e-9;

/// Coefficients of the quadratic variance function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QvfCoefficients {
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
}

impl QvfCoefficients {
    pub fn q(&self, x: f64) -> f64 {
        self.v0 + self.v1 * x + self.v2 * x * x
    }

    pub fn q_prime(&self, x: f64) -> f64 {
        self.v1 + 2.0 * self.v2 * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Normal-normal (Fay-Herriot) model with `A = 1/nu`, `D_i = 1/n_i`.
    Gaussian,
    /// `z ~ Po(n lambda)`, `lambda ~ Ga(nu m, 1/nu)`, `y = z/n`.
    PoissonGamma,
    /// `z ~ Bin(n, p)`, `p ~ Beta(nu m, nu (1 - m))`, `y = z/n`.
    BinomialBeta,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::PoissonGamma, Family::BinomialBeta];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::PoissonGamma => "poisson-gamma",
            Family::BinomialBeta => "binomial-beta",
        }
    }

    pub fn coefficients(self) -> QvfCoefficients {
        match self {
            Family::Gaussian => QvfCoefficients { v0: 1.0, v1: 0.0, v2: 0.0 },
            Family::PoissonGamma => QvfCoefficients { v0: 0.0, v1: 1.0, v2: 0.0 },
            Family::BinomialBeta => QvfCoefficients { v0: 0.0, v1: 1.0, v2: -1.0 },
        }
    }

    pub fn v2(self) -> f64 {
        self.coefficients().v2
    }

    /// `(Q(x), Q'(x))`.
    pub fn qvf(self, x: f64) -> (f64, f64) {
        let c = self.coefficients();
        (c.q(x), c.q_prime(x))
    }

    pub fn q(self, x: f64) -> f64 {
        self.coefficients().q(x)
    }

    pub fn q_prime(self, x: f64) -> f64 {
        self.coefficients().q_prime(x)
    }

    pub fn is_discrete(self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    /// Canonical mean link `psi'`.
    pub fn mean_link(self, linear_predictor: f64) -> f64 {
        match self {
            Family::Gaussian => linear_predictor,
            Family::PoissonGamma => linear_predictor.exp(),
            Family::BinomialBeta => logistic(linear_predictor),
        }
    }

    /// Inverse of [`Family::mean_link`]; used for pilot fits.
    pub fn link(self, mean: f64) -> f64 {
        match self {
            Family::Gaussian => mean,
            Family::PoissonGamma => mean.ln(),
            Family::BinomialBeta => (mean / (1.0 - mean)).ln(),
        }
    }

    /// Smallest `nu` for which the moments up to order four exist.
    pub fn nu_lower_bound(self) -> f64 {
        (3.0 * self.v2()).max(0.0)
    }

    /// Checks `y` against the family support and returns the lattice count `z = n y`
    /// for discrete families.
    pub fn lattice_count(self, y: f64, n: f64) -> Result<u64> {
        if !self.is_discrete() {
            return Err(SaeError::Domain(format!("{} has no lattice", self)));
        }
        if !(n > 0.0) || !y.is_finite() {
            return Err(SaeError::Domain(format!("invalid (y, n) = ({y}, {n})")));
        }
        let z = n * y;
        let rounded = z.round();
        if (z - rounded).abs() > LATTICE_TOL * rounded.abs().max(1.0) || rounded < 0.0 {
            return Err(SaeError::Domain(format!(
                "n*y = {z} is not a nonnegative integer"
            )));
        }
        if self == Family::BinomialBeta {
            if (n - n.round()).abs() > LATTICE_TOL * n.max(1.0) {
                return Err(SaeError::Domain(format!("binomial size n = {n} is not an integer")));
            }
            if rounded > n.round() {
                return Err(SaeError::Domain(format!("n*y = {z} exceeds n = {n}")));
            }
        }
        Ok(rounded as u64)
    }

    /// Log marginal mass (discrete families, at `z = n y`) or density (Gaussian) of `y`.
    pub fn log_marginal_density(self, y: f64, n: f64, m: f64, nu: f64) -> Result<f64> {
        if !(n > 0.0) || !(nu > 0.0) {
            return Err(SaeError::Domain(format!("need n > 0 and nu > 0, got n = {n}, nu = {nu}")));
        }
        match self {
            Family::Gaussian => {
                let var = 1.0 / nu + 1.0 / n;
                let r = y - m;
                Ok(-0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var)
            }
            Family::PoissonGamma => {
                let z = self.lattice_count(y, n)?;
                let shape = nu * m;
                let zf = z as f64;
                let mut ll = ln_rising(shape, z) - ln_gamma(zf + 1.0) - shape * (n / nu).ln_1p();
                if z > 0 {
                    ll -= zf * (nu / n).ln_1p();
                }
                Ok(ll)
            }
            Family::BinomialBeta => {
                let z = self.lattice_count(y, n)?;
                let size = n.round() as u64;
                let a = nu * m;
                let b = nu * (1.0 - m);
                Ok(ln_binomial(size, z) + ln_rising(a, z) + ln_rising(b, size - z)
                    - ln_rising(a + b, size))
            }
        }
    }

    /// Draws the latent mean and the observable `y` for one area.
    pub fn sample_area<R: Rng + ?Sized>(self, n: f64, m: f64, nu: f64, rng: &mut R) -> AreaDraw {
        match self {
            Family::Gaussian => {
                let v = Normal::new(0.0, (1.0 / nu).sqrt()).expect("finite sd").sample(rng);
                let e = Normal::new(0.0, (1.0 / n).sqrt()).expect("finite sd").sample(rng);
                AreaDraw { xi: m + v, y: m + v + e }
            }
            Family::PoissonGamma => {
                let lambda = Gamma::new(nu * m, 1.0 / nu).expect("positive gamma shape").sample(rng);
                let rate = n * lambda;
                let z = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(rng)
                } else {
                    0.0
                };
                AreaDraw { xi: lambda, y: z / n }
            }
            Family::BinomialBeta => {
                let p = Beta::new(nu * m, nu * (1.0 - m)).expect("positive beta parameters").sample(rng);
                let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { m };
                let size = n.round() as u64;
                let z = Binomial::new(size, p).expect("p in [0,1]").sample(rng) as f64;
                AreaDraw { xi: p, y: z / n }
            }
        }
    }

    /// Conjugate posterior of the area mean given `y`.
    pub fn posterior_params(self, y: f64, n: f64, m: f64, nu: f64) -> PosteriorParams {
        let total = n + nu;
        let xi_hat = (n * y + nu * m) / total;
        match self {
            Family::Gaussian => PosteriorParams::Normal { mean: xi_hat, variance: 1.0 / total },
            Family::PoissonGamma => PosteriorParams::Gamma { shape: total * xi_hat, scale: 1.0 / total },
            Family::BinomialBeta => PosteriorParams::Beta {
                alpha: total * xi_hat,
                beta: total * (1.0 - xi_hat),
            },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "fay-herriot" | "normal" => Ok(Family::Gaussian),
            "poisson-gamma" | "poisson" => Ok(Family::PoissonGamma),
            "binomial-beta" | "binomial" => Ok(Family::BinomialBeta),
            other => Err(SaeError::Domain(format!("unknown family '{other}'"))),
        }
    }
}

/// One draw from the two-stage model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaDraw {
    pub xi: f64,
    pub y: f64,
}

/// Posterior of the area mean; parameterization follows the family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PosteriorParams {
    Normal { mean: f64, variance: f64 },
    Gamma { shape: f64, scale: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl PosteriorParams {
    pub fn mean(&self) -> f64 {
        match *self {
            PosteriorParams::Normal { mean, .. } => mean,
            PosteriorParams::Gamma { shape, scale } => shape * scale,
            PosteriorParams::Beta { alpha, beta } => alpha / (alpha + beta),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            PosteriorParams::Normal { variance, .. } => variance,
            PosteriorParams::Gamma { shape, scale } => shape * scale * scale,
            PosteriorParams::Beta { alpha, beta } => {
                let s = alpha + beta;
                alpha * beta / (s * s * (s + 1.0))
            }
        }
    }
}

/// Logistic function split on the sign of the argument so neither branch overflows.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Gamma(a + k) - ln Gamma(a)` for integer `k`.
///
/// Short rising products are summed term by term, which avoids the
/// cancellation of two large log-gamma values when `a` is huge.
pub fn ln_rising(a: f64, k: u64) -> f64 {
    if k <= 64 {
        (0..k).map(|i| (a + i as f64).ln()).sum()
    } else {
        ln_gamma(a + k as f64) - ln_gamma(a)
    }
}

/// `ln C(n, k)` through log-gamma.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// ln Gamma(x) for x on the half-integer lattice, by exact recurrence from
    /// Gamma(1) = 1 and Gamma(1/2) = sqrt(pi).
    fn ln_gamma_lattice(x: f64) -> f64 {
        let twice = (2.0 * x).round() as i64;
        assert!((2.0 * x - twice as f64).abs() < 1e-12 && twice >= 1);
        let (mut acc, mut t) = if twice % 2 == 0 {
            (0.0, 1.0)
        } else {
            (0.5 * std::f64::consts::PI.ln(), 0.5)
        };
        while t < x - 1e-9 {
            acc += t.ln();
            t += 1.0;
        }
        acc
    }

    #[test]
    fn qvf_values() {
        assert_eq!(Family::Gaussian.qvf(3.7), (1.0, 0.0));
        assert_eq!(Family::PoissonGamma.qvf(1.4), (1.4, 1.0));
        let (q, qp) = Family::BinomialBeta.qvf(0.42);
        assert_relative_eq!(q, 0.2436, epsilon = 1e-15);
        assert_relative_eq!(qp, 0.16, epsilon = 1e-15);
    }

    #[test]
    fn links() {
        assert_eq!(Family::Gaussian.mean_link(0.0), 0.0);
        assert_eq!(Family::PoissonGamma.mean_link(0.0), 1.0);
        assert!((Family::BinomialBeta.mean_link(1.5) - 0.817574).abs() < 5e-7);
        assert!(Family::BinomialBeta.mean_link(800.0) == 1.0);
        assert!(Family::BinomialBeta.mean_link(-800.0) >= 0.0);
        for lp in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            for fam in Family::ALL {
                assert_relative_eq!(fam.link(fam.mean_link(lp)), lp, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn poisson_gamma_zero_count() {
        let ll = Family::PoissonGamma.log_marginal_density(0.0, 10.0, 1.0, 15.0).unwrap();
        assert_relative_eq!(ll, 15.0 * 0.6f64.ln(), epsilon = 1e-12);
        assert!((ll + 7.662384).abs() < 1e-6);
    }

    #[test]
    fn binomial_beta_zero_count_matches_lattice_gamma() {
        let ll = Family::BinomialBeta.log_marginal_density(0.0, 10.0, 0.5, 15.0).unwrap();
        let oracle = ln_gamma_lattice(17.5) + ln_gamma_lattice(15.0)
            - ln_gamma_lattice(25.0)
            - ln_gamma_lattice(7.5);
        assert_relative_eq!(ll, oracle, epsilon = 1e-12);
    }

    #[test]
    fn discrete_marginals_sum_to_one() {
        for &(n, m, nu) in &[(10.0, 0.5, 15.0), (50.0, 0.2, 3.0), (1.0, 0.9, 0.5), (7.0, 0.3, 40.0)] {
            let total: f64 = (0..=n as u64)
                .map(|z| {
                    Family::BinomialBeta
                        .log_marginal_density(z as f64 / n, n, m, nu)
                        .unwrap()
                        .exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "beta-binomial mass {total}");
        }
        for &(n, m, nu) in &[(10.0, 1.0, 15.0), (50.0, 0.3, 2.0), (2.5, 2.0, 8.0)] {
            let total: f64 = (0..20_000u64)
                .map(|z| {
                    Family::PoissonGamma
                        .log_marginal_density(z as f64 / n, n, m, nu)
                        .unwrap()
                        .exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-10, "negative binomial mass {total}");
        }
    }

    #[test]
    fn gaussian_marginal_matches_normal() {
        let ll = Family::Gaussian.log_marginal_density(1.0, 10.0, 0.0, 1.0).unwrap();
        let var: f64 = 1.1;
        let expected = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 / var;
        assert_relative_eq!(ll, expected, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_marginal_integrates_to_one() {
        // composite Simpson on [-12 sd, 12 sd]
        let (n, m, nu) = (4.0, 0.3, 2.0);
        let sd = (1.0f64 / nu + 1.0 / n).sqrt();
        let (lo, hi) = (m - 12.0 * sd, m + 12.0 * sd);
        let k = 4000;
        let h = (hi - lo) / k as f64;
        let f = |y: f64| Family::Gaussian.log_marginal_density(y, n, m, nu).unwrap().exp();
        let mut s = f(lo) + f(hi);
        for i in 1..k {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + i as f64 * h);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn off_lattice_is_rejected() {
        assert!(Family::PoissonGamma.log_marginal_density(0.15, 10.0, 1.0, 15.0).is_err());
        assert!(Family::BinomialBeta.log_marginal_density(1.1, 10.0, 0.5, 15.0).is_err());
        assert!(Family::BinomialBeta.log_marginal_density(-0.1, 10.0, 0.5, 15.0).is_err());
        assert!(Family::BinomialBeta.log_marginal_density(0.5, 10.5, 0.5, 15.0).is_err());
    }

    #[test]
    fn posterior_examples() {
        let pg = Family::PoissonGamma.posterior_params(2.0, 10.0, 1.0, 15.0);
        assert_eq!(pg, PosteriorParams::Gamma { shape: 35.0, scale: 0.04 });
        assert_relative_eq!(pg.mean(), 1.4, epsilon = 1e-12);
        assert_relative_eq!(pg.variance(), 0.056, epsilon = 1e-12);

        let bb = Family::BinomialBeta.posterior_params(0.3, 10.0, 0.5, 15.0);
        match bb {
            PosteriorParams::Beta { alpha, beta } => {
                assert_relative_eq!(alpha, 10.5, epsilon = 1e-12);
                assert_relative_eq!(beta, 14.5, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_relative_eq!(bb.variance(), 0.42 * 0.58 / 26.0, epsilon = 1e-14);
        assert!((bb.variance() - 0.0093692).abs() < 5e-8);

        let g = Family::Gaussian.posterior_params(2.0, 10.0, 0.0, 1.0);
        assert_relative_eq!(g.mean(), 20.0 / 11.0, epsilon = 1e-14);
        assert_relative_eq!(g.variance(), 1.0 / 11.0, epsilon = 1e-14);
    }

    #[test]
    fn sampling_is_deterministic() {
        for fam in Family::ALL {
            let mut a = ChaCha8Rng::seed_from_u64(11);
            let mut b = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..100 {
                assert_eq!(fam.sample_area(10.0, 0.5, 15.0, &mut a), fam.sample_area(10.0, 0.5, 15.0, &mut b));
            }
        }
    }

    #[test]
    fn poisson_gamma_sample_mean_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 1_000_000;
        let ys: Vec<f64> = (0..draws)
            .map(|_| Family::PoissonGamma.sample_area(10.0, 1.0, 15.0, &mut rng).y)
            .collect();
        let mean = ys.iter().sum::<f64>() / draws as f64;
        let m2: Vec<f64> = ys.iter().map(|y| (y - 1.0).powi(2)).collect();
        let var = m2.iter().sum::<f64>() / draws as f64;
        let var_sd = (m2.iter().map(|v| (v - var).powi(2)).sum::<f64>() / draws as f64).sqrt();
        let mean_se = (var / draws as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * mean_se, "mean {mean}");
        assert!((var - 1.0 / 6.0).abs() < 3.0 * var_sd / (draws as f64).sqrt(), "var {var}");
    }

    #[test]
    fn conditional_variance_is_q_over_n() {
        // Var(y | xi) = Q(xi)/n: decompose the sampled y around its own xi.
        for fam in Family::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (n, m, nu) = (10.0, 0.4, 15.0);
            let draws = 1_000_000;
            let mut resid = Vec::with_capacity(draws);
            for _ in 0..draws {
                let d = fam.sample_area(n, m, nu, &mut rng);
                // E[(y - xi)^2 - Q(xi)/n] = 0
                resid.push((d.y - d.xi).powi(2) - fam.q(d.xi) / n);
            }
            let mean = resid.iter().sum::<f64>() / draws as f64;
            let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / draws as f64).sqrt();
            assert!(mean.abs() < 4.0 * sd / (draws as f64).sqrt(), "{fam}: {mean}");
        }
    }
}
