//! Bayes and empirical Bayes predictors of `xi_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::estimate::FitResult;
use crate::model::Dataset;

/// Posterior mean `(n y + nu m)/(n + nu)`.
pub fn bayes_estimate(y: f64, n: f64, m: f64, nu: f64) -> f64 {
    (n * y + nu * m) / (n + nu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub area_id: String,
    pub y: f64,
    pub n: f64,
    pub xi_hat: f64,
    pub m_hat: f64,
    /// `nu_hat/(n + nu_hat)`, the weight on the prior mean.
    pub shrink_weight: f64,
}

/// EB predictions at the fitted hyperparameters, in input order.
pub fn eb_predict(dataset: &Dataset, fit: &FitResult) -> Result<Vec<PredictionRecord>> {
    if !fit.converged {
        return Err(SaeError::UnconvergedFit);
    }
    let family = dataset.family();
    let eta = &fit.eta_hat;
    Ok(dataset
        .areas()
        .iter()
        .map(|a| {
            let m_hat = family.mean_link(a.linear_predictor(&eta.beta));
            PredictionRecord {
                area_id: a.area_id.clone(),
                y: a.y,
                n: a.n,
                xi_hat: bayes_estimate(a.y, a.n, m_hat, eta.nu),
                m_hat,
                shrink_weight: eta.nu / (a.n + eta.nu),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn examples() {
        assert_relative_eq!(bayes_estimate(2.0, 10.0, 1.0, 15.0), 1.4, epsilon = 1e-15);
        assert_relative_eq!(bayes_estimate(0.3, 10.0, 0.5, 15.0), 0.42, epsilon = 1e-15);
        assert_relative_eq!(bayes_estimate(0.7, 3.0, 0.7, 9.0), 0.7, epsilon = 1e-15);
        assert_relative_eq!(bayes_estimate(5.0, 1e-12, 1.0, 15.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kumagaya_spot_check() {
        // the prior mean that reproduces the printed EB value, then the round trip
        let (y, n, nu, eb) = (1.324f64, 102.7f64, 158.0f64, 1.194f64);
        let m = (eb * (n + nu) - n * y) / nu;
        assert!((m - 1.0).abs() < 0.15);
        assert!((bayes_estimate(y, n, m, nu) - eb).abs() < 0.01);
    }
}
