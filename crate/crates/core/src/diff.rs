//! Symmetric differences in the natural `(beta, nu)` coordinates with the
//! step `z = m^(-5/4)`.

use crate::error::Result;
use crate::model::Hyperparameters;

/// `z_m = m^(-5/4)`.
pub fn step_for(m_areas: usize) -> f64 {
    (m_areas as f64).powf(-1.25)
}

/// Step actually used on component `k`: `z_m`, except that the `nu` step is
/// capped at `nu / 2` so both shifted points stay in the domain.
pub fn component_step(eta: &Hyperparameters, k: usize, m_areas: usize) -> f64 {
    let z = step_for(m_areas);
    if k + 1 == eta.dim() {
        z.min(0.5 * eta.nu)
    } else {
        z
    }
}

/// `(F(eta + z e_k) - F(eta - z e_k)) / (2 z)`, elementwise over the output.
pub fn central_difference<F>(func: F, eta: &Hyperparameters, k: usize, m_areas: usize) -> Result<Vec<f64>>
where
    F: Fn(&Hyperparameters) -> Result<Vec<f64>>,
{
    let z = component_step(eta, k, m_areas);
    let x = eta.component(k);
    let plus = func(&eta.with_component(k, x + z))?;
    let minus = func(&eta.with_component(k, x - z))?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * z)).collect())
}
