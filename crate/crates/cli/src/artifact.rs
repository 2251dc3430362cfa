//! Fit artifact JSON. Non-finite numbers (failed starts) are written as `null`.

use serde::{Deserialize, Serialize};

use sae_core::estimate::{Candidate, FitDiagnostic, FitResult, Method};
use sae_core::family::Family;
use sae_core::model::Hyperparameters;

use crate::error::{CliError, CliResult};

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartLog {
    pub start_index: usize,
    pub start_beta: Vec<f64>,
    pub start_nu: f64,
    pub beta: Option<Vec<f64>>,
    pub nu: Option<f64>,
    pub norm: Option<f64>,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub at_boundary: bool,
}

impl From<&Candidate> for StartLog {
    fn from(c: &Candidate) -> Self {
        Self {
            start_index: c.start_index,
            start_beta: c.start.beta.clone(),
            start_nu: c.start.nu,
            beta: c.eta.as_ref().map(|e| e.beta.clone()),
            nu: c.eta.as_ref().map(|e| e.nu),
            norm: finite(c.norm),
            objective: finite(c.objective),
            iterations: c.iterations,
            converged: c.converged,
            at_boundary: c.at_boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub family: Family,
    pub method: Method,
    pub beta: Vec<f64>,
    pub nu: f64,
    pub converged: bool,
    pub at_boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub equation_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gradient_norm: Option<f64>,
    pub objective_value: Option<f64>,
    pub iterations: usize,
    pub multistart_index: usize,
    pub diagnostics: Vec<FitDiagnostic>,
    pub multistart: Vec<StartLog>,
}

impl FitArtifact {
    pub fn new(family: Family, fit: &FitResult) -> Self {
        Self {
            family,
            method: fit.method,
            beta: fit.eta_hat.beta.clone(),
            nu: fit.eta_hat.nu,
            converged: fit.converged,
            at_boundary: fit.at_boundary,
            equation_norm: fit.equation_norm,
            gradient_norm: fit.gradient_norm,
            objective_value: finite(fit.objective_value),
            iterations: fit.iterations,
            multistart_index: fit.multistart_index,
            diagnostics: fit.diagnostics.clone(),
            multistart: fit.candidates.iter().map(StartLog::from).collect(),
        }
    }

    /// The fit without its multistart log, which downstream commands do not need.
    pub fn to_fit(&self) -> FitResult {
        FitResult {
            eta_hat: Hyperparameters::new(self.beta.clone(), self.nu),
            method: self.method,
            objective_value: self.objective_value.unwrap_or(f64::NAN),
            equation_norm: self.equation_norm,
            gradient_norm: self.gradient_norm,
            iterations: self.iterations,
            converged: self.converged,
            multistart_index: self.multistart_index,
            at_boundary: self.at_boundary,
            candidates: Vec::new(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn parse(bytes: &[u8]) -> CliResult<Self> {
        serde_json::from_slice(bytes).map_err(|e| CliError::Input(format!("invalid fit artifact: {e}")))
    }
}
