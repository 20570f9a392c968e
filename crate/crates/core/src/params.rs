use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression parameters `theta = (beta, gamma)`: `beta` for the latency
/// transformation model, `gamma` for the logistic incidence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ParameterVector {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self { beta, gamma }
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self::new(vec![0.0; p], vec![0.0; q])
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.gamma.len()
    }

    pub fn dim(&self) -> usize {
        self.p() + self.q()
    }

    /// Stacked `(beta', gamma')'`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.beta.iter().chain(&self.gamma).copied())
    }

    pub fn from_stacked(stacked: &[f64], p: usize) -> Self {
        Self::new(stacked[..p].to_vec(), stacked[p..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().chain(&self.gamma).all(|v| v.is_finite())
    }

    pub(crate) fn check(&self, p: usize, q: usize) -> Result<()> {
        if self.p() != p || self.q() != q {
            return Err(Error::Domain(format!(
                "parameter dimensions ({}, {}) do not match data dimensions ({p}, {q})",
                self.p(),
                self.q()
            )));
        }
        if !self.is_finite() {
            return Err(Error::Domain("parameter vector has non-finite entries".into()));
        }
        Ok(())
    }
}
