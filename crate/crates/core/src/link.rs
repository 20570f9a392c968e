//! Logistic incidence link and the error-distribution families of the
//! latency transformation model.
//!
//! Every evaluation here is branch-on-sign stable: parameter iterates can be
//! far from the truth during root finding and must not produce `NaN`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::step::StepFunction;

/// Distribution of the error term in `H(T) = -X'beta + eps`.
///
/// `Ph` takes `eps` extreme-value, giving proportional hazards with
/// `Lambda(x) = exp(x)`; `Po` takes `eps` logistic, giving proportional odds
/// with `Lambda(x) = log(1 + exp(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ph,
    Po,
}

impl Family {
    pub fn token(self) -> &'static str {
        match self {
            Family::Ph => "ph",
            Family::Po => "po",
        }
    }

    /// Cumulative hazard `Lambda_eps(x)`.
    pub fn cum_hazard(self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.cum_hazard_raw(x))
    }

    /// Hazard `lambda_eps(x) = d Lambda_eps / dx`.
    pub fn hazard(self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.hazard_raw(x))
    }

    /// `d/dx log lambda_eps(x)`.
    pub fn dlog_hazard(self, x: f64) -> f64 {
        match self {
            Family::Ph => 1.0,
            Family::Po => logistic_complement(x),
        }
    }

    /// Unchecked cumulative hazard; `-inf` maps to 0 and `+inf` to `+inf`.
    #[inline]
    pub(crate) fn cum_hazard_raw(self, x: f64) -> f64 {
        match self {
            Family::Ph => x.exp(),
            Family::Po => softplus(x),
        }
    }

    #[inline]
    pub(crate) fn hazard_raw(self, x: f64) -> f64 {
        match self {
            Family::Ph => x.exp(),
            Family::Po => logistic(x),
        }
    }

    #[inline]
    pub(crate) fn log_hazard_raw(self, x: f64) -> f64 {
        match self {
            Family::Ph => x,
            Family::Po => log_logistic(x),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ph" => Ok(Family::Ph),
            "po" => Ok(Family::Po),
            other => Err(Error::Config(format!(
                "unknown model family '{other}' (expected 'ph' or 'po')"
            ))),
        }
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("expected a finite argument, got {x}")))
    }
}

/// `G(x) = exp(x) / (1 + exp(x))`. Defined on the extended reals.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Gbar(x) = 1 - G(x)`, evaluated as `G(-x)` so that tails keep precision.
#[inline]
pub fn logistic_complement(x: f64) -> f64 {
    logistic(-x)
}

/// `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x == f64::INFINITY {
        return f64::INFINITY;
    }
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log G(x) = -softplus(-x)`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

/// Ratio form of the population survival, `Gbar(zg) / G(Lambda - zg)`.
///
/// `cum_hazard` is `Lambda_eps{H(t) + w'beta}`, zero before the first jump of
/// `H` and `+inf` once `H` has saturated.
pub fn survival_ratio_form(cum_hazard: f64, zg: f64) -> f64 {
    if cum_hazard == f64::INFINITY {
        return logistic_complement(zg);
    }
    // Gbar(zg) / G(L - zg) = exp(log Gbar(zg) - log G(L - zg))
    (log_logistic(-zg) - log_logistic(cum_hazard - zg)).exp()
}

/// Mixture form `Gbar(zg) + G(zg) exp(-Lambda)`.
pub fn survival_mixture_form(cum_hazard: f64, zg: f64) -> f64 {
    logistic_complement(zg) + logistic(zg) * (-cum_hazard).exp()
}

/// `P(T > t | Z = z, W = w)` under the cure mixture with transformation
/// latency, evaluated from the step estimate `h` of `H`.
pub fn population_survival(
    t: f64,
    z: &[f64],
    w: &[f64],
    theta: &ParameterVector,
    h: &StepFunction,
    family: Family,
) -> f64 {
    let zg = dot(z, &theta.gamma);
    let level = h.evaluate(t);
    let cum = if level == f64::NEG_INFINITY {
        0.0
    } else {
        family.cum_hazard_raw(level + dot(w, &theta.beta))
    };
    survival_ratio_form(cum, zg)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
