//! JSON form of a fit.

use ptw_core::chaser::{FitConfig, FitResult, Parameter, PowerMode};
use ptw_core::ptwdist::LogLikelihood;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionStdErrors {
    pub phi: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub phi: f64,
    pub p: f64,
    pub std_errors: DispersionStdErrors,
    pub phi_fixed: bool,
    pub p_fixed: bool,
}

/// Row-major covariance with parameter names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vcov {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loglik {
    pub value: f64,
    pub mc_stderr: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n: usize,
    pub coefficients: Vec<Coefficient>,
    pub dispersion: Dispersion,
    pub vcov: Vcov,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik: Option<Loglik>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loglik_reason: Option<String>,
    pub convergence: Convergence,
}

fn two_sided_p(z: f64) -> f64 {
    let normal = Normal::standard();
    2.0 * normal.sf(z.abs())
}

impl FitReport {
    pub fn new(
        names: &[String],
        n: usize,
        fit: &FitResult,
        config: &FitConfig,
        loglik: Result<LogLikelihood, String>,
    ) -> Self {
        let coefficients = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let estimate = fit.theta_hat.beta[k];
                let std_error = fit.std_error(Parameter::Beta(k)).unwrap_or(f64::NAN);
                let z = estimate / std_error;
                Coefficient {
                    name: name.clone(),
                    estimate,
                    std_error,
                    z,
                    p_value: two_sided_p(z),
                }
            })
            .collect();
        let label = |p: &Parameter| match p {
            Parameter::Beta(k) => names[*k].clone(),
            Parameter::Phi => "phi".to_string(),
            Parameter::Power => "p".to_string(),
        };
        let cov = &fit.covariance;
        let values = (0..cov.rows()).map(|i| cov.row(i).to_vec()).collect();
        let (loglik, loglik_reason) = match loglik {
            Ok(l) => (
                Some(Loglik {
                    value: l.value,
                    mc_stderr: l.mc_stderr,
                    method: l.method.as_str().to_string(),
                }),
                None,
            ),
            Err(reason) => (None, Some(reason)),
        };
        let score_norm = fit.score.iter().fold(0.0f64, |a, s| a.max(s.abs()));
        Self {
            n,
            coefficients,
            dispersion: Dispersion {
                phi: fit.theta_hat.phi,
                p: fit.theta_hat.p,
                std_errors: DispersionStdErrors {
                    phi: fit.std_error(Parameter::Phi),
                    p: fit.std_error(Parameter::Power),
                },
                phi_fixed: config.fixed_phi.is_some(),
                p_fixed: matches!(config.power_mode, PowerMode::Fixed(_)),
            },
            vcov: Vcov {
                names: fit.parameters.iter().map(label).collect(),
                values,
            },
            loglik,
            loglik_reason,
            convergence: Convergence {
                converged: fit.converged,
                iterations: fit.iterations,
                score_norm,
                warnings: fit.warnings.iter().map(|w| w.to_string()).collect(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_values() {
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-9);
        assert_eq!(two_sided_p(0.0), 1.0);
    }
}
