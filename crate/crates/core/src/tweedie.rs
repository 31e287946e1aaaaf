//! The Tweedie family `Tw_p(μ, φ)` used as the Poisson mixing distribution.
//!
//! Only `p ≥ 1` is meaningful here: the mixing variable must be
//! non-negative. Samplers are exact for `p = 1`, `1 < p ≤ 2` and `p = 3`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, InverseGaussian, Poisson};
use thiserror::Error;

use crate::numcore::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TweedieError {
    #[error("invalid Tweedie parameters: {0}")]
    InvalidParameter(String),
    #[error("power p = {0} is not supported by this operation")]
    UnsupportedPower(f64),
    #[error("cumulant argument outside its domain: {0}")]
    Domain(String),
}

/// Which exact construction covers a given power.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerRegime {
    /// `p = 1`: scaled Poisson.
    ScaledPoisson,
    /// `1 < p < 2`: compound Poisson-gamma with an atom at zero.
    CompoundPoisson,
    /// `p = 2`
    Gamma,
    /// `p = 3`
    InverseGaussian,
    /// `2 < p`, `p ≠ 3`: positive stable family, no sampler here.
    PositiveStable,
}

impl PowerRegime {
    pub fn of(p: f64) -> PowerRegime {
        if p == 1.0 {
            PowerRegime::ScaledPoisson
        } else if p < 2.0 {
            PowerRegime::CompoundPoisson
        } else if p == 2.0 {
            PowerRegime::Gamma
        } else if p == 3.0 {
            PowerRegime::InverseGaussian
        } else {
            PowerRegime::PositiveStable
        }
    }

    pub fn can_sample(self) -> bool {
        self != PowerRegime::PositiveStable
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TweedieParams {
    mu: f64,
    phi: f64,
    p: f64,
}

impl TweedieParams {
    pub fn new(mu: f64, phi: f64, p: f64) -> Result<Self, TweedieError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(TweedieError::InvalidParameter(format!("mean must be positive, got {mu}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(TweedieError::InvalidParameter(format!(
                "dispersion must be positive, got {phi}"
            )));
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(TweedieError::InvalidParameter(format!(
                "power must be at least 1, got {p}"
            )));
        }
        Ok(Self { mu, phi, p })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn regime(&self) -> PowerRegime {
        PowerRegime::of(self.p)
    }

    /// `Var(Z) = φ μ^p`.
    pub fn variance(&self) -> f64 {
        self.phi * self.mu.powf(self.p)
    }

    /// Poisson rate, gamma shape and gamma scale of the compound
    /// Poisson-gamma representation (`1 < p < 2`).
    pub fn compound_poisson_parts(&self) -> (f64, f64, f64) {
        let (mu, phi, p) = (self.mu, self.phi, self.p);
        let rate = mu.powf(2.0 - p) / (phi * (2.0 - p));
        let shape = (2.0 - p) / (p - 1.0);
        let scale = phi * (p - 1.0) * mu.powf(p - 1.0);
        (rate, shape, scale)
    }

    /// Canonical parameter ψ solving `k_p'(ψ) = μ`.
    fn canonical(&self) -> f64 {
        let (mu, p) = (self.mu, self.p);
        match self.regime() {
            PowerRegime::ScaledPoisson => mu.ln(),
            PowerRegime::Gamma => -1.0 / mu,
            _ => -mu.powf(1.0 - p) / (p - 1.0),
        }
    }

    /// Laplace transform `E[exp(-sZ)]`, from the cumulant function:
    /// `exp{(k_p(ψ - sφ) - k_p(ψ)) / φ}`.
    pub fn laplace(&self, s: f64) -> Result<f64, TweedieError> {
        self.log_laplace(s).map(f64::exp)
    }

    pub fn log_laplace(&self, s: f64) -> Result<f64, TweedieError> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(TweedieError::Domain(format!("Laplace argument must be non-negative, got {s}")));
        }
        let (mu, phi, p) = (self.mu, self.phi, self.p);
        let psi = self.canonical();
        let shifted = psi - s * phi;
        Ok(match self.regime() {
            // k(ψ) = e^ψ
            PowerRegime::ScaledPoisson => mu * (-s * phi).exp_m1() / phi,
            // k(ψ) = -log(-ψ)
            PowerRegime::Gamma => -(s * phi * mu).ln_1p() / phi,
            _ => {
                if shifted >= 0.0 {
                    return Err(TweedieError::Domain(format!(
                        "ψ - sφ = {shifted} is not negative"
                    )));
                }
                // k(ψ) = ((α-1)/α) (ψ/(α-1))^α, written relative to k(ψ) so the
                // difference stays accurate as α → 0.
                let alpha = (p - 2.0) / (p - 1.0);
                let base = psi / (alpha - 1.0);
                let k0 = (alpha - 1.0) / alpha * base.powf(alpha);
                let log_ratio = (s * phi / -psi).ln_1p();
                k0 * (alpha * log_ratio).exp_m1() / phi
            }
        })
    }

    /// Closed-form density, available for the gamma (`p = 2`) and inverse
    /// Gaussian (`p = 3`) members.
    pub fn density(&self, z: f64) -> Result<f64, TweedieError> {
        self.log_density(z).map(f64::exp)
    }

    pub fn log_density(&self, z: f64) -> Result<f64, TweedieError> {
        if !(z > 0.0) {
            return Err(TweedieError::Domain(format!("density needs z > 0, got {z}")));
        }
        let (mu, phi) = (self.mu, self.phi);
        match self.regime() {
            PowerRegime::Gamma => {
                let shape = 1.0 / phi;
                let scale = phi * mu;
                Ok((shape - 1.0) * z.ln() - z / scale - statrs::function::gamma::ln_gamma(shape) - shape * scale.ln())
            }
            PowerRegime::InverseGaussian => {
                let lambda = 1.0 / phi;
                Ok(0.5 * (lambda / (2.0 * std::f64::consts::PI * z.powi(3))).ln()
                    - lambda * (z - mu).powi(2) / (2.0 * mu * mu * z))
            }
            _ => Err(TweedieError::UnsupportedPower(self.p)),
        }
    }

    /// One draw of Z.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, TweedieError> {
        let (mu, phi) = (self.mu, self.phi);
        let bad = |e: &dyn std::fmt::Display| TweedieError::InvalidParameter(e.to_string());
        Ok(match self.regime() {
            PowerRegime::ScaledPoisson => phi * poisson_draw(mu / phi, rng)?,
            PowerRegime::CompoundPoisson => {
                let (rate, shape, scale) = self.compound_poisson_parts();
                let count = poisson_draw(rate, rng)?;
                if count == 0.0 {
                    0.0
                } else {
                    // A sum of `count` iid Gamma(shape, scale) is Gamma(count·shape, scale).
                    Gamma::new(count * shape, scale).map_err(|e| bad(&e))?.sample(rng)
                }
            }
            PowerRegime::Gamma => Gamma::new(1.0 / phi, phi * mu).map_err(|e| bad(&e))?.sample(rng),
            PowerRegime::InverseGaussian => {
                InverseGaussian::new(mu, 1.0 / phi).map_err(|e| bad(&e))?.sample(rng)
            }
            PowerRegime::PositiveStable => return Err(TweedieError::UnsupportedPower(self.p)),
        })
    }

    /// `n` iid draws of Z.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<f64>, TweedieError> {
        if !self.regime().can_sample() {
            return Err(TweedieError::UnsupportedPower(self.p));
        }
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}

pub(crate) fn poisson_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<f64, TweedieError> {
    if rate == 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(rate).map_err(|e| TweedieError::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng))
}

pub fn tweedie_sample(params: &TweedieParams, n: usize, rng: &mut RngStream) -> Result<Vec<f64>, TweedieError> {
    params.sample(n, rng)
}

pub fn tweedie_density(params: &TweedieParams, z: f64) -> Result<f64, TweedieError> {
    params.density(z)
}

pub fn tweedie_laplace(params: &TweedieParams, s: f64) -> Result<f64, TweedieError> {
    params.laplace(s)
}
