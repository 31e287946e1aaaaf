//! The Poisson-Tweedie distribution: `Y | Z ~ Poisson(Z)`, `Z ~ Tw_p(μ, φ)`.
//!
//! `E(Y) = μ` and `Var(Y) = μ + φ μ^p`. The moment model is defined for any
//! `φ > -μ^{1-p}`, but a probability mass function only exists for `φ ≥ 0`
//! and `p ≥ 1`; every probabilistic operation here refuses the rest.
//!
//! PMF evaluation dispatches on the power:
//!
//! | case | method |
//! |------|--------|
//! | `φ = 0` or negligible mixing variance | Poisson closed form |
//! | `p = 2` | negative binomial closed form |
//! | `p = 1` | lattice sum over the scaled-Poisson mixing law (Neyman Type A) |
//! | `p = 3` | Gauss-Laguerre quadrature, Monte Carlo if the rule is unresolved |
//! | otherwise | importance-weighted Monte Carlo average of `Poisson(y; Z_k)` |
//!
//! Monte Carlo draws are shared across all `y` for a parameter set, so
//! consecutive probabilities (and the heavy-tail ratio) are smooth in `y`.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::numcore::{gauss_laguerre, QuadratureRule, RngStream};
use crate::tweedie::{PowerRegime, TweedieError, TweedieParams};

/// Mixing variance below which the Poisson-Tweedie law is replaced by the
/// plain Poisson. The absolute PMF error of doing so is at most `Var(Z)`.
const DEGENERATE_MIXING_VARIANCE: f64 = 1e-8;

/// Relative disagreement between the full and half-order Gauss-Laguerre rules
/// beyond which the quadrature is considered unresolved.
const QUADRATURE_AGREEMENT_RTOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PtwError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("variance μ + φμ^p = {0} is not positive")]
    VarianceNonPositive(f64),
    #[error("no probability distribution for these parameters: {0}")]
    NoDistribution(String),
    #[error("estimate of P(Y = {y}) = {value:e} is within 10 Monte Carlo standard errors ({stderr:e}) of zero")]
    UnreliableEstimate { y: u64, value: f64, stderr: f64 },
    #[error("estimated P(Y = {y}) is zero; increase the Monte Carlo budget")]
    NonPositivePmf { y: u64 },
    #[error(transparent)]
    Tweedie(#[from] TweedieError),
}

/// Mean, dispersion and power of a Poisson-Tweedie variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PtwParams {
    pub mu: f64,
    pub phi: f64,
    pub p: f64,
}

impl PtwParams {
    /// Moment-level parameters: `μ > 0` and `μ + φμ^p > 0`.
    pub fn new(mu: f64, phi: f64, p: f64) -> Result<Self, PtwError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(PtwError::InvalidParameter(format!("mean must be positive, got {mu}")));
        }
        if !phi.is_finite() || !p.is_finite() {
            return Err(PtwError::InvalidParameter(format!("non-finite φ = {phi} or p = {p}")));
        }
        let params = Self { mu, phi, p };
        let c = params.variance();
        if !(c > 0.0) {
            return Err(PtwError::VarianceNonPositive(c));
        }
        Ok(params)
    }

    /// `μ + φ μ^p`.
    pub fn variance(&self) -> f64 {
        self.mu + self.phi * self.mu.powf(self.p)
    }

    /// The Tweedie mixing law, or `None` when `φ = 0` (plain Poisson).
    pub fn mixing(&self) -> Result<Option<TweedieParams>, PtwError> {
        if self.phi < 0.0 {
            return Err(PtwError::NoDistribution(format!(
                "φ = {} < 0 describes underdispersion, which has no Poisson-Tweedie law",
                self.phi
            )));
        }
        if self.p < 1.0 {
            return Err(PtwError::NoDistribution(format!(
                "p = {} < 1 has no non-negative Tweedie mixing law",
                self.p
            )));
        }
        if self.phi == 0.0 {
            return Ok(None);
        }
        Ok(Some(TweedieParams::new(self.mu, self.phi, self.p)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PmfMethod {
    MonteCarlo,
    GaussLaguerre,
    ExactSum,
    ClosedForm,
}

impl PmfMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PmfMethod::MonteCarlo => "monte-carlo",
            PmfMethod::GaussLaguerre => "gauss-laguerre",
            PmfMethod::ExactSum => "exact-sum",
            PmfMethod::ClosedForm => "closed-form",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmfEstimate {
    pub value: f64,
    /// Zero for deterministic methods.
    pub mc_stderr: f64,
    pub method: PmfMethod,
    /// Set when a truncation or iteration cap was hit before the requested
    /// accuracy was reached.
    pub budget_exhausted: bool,
}

/// Accuracy and cost controls for PMF evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfConfig {
    pub mc_draws: usize,
    pub seed: u64,
    pub laguerre_nodes: usize,
    pub lattice_tail: f64,
    pub max_lattice_terms: usize,
}

impl Default for PmfConfig {
    fn default() -> Self {
        Self {
            mc_draws: 100_000,
            seed: 20_170_101,
            laguerre_nodes: 128,
            lattice_tail: 1e-12,
            max_lattice_terms: 5_000_000,
        }
    }
}

pub(crate) fn ln_factorial(y: u64) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

/// `log Poisson(y; z)`; `z = 0` is the point mass at zero.
pub(crate) fn poisson_ln_pmf(y: u64, z: f64, ln_fact: f64) -> f64 {
    if z == 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y as f64 * z.ln() - z - ln_fact
}

/// `ln Γ(y + r) - ln Γ(r)`, summed term by term for moderate `y` so that it
/// stays accurate when `r` is huge.
fn ln_rising(r: f64, y: u64) -> f64 {
    if y < 10_000 {
        (0..y).map(|j| (r + j as f64).ln()).sum()
    } else {
        ln_gamma(r + y as f64) - ln_gamma(r)
    }
}

#[derive(Debug)]
enum Engine {
    Poisson { mu: f64 },
    NegativeBinomial { size: f64, ln_q0: f64, ln_q1: f64 },
    Lattice { atoms: Vec<(f64, f64)>, exhausted: bool },
    Quadrature { half: QuadratureRule, full: QuadratureRule, scale: f64, mc: MonteCarlo },
    MonteCarlo(MonteCarlo),
}

/// Share of Monte Carlo draws taken from the mixing law itself. The rest come
/// from exponentially tilted copies with larger means, so that tail
/// probabilities are estimated from draws that actually reach the tail.
const DEFENSIVE_SHARE: f64 = 0.5;
/// Number of tilted components.
const TILT_COMPONENTS: usize = 6;
/// Tilted means are spread evenly over `μ` to `μ + TILT_REACH·sd(Y)`.
const TILT_REACH: f64 = 12.0;
/// Relative singular-value cutoff when inverting the control covariance.
const CONTROL_PINV_RTOL: f64 = 1e-12;
/// Largest worst-case control adjustment of a single draw, relative to the
/// largest unadjusted term, for which the adjusted terms are used.
const CONTROL_ADJUST_CAP: f64 = 100.0;

/// `(a^s - b^s) / s`, continuous at `s = 0` where it equals `ln(a / b)`.
fn power_difference(a: f64, b: f64, s: f64) -> f64 {
    let ln_ratio = (a / b).ln();
    if s == 0.0 {
        ln_ratio
    } else {
        b.powf(s) * (s * ln_ratio).exp_m1() / s
    }
}

/// Mixing draws `z_k` with log importance weights and control variates.
#[derive(Debug)]
struct WeightedDraws {
    z: Vec<f64>,
    log_weight: Vec<f64>,
    /// Row-major `draws × TILT_COMPONENTS` values of `q_j(z)/q(z) - 1`, each
    /// with expectation zero under the sampling mixture `q`.
    controls: Vec<f64>,
    /// Pseudo-inverse of the control covariance within each fold. Draw `k`
    /// belongs to fold `k % 2`.
    control_gram_pinv: Option<[DMatrix<f64>; 2]>,
    /// Every control lies in `[-1, control_bound]`.
    control_bound: f64,
}

/// Lazily drawn mixing sample for Monte Carlo integration.
///
/// Draws come from a defensive mixture of the Tweedie mixing law and tilted
/// Tweedie laws with the same φ and p. Tilting keeps the family, so the
/// likelihood ratio is `exp{(Δθ z - Δκ) / φ}` in the canonical parameter and
/// cumulant. The mixture densities serve as control variates, which keeps
/// central probabilities about as precise as plain sampling would.
#[derive(Debug)]
struct MonteCarlo {
    mixing: TweedieParams,
    draws: usize,
    seed: u64,
    stream: u64,
    sample: OnceLock<Result<WeightedDraws, TweedieError>>,
}

impl MonteCarlo {
    fn new(mixing: TweedieParams, cfg: &PmfConfig, stream: u64) -> Self {
        Self {
            mixing,
            draws: cfg.mc_draws.max(2),
            seed: cfg.seed,
            stream,
            sample: OnceLock::new(),
        }
    }

    fn draw(&self) -> Result<WeightedDraws, TweedieError> {
        let (mu, phi, p) = (self.mixing.mu(), self.mixing.phi(), self.mixing.p());
        let sd_y = (mu + self.mixing.variance()).sqrt();
        let tilted: Vec<f64> = (1..=TILT_COMPONENTS)
            .map(|k| mu + TILT_REACH * sd_y * k as f64 / TILT_COMPONENTS as f64)
            .collect();
        // (Δθ, Δκ) of each tilted component relative to the mixing law
        let shifts: Vec<(f64, f64)> = tilted
            .iter()
            .map(|&m| (power_difference(m, mu, 1.0 - p), power_difference(m, mu, 2.0 - p)))
            .collect();
        let share = (1.0 - DEFENSIVE_SHARE) / TILT_COMPONENTS as f64;
        // even block sizes let index parity split every block in half
        let n_tilted = ((self.draws as f64 * share).floor() as usize).min(self.draws / (TILT_COMPONENTS + 1)) & !1;
        let n_base = if n_tilted == 0 { self.draws } else { (self.draws - n_tilted * TILT_COMPONENTS) & !1 };

        let mut rng = RngStream::new(self.seed, 0).substream(self.stream);
        let mut z = self.mixing.sample(n_base, &mut rng)?;
        if n_tilted == 0 {
            return Ok(WeightedDraws {
                log_weight: vec![0.0; z.len()],
                z,
                controls: Vec::new(),
                control_gram_pinv: None,
                control_bound: 0.0,
            });
        }
        for &m in &tilted {
            z.extend(TweedieParams::new(m, phi, p)?.sample(n_tilted, &mut rng)?);
        }
        let m = z.len() as f64;
        let (ln_base, ln_tilt) = ((n_base as f64 / m).ln(), (n_tilted as f64 / m).ln());
        let mut log_weight = Vec::with_capacity(z.len());
        let mut controls = Vec::with_capacity(z.len() * TILT_COMPONENTS);
        let mut ln_ratio = [0.0; TILT_COMPONENTS];
        for &zk in &z {
            for (r, &(dt, dk)) in ln_ratio.iter_mut().zip(&shifts) {
                *r = (dt * zk - dk) / phi;
            }
            // ln q(z)/f(z) by log-sum-exp over the mixture
            let top = ln_ratio.iter().map(|r| r + ln_tilt).fold(ln_base, f64::max);
            let sum = (ln_base - top).exp() + ln_ratio.iter().map(|r| (r + ln_tilt - top).exp()).sum::<f64>();
            let ln_q = top + sum.ln();
            log_weight.push(-ln_q);
            controls.extend(ln_ratio.iter().map(|r| (r - ln_q).exp() - 1.0));
        }
        let pinv = |fold: usize| {
            let gram = fold_gram(&controls, fold);
            let tol = CONTROL_PINV_RTOL * gram.diagonal().max();
            gram.pseudo_inverse(tol).ok()
        };
        let control_gram_pinv = match (pinv(0), pinv(1)) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        };
        Ok(WeightedDraws {
            z,
            log_weight,
            controls,
            control_gram_pinv,
            control_bound: m / n_tilted as f64 - 1.0,
        })
    }

    fn sample(&self) -> Result<&WeightedDraws, PtwError> {
        match self.sample.get_or_init(|| self.draw()) {
            Ok(v) => Ok(v),
            Err(e) => Err(e.clone().into()),
        }
    }

    /// Per-draw contributions whose mean estimates `P(Y = y)`: importance
    /// weighted Poisson probabilities minus the fitted control variates.
    fn terms(&self, y: u64) -> Result<Vec<f64>, PtwError> {
        let lf = ln_factorial(y);
        let d = self.sample()?;
        let t: Vec<f64> = d
            .z
            .iter()
            .zip(&d.log_weight)
            .map(|(&z, &lw)| (poisson_ln_pmf(y, z, lf) + lw).exp())
            .collect();
        let Some(pinv) = &d.control_gram_pinv else {
            return Ok(t);
        };
        // each fold is adjusted with coefficients fitted on the other, so the
        // adjustment has mean zero whatever the fit
        let coef: Vec<DVector<f64>> = (0..2)
            .map(|fold| &pinv[fold] * fold_cross(&d.controls, &t, fold))
            .collect();
        let adjusted: Vec<f64> = d
            .controls
            .chunks_exact(TILT_COMPONENTS)
            .zip(&t)
            .enumerate()
            .map(|(k, (row, &tk))| tk - row.iter().zip(coef[1 - k % 2].iter()).map(|(c, b)| c * b).sum::<f64>())
            .collect();
        // Nearly collinear controls get huge coefficients. The adjusted terms
        // are then heavy tailed and their sample variance is not to be trusted.
        let reach = d.control_bound.max(1.0);
        let worst = coef.iter().map(|b| b.lp_norm(1) * reach).fold(0.0, f64::max);
        let t_max = t.iter().fold(0.0, |a: f64, &v| a.max(v));
        let bounded = worst <= CONTROL_ADJUST_CAP * t_max;
        let better = mean_and_stderr(&adjusted).1 < mean_and_stderr(&t).1;
        // the regression estimate can also dip below zero far out in the tail
        if bounded && better && adjusted.iter().sum::<f64>() > 0.0 {
            Ok(adjusted)
        } else {
            Ok(t)
        }
    }

    fn estimate(&self, y: u64) -> Result<PmfEstimate, PtwError> {
        let t = self.terms(y)?;
        let (mean, se) = mean_and_stderr(&t);
        Ok(PmfEstimate {
            value: mean,
            mc_stderr: se,
            method: PmfMethod::MonteCarlo,
            budget_exhausted: false,
        })
    }
}

/// Rows of a row-major `draws × TILT_COMPONENTS` control matrix in one fold,
/// paired with their draw index.
fn fold_rows(controls: &[f64], fold: usize) -> impl Iterator<Item = (usize, &[f64])> + Clone {
    controls.chunks_exact(TILT_COMPONENTS).enumerate().filter(move |(k, _)| k % 2 == fold)
}

fn fold_means(controls: &[f64], fold: usize) -> (DVector<f64>, f64) {
    let mut mean = DVector::<f64>::zeros(TILT_COMPONENTS);
    let mut m = 0.0;
    for (_, row) in fold_rows(controls, fold) {
        mean += DVector::from_column_slice(row);
        m += 1.0;
    }
    (mean / m, m)
}

/// Covariance of the controls within a fold.
fn fold_gram(controls: &[f64], fold: usize) -> DMatrix<f64> {
    let (mean, m) = fold_means(controls, fold);
    let mut gram = DMatrix::<f64>::zeros(TILT_COMPONENTS, TILT_COMPONENTS);
    for (_, row) in fold_rows(controls, fold) {
        let c = DVector::from_column_slice(row) - &mean;
        gram.ger(1.0 / m, &c, &c, 1.0);
    }
    gram
}

/// Covariance of the controls with `t` within a fold.
fn fold_cross(controls: &[f64], t: &[f64], fold: usize) -> DVector<f64> {
    let (mean, m) = fold_means(controls, fold);
    let t_mean = fold_rows(controls, fold).map(|(k, _)| t[k]).sum::<f64>() / m;
    let mut cross = DVector::<f64>::zeros(TILT_COMPONENTS);
    for (k, row) in fold_rows(controls, fold) {
        let c = DVector::from_column_slice(row) - &mean;
        cross.axpy((t[k] - t_mean) / m, &c, 1.0);
    }
    cross
}

/// Sample mean and its standard error, computed on values rescaled by their
/// largest magnitude so that tiny probabilities do not underflow when squared.
fn mean_and_stderr(t: &[f64]) -> (f64, f64) {
    let m = t.len() as f64;
    let scale = t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return (t.iter().sum::<f64>() / m, 0.0);
    }
    let mean = t.iter().map(|v| v / scale).sum::<f64>() / m;
    let var = t.iter().map(|v| (v / scale - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean * scale, (var / m).sqrt() * scale)
}

/// PMF evaluator for one parameter set. Construction does the per-parameter
/// work (quadrature rule, lattice atoms); Monte Carlo draws are made on first
/// use and shared by every subsequent `y`.
#[derive(Debug)]
pub struct PmfEvaluator {
    params: PtwParams,
    engine: Engine,
}

impl PmfEvaluator {
    pub fn new(params: PtwParams, cfg: &PmfConfig) -> Result<Self, PtwError> {
        Self::with_stream(params, cfg, 0)
    }

    /// As [`PmfEvaluator::new`], drawing Monte Carlo variates from substream
    /// `stream` of the configured seed.
    pub fn with_stream(params: PtwParams, cfg: &PmfConfig, stream: u64) -> Result<Self, PtwError> {
        let Some(mixing) = params.mixing()? else {
            return Ok(Self { params, engine: Engine::Poisson { mu: params.mu } });
        };
        if mixing.variance() <= DEGENERATE_MIXING_VARIANCE {
            return Ok(Self { params, engine: Engine::Poisson { mu: params.mu } });
        }
        let (mu, phi) = (params.mu, params.phi);
        let engine = match mixing.regime() {
            PowerRegime::Gamma => {
                let a = phi * mu;
                Engine::NegativeBinomial {
                    size: 1.0 / phi,
                    ln_q0: -a.ln_1p(),
                    ln_q1: a.ln() - a.ln_1p(),
                }
            }
            PowerRegime::ScaledPoisson => {
                let (atoms, exhausted) = lattice_atoms(mu / phi, phi, cfg);
                Engine::Lattice { atoms, exhausted }
            }
            PowerRegime::InverseGaussian => {
                let n = cfg.laguerre_nodes.clamp(2, crate::numcore::MAX_LAGUERRE_ORDER);
                Engine::Quadrature {
                    half: gauss_laguerre(n / 2).map_err(|e| PtwError::InvalidParameter(e.to_string()))?,
                    full: gauss_laguerre(n).map_err(|e| PtwError::InvalidParameter(e.to_string()))?,
                    // z = x / a absorbs the IG exponential tail exp(-z/(2μ²φ)) and the
                    // Poisson factor exp(-z) into the Laguerre weight.
                    scale: 1.0 + 1.0 / (2.0 * mu * mu * phi),
                    mc: MonteCarlo::new(mixing, cfg, stream),
                }
            }
            PowerRegime::CompoundPoisson => Engine::MonteCarlo(MonteCarlo::new(mixing, cfg, stream)),
            PowerRegime::PositiveStable => return Err(TweedieError::UnsupportedPower(params.p).into()),
        };
        Ok(Self { params, engine })
    }

    /// Evaluator that always integrates by Monte Carlo, whatever the power.
    /// Useful for checking the exact engines.
    pub fn monte_carlo(params: PtwParams, cfg: &PmfConfig, stream: u64) -> Result<Self, PtwError> {
        let mixing = params.mixing()?.ok_or_else(|| PtwError::InvalidParameter("φ = 0 has no mixing distribution to sample".into()))?;
        if !mixing.regime().can_sample() {
            return Err(TweedieError::UnsupportedPower(params.p).into());
        }
        Ok(Self {
            params,
            engine: Engine::MonteCarlo(MonteCarlo::new(mixing, cfg, stream)),
        })
    }

    pub fn params(&self) -> PtwParams {
        self.params
    }

    pub fn method(&self) -> PmfMethod {
        match &self.engine {
            Engine::Poisson { .. } | Engine::NegativeBinomial { .. } => PmfMethod::ClosedForm,
            Engine::Lattice { .. } => PmfMethod::ExactSum,
            Engine::Quadrature { .. } => PmfMethod::GaussLaguerre,
            Engine::MonteCarlo(_) => PmfMethod::MonteCarlo,
        }
    }

    pub fn pmf(&self, y: u64) -> Result<PmfEstimate, PtwError> {
        let exact = |value: f64, method| PmfEstimate {
            value,
            mc_stderr: 0.0,
            method,
            budget_exhausted: false,
        };
        Ok(match &self.engine {
            Engine::Poisson { mu } => exact(poisson_ln_pmf(y, *mu, ln_factorial(y)).exp(), PmfMethod::ClosedForm),
            Engine::NegativeBinomial { size, ln_q0, ln_q1 } => {
                let ln_p = ln_rising(*size, y) - ln_factorial(y) + size * ln_q0 + y as f64 * ln_q1;
                exact(ln_p.exp(), PmfMethod::ClosedForm)
            }
            Engine::Lattice { atoms, exhausted } => {
                let lf = ln_factorial(y);
                let value = atoms.iter().map(|&(z, w)| w * poisson_ln_pmf(y, z, lf).exp()).sum();
                PmfEstimate {
                    budget_exhausted: *exhausted,
                    ..exact(value, PmfMethod::ExactSum)
                }
            }
            Engine::Quadrature { half, full, scale, mc } => {
                let fine = self.quadrature(full, *scale, y)?;
                let coarse = self.quadrature(half, *scale, y)?;
                if fine > 0.0 && ((fine - coarse) / fine).abs() <= QUADRATURE_AGREEMENT_RTOL {
                    exact(fine, PmfMethod::GaussLaguerre)
                } else {
                    mc.estimate(y)?
                }
            }
            Engine::MonteCarlo(mc) => mc.estimate(y)?,
        })
    }

    /// `∫ Poisson(y; z) f_IG(z) dz` with `z = x / a`.
    fn quadrature(&self, rule: &QuadratureRule, a: f64, y: u64) -> Result<f64, PtwError> {
        let mixing = TweedieParams::new(self.params.mu, self.params.phi, self.params.p)?;
        let lf = ln_factorial(y);
        let mut total = 0.0;
        for (&x, &lw) in rule.nodes().iter().zip(rule.log_weights()) {
            let z = x / a;
            let ln_term = lw + x - a.ln() + poisson_ln_pmf(y, z, lf) + mixing.log_density(z)?;
            total += ln_term.exp();
        }
        Ok(total)
    }

    /// Per-draw Poisson probabilities when this evaluator is Monte Carlo
    /// based, `None` for deterministic methods.
    fn mc_terms(&self, y: u64) -> Result<Option<Vec<f64>>, PtwError> {
        match &self.engine {
            Engine::MonteCarlo(mc) => Ok(Some(mc.terms(y)?)),
            Engine::Quadrature { mc, .. } if self.pmf(y)?.method == PmfMethod::MonteCarlo => {
                Ok(Some(mc.terms(y)?))
            }
            _ => Ok(None),
        }
    }

    /// `∑ n_y log f(y)` over `(y, n_y)` pairs, with a delta-method standard
    /// error that accounts for the shared Monte Carlo draws.
    pub fn log_likelihood(&self, counts: &[(u64, usize)]) -> Result<(f64, f64), PtwError> {
        let mut value = 0.0;
        let mut per_draw: Option<Vec<f64>> = None;
        for &(y, n) in counts {
            let est = self.pmf(y)?;
            if !(est.value > 0.0) {
                return Err(PtwError::NonPositivePmf { y });
            }
            value += n as f64 * est.value.ln();
            if let Some(terms) = self.mc_terms(y)? {
                let acc = per_draw.get_or_insert_with(|| vec![0.0; terms.len()]);
                for (a, t) in acc.iter_mut().zip(&terms) {
                    *a += n as f64 * t / est.value;
                }
            }
        }
        let se = per_draw.map_or(0.0, |d| mean_and_stderr(&d).1);
        Ok((value, se))
    }
}

/// Atoms `(φk, Poisson(k; λ))` of the scaled-Poisson mixing law, expanded
/// outward from the mode until the neglected mass is below the tolerance.
fn lattice_atoms(rate: f64, phi: f64, cfg: &PmfConfig) -> (Vec<(f64, f64)>, bool) {
    let ln_w = |k: u64| poisson_ln_pmf(k, rate, ln_factorial(k)).exp();
    let mode = rate.floor() as u64;
    let mut atoms = vec![(phi * mode as f64, ln_w(mode))];
    let mut mass = atoms[0].1;
    let (mut lo, mut hi) = (mode, mode);
    let mut next_lo = if lo > 0 { ln_w(lo - 1) } else { 0.0 };
    let mut next_hi = ln_w(hi + 1);
    while 1.0 - mass > cfg.lattice_tail {
        if atoms.len() >= cfg.max_lattice_terms || (next_lo == 0.0 && next_hi == 0.0) {
            return (atoms, true);
        }
        if lo > 0 && next_lo >= next_hi {
            lo -= 1;
            atoms.push((phi * lo as f64, next_lo));
            mass += next_lo;
            next_lo = if lo > 0 { ln_w(lo - 1) } else { 0.0 };
        } else {
            hi += 1;
            atoms.push((phi * hi as f64, next_hi));
            mass += next_hi;
            next_hi = ln_w(hi + 1);
        }
    }
    (atoms, false)
}

/// Draw `n` Poisson-Tweedie counts: `Z ~ Tw_p(μ, φ)`, then `Y | Z ~ Poisson(Z)`.
pub fn ptw_sample(params: &PtwParams, n: usize, rng: &mut RngStream) -> Result<Vec<u64>, PtwError> {
    let mixing = params.mixing()?;
    if let Some(m) = &mixing {
        if !m.regime().can_sample() {
            return Err(TweedieError::UnsupportedPower(params.p).into());
        }
    }
    (0..n)
        .map(|_| {
            let z = match &mixing {
                Some(m) => m.sample_one(rng)?,
                None => params.mu,
            };
            Ok(crate::tweedie::poisson_draw(z, rng)? as u64)
        })
        .collect()
}

pub fn ptw_pmf(params: &PtwParams, y: u64, cfg: &PmfConfig) -> Result<PmfEstimate, PtwError> {
    PmfEvaluator::new(*params, cfg)?.pmf(y)
}

/// `P(Y = 0) = E[e^{-Z}]`, the mixing Laplace transform at one.
pub fn ptw_pzero(params: &PtwParams) -> Result<f64, PtwError> {
    Ok(match params.mixing()? {
        None => (-params.mu).exp(),
        Some(m) => m.laplace(1.0)?,
    })
}

/// `DI = Var(Y) / E(Y) = 1 + φ μ^{p-1}`. Defined at the moment level, so
/// negative `φ` is allowed as long as the variance stays positive.
pub fn dispersion_index(params: &PtwParams) -> Result<f64, PtwError> {
    let c = params.variance();
    if !(c > 0.0) {
        return Err(PtwError::VarianceNonPositive(c));
    }
    Ok(1.0 + params.phi * params.mu.powf(params.p - 1.0))
}

/// `ZI = 1 + log P(Y = 0) / E(Y)`; zero for the Poisson.
pub fn zero_inflation_index(params: &PtwParams) -> Result<f64, PtwError> {
    let ln_p0 = match params.mixing()? {
        None => -params.mu,
        Some(m) => m.log_laplace(1.0)?,
    };
    Ok(1.0 + ln_p0 / params.mu)
}

/// A ratio of two PMF values with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioEstimate {
    pub value: f64,
    pub mc_stderr: f64,
}

/// `HT(y) = P(Y = y + 1) / P(Y = y)` at a finite `y`.
pub fn heavy_tail_index(params: &PtwParams, y: u64, cfg: &PmfConfig) -> Result<RatioEstimate, PtwError> {
    PmfEvaluator::new(*params, cfg)?.heavy_tail(y)
}

impl PmfEvaluator {
    /// Consecutive-probability ratio at `y`, using common draws for both terms.
    pub fn heavy_tail(&self, y: u64) -> Result<RatioEstimate, PtwError> {
        let den = self.pmf(y)?;
        if !(den.value > 10.0 * den.mc_stderr) || den.value <= 0.0 {
            return Err(PtwError::UnreliableEstimate {
                y,
                value: den.value,
                stderr: den.mc_stderr,
            });
        }
        let num = self.pmf(y + 1)?;
        let ratio = num.value / den.value;
        let se = match (self.mc_terms(y)?, self.mc_terms(y + 1)?) {
            (Some(d), Some(n)) => {
                let lin: Vec<f64> = n.iter().zip(&d).map(|(a, b)| (a - ratio * b) / den.value).collect();
                mean_and_stderr(&lin).1
            }
            _ => 0.0,
        };
        Ok(RatioEstimate { value: ratio, mc_stderr: se })
    }
}

/// Log-likelihood of observed counts with a Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikelihood {
    pub value: f64,
    pub mc_stderr: f64,
    pub method: PmfMethod,
}

/// `∑ log f(y_i; μ_i, φ, p)`, evaluating each distinct parameter set once and
/// each distinct count once per set.
pub fn ptw_loglik(params: &[PtwParams], y: &[u64], cfg: &PmfConfig) -> Result<LogLikelihood, PtwError> {
    if params.len() != y.len() {
        return Err(PtwError::InvalidParameter(format!(
            "{} parameter sets for {} observations",
            params.len(),
            y.len()
        )));
    }
    let key = |q: &PtwParams| (q.mu.to_bits(), q.phi.to_bits(), q.p.to_bits());
    let mut groups: Vec<(PtwParams, Vec<(u64, usize)>)> = Vec::new();
    let mut index: HashMap<(u64, u64, u64), usize> = HashMap::new();
    for (q, &yi) in params.iter().zip(y) {
        let g = *index.entry(key(q)).or_insert_with(|| {
            groups.push((*q, Vec::new()));
            groups.len() - 1
        });
        let counts = &mut groups[g].1;
        match counts.iter_mut().find(|(v, _)| *v == yi) {
            Some(entry) => entry.1 += 1,
            None => counts.push((yi, 1)),
        }
    }
    let mut value = 0.0;
    let mut var = 0.0;
    let mut method = PmfMethod::ClosedForm;
    for (g, (q, counts)) in groups.iter().enumerate() {
        let eval = PmfEvaluator::with_stream(*q, cfg, g as u64)?;
        let (v, se) = eval.log_likelihood(counts)?;
        value += v;
        var += se * se;
        if se > 0.0 {
            method = PmfMethod::MonteCarlo;
        } else if method == PmfMethod::ClosedForm {
            method = eval.method();
        }
    }
    Ok(LogLikelihood {
        value,
        mc_stderr: var.sqrt(),
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn params(mu: f64, phi: f64, p: f64) -> PtwParams {
        PtwParams::new(mu, phi, p).unwrap()
    }

    fn poisson_pmf(y: u64, mu: f64) -> f64 {
        poisson_ln_pmf(y, mu, ln_factorial(y)).exp()
    }

    fn small_budget(seed: u64) -> PmfConfig {
        PmfConfig {
            mc_draws: 20_000,
            seed,
            ..PmfConfig::default()
        }
    }

    #[test]
    fn parameter_checks() {
        assert!(PtwParams::new(0.0, 1.0, 2.0).is_err());
        assert!(matches!(
            PtwParams::new(10.0, -1.5, 1.0),
            Err(PtwError::VarianceNonPositive(_))
        ));
        let under = params(10.0, -0.05, 1.0);
        assert!(matches!(ptw_pmf(&under, 3, &PmfConfig::default()), Err(PtwError::NoDistribution(_))));
        assert!(matches!(ptw_pzero(&under), Err(PtwError::NoDistribution(_))));
        let sub_one = params(10.0, 0.5, 0.5);
        assert!(matches!(ptw_sample(&sub_one, 1, &mut RngStream::new(0, 0)), Err(PtwError::NoDistribution(_))));
    }

    #[test]
    fn negative_binomial_zero_probability() {
        let q = params(10.0, 0.1, 2.0);
        let est = ptw_pmf(&q, 0, &PmfConfig::default()).unwrap();
        assert_eq!(est.method, PmfMethod::ClosedForm);
        assert!((est.value - 2f64.powi(-10)).abs() < 1e-15);
        assert!((ptw_pzero(&q).unwrap() - 2f64.powi(-10)).abs() < 1e-15);
    }

    #[test]
    fn vanishing_dispersion_is_poisson() {
        let target = poisson_pmf(10, 10.0);
        for p in [1.0, 1.5, 2.0, 3.0] {
            let est = ptw_pmf(&params(10.0, 1e-10, p), 10, &small_budget(1)).unwrap();
            assert!((est.value - target).abs() < 1e-6, "p={p}: {} vs {target}", est.value);
        }
    }

    #[test]
    fn inverse_gaussian_quadrature_matches_reference_integral() {
        for &(mu, phi) in &[(10.0, 0.01), (10.0, 0.19), (1.0, 1.0), (2.5, 0.4)] {
            let q = params(mu, phi, 3.0);
            let eval = PmfEvaluator::new(q, &PmfConfig::default()).unwrap();
            let mix = TweedieParams::new(mu, phi, 3.0).unwrap();
            for y in [0u64, 1, 5, 10, 30, 80] {
                let est = eval.pmf(y).unwrap();
                let lf = ln_factorial(y);
                let reference =
                    testutil::integrate_positive(|z| (poisson_ln_pmf(y, z, lf) + mix.log_density(z).unwrap()).exp());
                if est.method == PmfMethod::GaussLaguerre {
                    assert!(
                        (est.value - reference).abs() <= 1e-6 * reference + 1e-15,
                        "mu={mu} phi={phi} y={y}: {} vs {reference}",
                        est.value
                    );
                } else {
                    assert!((est.value - reference).abs() <= 4.0 * est.mc_stderr + 1e-12);
                }
            }
        }
    }

    #[test]
    fn neyman_type_a_lattice_matches_series() {
        // P(Y=y) = Σ_k Poisson(k; μ/φ) Poisson(y; φk), summed independently here
        let (mu, phi) = (10.0, 1.9);
        let q = params(mu, phi, 1.0);
        let eval = PmfEvaluator::new(q, &PmfConfig::default()).unwrap();
        for y in 0..40u64 {
            let reference: f64 = (0..200u64)
                .map(|k| poisson_pmf(k, mu / phi) * if k == 0 { (y == 0) as u8 as f64 } else { poisson_pmf(y, phi * k as f64) })
                .sum();
            let est = eval.pmf(y).unwrap();
            assert_eq!(est.method, PmfMethod::ExactSum);
            assert!((est.value - reference).abs() < 1e-12, "y={y}");
        }
    }

    #[test]
    fn compound_poisson_monte_carlo_matches_series_oracle() {
        let q = params(10.0, 1.0, 1.5);
        let eval = PmfEvaluator::new(q, &PmfConfig::default()).unwrap();
        for y in [0u64, 1, 3, 10, 20, 40] {
            let est = eval.pmf(y).unwrap();
            let exact = testutil::compound_poisson_pmf(y, 10.0, 1.0, 1.5);
            assert_eq!(est.method, PmfMethod::MonteCarlo);
            assert!((est.value - exact).abs() < 4.0 * est.mc_stderr, "y={y}: {} vs {exact}", est.value);
        }
    }

    #[test]
    fn pzero_matches_monte_carlo_pmf() {
        let q = params(10.0, 1.0, 1.5);
        let est = ptw_pmf(&q, 0, &PmfConfig::default()).unwrap();
        let p0 = ptw_pzero(&q).unwrap();
        assert!((est.value - p0).abs() < 3.0 * est.mc_stderr, "{} vs {p0}", est.value);
        assert!((ptw_pzero(&params(1e-8, 1.0, 1.5)).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn normalization_over_chebyshev_range() {
        for (i, &(mu, phi, p)) in [(10.0, 1.0, 1.5), (10.0, 0.5, 2.0), (10.0, 0.8, 1.0), (10.0, 0.04, 3.0)]
            .iter()
            .enumerate()
        {
            let q = params(mu, phi, p);
            let cfg = PmfConfig {
                mc_draws: 4_000,
                ..small_budget(i as u64)
            };
            let eval = PmfEvaluator::new(q, &cfg).unwrap();
            let y_max = (mu + (q.variance() / 1e-6).sqrt()).ceil() as u64;
            let (mut total, mut var) = (0.0, 0.0);
            for y in 0..=y_max {
                let e = eval.pmf(y).unwrap();
                total += e.value;
                var += e.mc_stderr * e.mc_stderr;
            }
            let eps = 1e-6 + 3.0 * var.sqrt() + 1e-12;
            assert!(total <= 1.0 + eps && total >= 1.0 - eps, "case {i}: {total}");
        }
    }

    #[test]
    fn moments_of_the_pmf() {
        let q = params(10.0, 0.3, 1.5);
        let eval = PmfEvaluator::new(q, &small_budget(3)).unwrap();
        let (mut mean, mut second) = (0.0, 0.0);
        let mut per_draw: Vec<f64> = Vec::new();
        for y in 0..400u64 {
            let v = eval.pmf(y).unwrap().value;
            mean += y as f64 * v;
            second += (y as f64).powi(2) * v;
            let terms = eval.mc_terms(y).unwrap().expect("Monte Carlo engine");
            per_draw.resize(terms.len(), 0.0);
            for (a, t) in per_draw.iter_mut().zip(&terms) {
                *a += y as f64 * t;
            }
        }
        let var = second - mean * mean;
        // Σ y·pmf(y) is a per-draw linear functional; its spread is the MC error
        let (m, se) = mean_and_stderr(&per_draw);
        assert!((mean - m).abs() < 1e-9);
        assert!((mean - 10.0).abs() < 3.0 * se, "{mean} ± {se}");
        assert!((var - q.variance()).abs() / q.variance() < 0.05, "{var}");
    }

    #[test]
    fn sample_moments() {
        let q = params(10.0, 0.1, 2.0);
        let y = ptw_sample(&q, 1_000_000, &mut RngStream::new(5, 0)).unwrap();
        let n = y.len() as f64;
        let m = y.iter().sum::<u64>() as f64 / n;
        let v = y.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((v / m - 2.0).abs() < 0.05, "DI {}", v / m);

        let q = params(10.0, 0.01, 3.0);
        let y = ptw_sample(&q, 1_000_000, &mut RngStream::new(6, 0)).unwrap();
        let m = y.iter().sum::<u64>() as f64 / n;
        let centered: Vec<f64> = y.iter().map(|&v| (v as f64 - m).powi(2)).collect();
        let v = centered.iter().sum::<f64>() / (n - 1.0);
        let m4 = y.iter().map(|&v| (v as f64 - m).powi(4)).sum::<f64>() / n;
        let se = ((m4 - v * v) / n).sqrt();
        assert!((v - 20.0).abs() < 4.0 * se, "var {v} se {se}");

        let q = params(10.0, 1e-8, 2.0);
        let y = ptw_sample(&q, 200_000, &mut RngStream::new(7, 0)).unwrap();
        let m = y.iter().sum::<u64>() as f64 / 200_000.0;
        let v = y.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 199_999.0;
        assert!((m - 10.0).abs() < 0.03 && (v - 10.0).abs() < 0.2);
    }

    #[test]
    fn dispersion_index_values() {
        assert!((dispersion_index(&params(10.0, 0.1, 2.0)).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(dispersion_index(&params(10.0, 0.0, 2.0)).unwrap(), 1.0);
        assert!((dispersion_index(&params(10.0, -0.5, 1.0)).unwrap() - 0.5).abs() < 1e-14);
        let bad = PtwParams { mu: 10.0, phi: -2.0, p: 1.0 };
        assert!(matches!(dispersion_index(&bad), Err(PtwError::VarianceNonPositive(_))));
    }

    #[test]
    fn zero_inflation_index_values() {
        assert!(zero_inflation_index(&params(10.0, 1e-12, 1.5)).unwrap().abs() < 1e-9);
        assert_eq!(zero_inflation_index(&params(10.0, 0.0, 1.5)).unwrap(), 0.0);
        let nb = zero_inflation_index(&params(10.0, 0.1, 2.0)).unwrap();
        assert!((nb - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!(zero_inflation_index(&params(10.0, 0.8, 1.1)).unwrap() > 0.0);
    }

    #[test]
    fn heavy_tail_poisson_limit() {
        let ht = heavy_tail_index(&params(10.0, 1e-10, 2.0), 100, &PmfConfig::default()).unwrap();
        assert!((ht.value - 10.0 / 101.0).abs() < 1e-6);
    }

    #[test]
    fn heavy_tail_negative_binomial_geometric() {
        let q = params(10.0, 0.5, 2.0);
        let ht = heavy_tail_index(&q, 3000, &PmfConfig::default()).unwrap();
        assert!((ht.value - 5.0 / 6.0).abs() < 1e-3, "{}", ht.value);
    }

    #[test]
    fn heavy_tail_inverse_gaussian_increases_below_one() {
        let q = params(10.0, 0.19, 3.0);
        let eval = PmfEvaluator::new(q, &PmfConfig::default()).unwrap();
        let ys = [10u64, 20, 40, 60, 80, 100];
        let ht: Vec<f64> = ys.iter().map(|&y| eval.heavy_tail(y).unwrap().value).collect();
        assert!(ht.windows(2).all(|w| w[0] < w[1]), "{ht:?}");
        assert!(ht.iter().all(|&h| h < 1.0));
        let nb = heavy_tail_index(&params(10.0, 1.9, 2.0), 100, &PmfConfig::default()).unwrap();
        assert!(ht[5] > nb.value);
    }

    #[test]
    fn heavy_tail_refuses_noisy_denominator() {
        let q = params(10.0, 1.0, 1.5);
        let cfg = small_budget(2);
        let r = heavy_tail_index(&q, 400, &cfg);
        assert!(matches!(r, Err(PtwError::UnreliableEstimate { .. })), "{r:?} {:?}", ptw_pmf(&q, 400, &cfg));
    }

    #[test]
    fn loglik_single_negative_binomial_term() {
        let q = params(4.0, 0.5, 2.0);
        let ll = ptw_loglik(&[q], &[7], &PmfConfig::default()).unwrap();
        let pmf = ptw_pmf(&q, 7, &PmfConfig::default()).unwrap().value;
        assert_eq!(ll.value, pmf.ln());
        assert_eq!(ll.mc_stderr, 0.0);
    }

    #[test]
    fn loglik_standard_error_tracks_oracle() {
        let q = params(0.4, 0.25, 1.085);
        let y: Vec<u64> = (0..200).map(|i| [0, 0, 0, 1, 0, 2, 0, 1, 3, 0][i % 10]).collect();
        let ps = vec![q; y.len()];
        let ll = ptw_loglik(&ps, &y, &PmfConfig::default()).unwrap();
        let exact: f64 = y.iter().map(|&v| testutil::compound_poisson_pmf(v, 0.4, 0.25, 1.085).ln()).sum();
        assert_eq!(ll.method, PmfMethod::MonteCarlo);
        assert!(ll.mc_stderr > 0.0);
        assert!((ll.value - exact).abs() < 4.0 * ll.mc_stderr, "{} vs {exact} ± {}", ll.value, ll.mc_stderr);
    }

    #[test]
    fn di_increases_with_mean_zi_regimes() {
        for p in [1.1, 2.0, 3.0] {
            let di: Vec<f64> = (1..50).map(|k| dispersion_index(&params(k as f64, 0.3, p)).unwrap()).collect();
            assert!(di.windows(2).all(|w| w[1] > w[0]));
        }
        // p = 1.1 puts its overdispersion into zeros, p = 3 into the tail (DI = 5 at μ = 10)
        let zi_low = zero_inflation_index(&params(10.0, 3.2, 1.1)).unwrap();
        let zi_high = zero_inflation_index(&params(10.0, 0.04, 3.0)).unwrap();
        assert!(zi_low > zi_high + 0.1, "{zi_low} {zi_high}");
        let ht_low = heavy_tail_index(&params(10.0, 3.2, 1.1), 40, &PmfConfig::default()).unwrap();
        let ht_high = heavy_tail_index(&params(10.0, 0.04, 3.0), 40, &PmfConfig::default()).unwrap();
        assert!(ht_high.value > ht_low.value + 5.0 * (ht_low.mc_stderr + ht_high.mc_stderr));
    }
}
