//! Fitting by the modified chaser algorithm.
//!
//! Each iteration takes a full Newton step for β on the quasi-score, then a
//! damped Newton step for `λ = (φ, p)` on the Pearson estimating function,
//! evaluated at the new β:
//!
//! ```text
//! β ← β − S_β⁻¹ ψ_β
//! λ ← λ − α S_λ⁻¹ ψ_λ
//! ```
//!
//! Steps that would make some variance `C_i` non-positive are halved.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estfun::{godambe_covariance, EstFunError, EstFunState, PtwModel, Theta};
use crate::numcore::{solve_linear, DenseMatrix, NumError};

/// Lower bound on the power parameter in free-power fits.
pub const P_MIN: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;
/// Largest change of the power parameter accepted in one iteration. The
/// `(φ, p)` Newton step is shrunk as a whole to respect it, because φ and p
/// are nearly collinear when `φμ^p` varies little over the data.
pub const MAX_POWER_STEP: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("too few observations: {n} for {params} parameters")]
    TooFewObservations { n: usize, params: usize },
    #[error("no feasible step after {MAX_HALVINGS} halvings at iteration {iteration}")]
    BoundaryTrap { iteration: usize },
    #[error(transparent)]
    EstFun(#[from] EstFunError),
}

impl From<NumError> for FitError {
    fn from(e: NumError) -> Self {
        FitError::EstFun(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PowerMode {
    Free,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiSign {
    Any,
    NonNegative,
}

/// How the cross-sensitivity block `S_λβ` enters the sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceForm {
    /// `S_λβ` set to zero: the λ block is `S_λ⁻¹ Ṽ_λ S_λ⁻ᵀ`.
    Decoupled,
    /// The full block-triangular `S`.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub power_mode: PowerMode,
    pub phi_sign: PhiSign,
    /// Hold φ at this value and skip its update.
    pub fixed_phi: Option<f64>,
    pub covariance_form: CovarianceForm,
    pub start: Option<Theta>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            max_iter: 200,
            tol: 1e-6,
            power_mode: PowerMode::Free,
            phi_sign: PhiSign::Any,
            fixed_phi: None,
            covariance_form: CovarianceForm::Decoupled,
            start: None,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), FitError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(FitError::InvalidConfig(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(FitError::InvalidConfig(format!("tol = {} must be positive", self.tol)));
        }
        if let PowerMode::Fixed(p) = self.power_mode {
            if !(p.is_finite() && p > 0.0) {
                return Err(FitError::InvalidConfig(format!("fixed power {p} must be positive")));
            }
        }
        if let Some(phi) = self.fixed_phi {
            if !phi.is_finite() || (self.phi_sign == PhiSign::NonNegative && phi < 0.0) {
                return Err(FitError::InvalidConfig(format!("fixed φ = {phi} is not admissible")));
            }
        }
        Ok(())
    }

    fn estimates_phi(&self) -> bool {
        self.fixed_phi.is_none()
    }

    fn estimates_power(&self) -> bool {
        self.power_mode == PowerMode::Free
    }
}

/// Which entry of `θ = (β, φ, p)` a row of the covariance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameter {
    Beta(usize),
    Phi,
    Power,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitWarning {
    /// The power parameter is not identified from these data; compare
    /// fixed-power fits at p = 1, 2, 3 instead.
    FlatPower,
    /// The λ step hit the variance boundary and was shortened.
    StepHalved { iteration: usize, halvings: usize },
    MaxIterations(usize),
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitWarning::FlatPower => write!(
                f,
                "dispersion is indistinguishable from zero and the power parameter is flat; refit with fixed p in {{1, 2, 3}}"
            ),
            FitWarning::StepHalved { iteration, halvings } => {
                write!(f, "dispersion step halved {halvings} times at iteration {iteration}")
            }
            FitWarning::MaxIterations(n) => write!(f, "no convergence within {n} iterations"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: Theta,
    pub score_norm: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// Sandwich covariance over `parameters`.
    pub covariance: DenseMatrix,
    pub parameters: Vec<Parameter>,
    pub std_errors: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub warnings: Vec<FitWarning>,
    /// `ψ` at `θ̂` over `parameters`.
    pub score: Vec<f64>,
}

impl FitResult {
    pub fn std_error(&self, param: Parameter) -> Option<f64> {
        self.parameters.iter().position(|&p| p == param).map(|i| self.std_errors[i])
    }
}

/// Poisson log-likelihood kernel `∑ y η - μ`, used to damp the start-up
/// Newton iterations.
fn poisson_kernel(model: &PtwModel, beta: &[f64]) -> Result<f64, FitError> {
    let mu = model.mean(beta)?;
    Ok(model.y().iter().zip(&mu).map(|(&y, m)| y as f64 * m.ln() - m).sum())
}

/// Poisson GLM fit: Newton iterations on the quasi-score with `φ = 0`, started
/// from least squares on `log(y + 0.5) - offset`.
pub fn poisson_fit(model: &PtwModel) -> Result<Vec<f64>, FitError> {
    model.check_rank()?;
    let x = model.x();
    let xt = x.transpose();
    let z: Vec<f64> = model
        .y()
        .iter()
        .zip(model.offset())
        .map(|(&y, o)| (y as f64 + 0.5).ln() - o)
        .collect();
    let mut beta = solve_linear(&xt.matmul(x)?, &xt.matvec(&z)?)?;
    let mut kernel = poisson_kernel(model, &beta)?;
    for _ in 0..100 {
        let state = EstFunState::new(model, &Theta::new(beta.clone(), 0.0, 1.0))?;
        let score = state.quasi_score(model);
        let step = solve_linear(&state.sensitivity_beta(model), &score)?;
        let mut t = 1.0;
        let mut trial: Vec<f64>;
        loop {
            trial = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            let k = poisson_kernel(model, &trial)?;
            if k.is_finite() && k >= kernel - 1e-12 * kernel.abs() || t < 1e-8 {
                kernel = k;
                break;
            }
            t *= 0.5;
        }
        let change = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        beta = trial;
        if change < 1e-12 * (1.0 + beta.iter().map(|b| b.abs()).fold(0.0, f64::max)) {
            break;
        }
    }
    Ok(beta)
}

/// Powers at which the profile start evaluates the power score.
const PROFILE_GRID: [f64; 5] = [1.1, 1.5, 2.0, 2.5, 3.0];
const PROFILE_ITERATIONS: usize = 50;

/// Method-of-moments φ at power `p`, kept inside `C_i > 0.1 μ_i`.
fn moment_phi(model: &PtwModel, mu: &[f64], p: f64, config: &FitConfig) -> f64 {
    let num: f64 = model
        .y()
        .iter()
        .zip(mu)
        .map(|(&y, m)| (y as f64 - m).powi(2) - m)
        .sum();
    let den: f64 = mu.iter().map(|m| m.powf(p)).sum();
    let floor = -0.899 * mu.iter().map(|m| m.powf(1.0 - p)).fold(f64::INFINITY, f64::min);
    let phi = (num / den).max(floor);
    if config.phi_sign == PhiSign::NonNegative {
        phi.max(0.0)
    } else {
        phi
    }
}

/// Solve the φ equation at fixed β and p, then return `(φ, ψ_p)`.
fn profile_point(model: &PtwModel, beta: &[f64], mu: &[f64], p: f64, config: &FitConfig) -> Option<(f64, f64)> {
    let fixed_p = FitConfig {
        power_mode: PowerMode::Fixed(p),
        alpha: 1.0,
        ..config.clone()
    };
    let mut theta = Theta::new(beta.to_vec(), moment_phi(model, mu, p, config), p);
    for _ in 0..PROFILE_ITERATIONS {
        let state = EstFunState::new(model, &theta).ok()?;
        let delta = lambda_direction(&state, &fixed_p)?;
        let (next, _) = step_control(&theta, delta, model, &fixed_p).ok()?;
        let change = (next.phi - theta.phi).abs();
        theta = next;
        if change <= 1e-10 * (1.0 + theta.phi.abs()) {
            break;
        }
    }
    let score = EstFunState::new(model, &theta).ok()?.pearson_score();
    score[1].is_finite().then_some((theta.phi, score[1]))
}

/// Starting values: Poisson β and a method-of-moments φ at `p = 1.5` (or the
/// fixed power). In free-power fits p and φ are then moved to where the
/// profiled power score changes sign over a coarse grid, falling back to
/// the grid point with the smallest score. Underdispersed data keep the
/// moment start.
pub fn initialize(model: &PtwModel, config: &FitConfig) -> Result<Theta, FitError> {
    let beta = poisson_fit(model)?;
    let p = match config.power_mode {
        PowerMode::Free => 1.5,
        PowerMode::Fixed(p) => p,
    };
    if let Some(phi) = config.fixed_phi {
        return Ok(Theta::new(beta, phi, p));
    }
    let mu = model.mean(&beta)?;
    let start = Theta::new(beta.clone(), moment_phi(model, &mu, p, config), p);
    // underdispersion confines φ to a narrow band at large p, so the profile is uninformative
    if !config.estimates_power() || start.phi <= 0.0 {
        return Ok(start);
    }
    let profile: Vec<(f64, f64, f64)> = PROFILE_GRID
        .iter()
        .filter_map(|&p| profile_point(model, &beta, &mu, p, config).map(|(phi, g)| (p, phi, g)))
        .collect();
    let crossing = profile.windows(2).find(|w| w[0].2 * w[1].2 <= 0.0);
    let (p, phi) = match crossing {
        Some(w) => {
            let (a, b) = (w[0], w[1]);
            let t = if a.2 == b.2 { 0.5 } else { a.2 / (a.2 - b.2) };
            (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
        }
        None => match profile.iter().min_by(|a, b| a.2.abs().total_cmp(&b.2.abs())) {
            Some(&(p, phi, _)) => (p, phi),
            None => return Ok(start),
        },
    };
    let theta = Theta::new(beta, phi, p);
    Ok(if feasible(model, &theta) { theta } else { start })
}

fn feasible(model: &PtwModel, theta: &Theta) -> bool {
    EstFunState::new(model, theta).is_ok()
}

/// Apply a proposed `(Δφ, Δp)`: shrink it so that `|Δp| ≤ MAX_POWER_STEP`,
/// enforce the sign and power constraints, then halve the step until every
/// variance is positive. Returns the accepted θ and the number of halvings
/// used.
pub fn step_control(
    theta: &Theta,
    delta: [f64; 2],
    model: &PtwModel,
    config: &FitConfig,
) -> Result<(Theta, usize), FitError> {
    let cap = if delta[1].abs() > MAX_POWER_STEP { MAX_POWER_STEP / delta[1].abs() } else { 1.0 };
    let delta = [cap * delta[0], cap * delta[1]];
    let propose = |t: f64| {
        let mut next = theta.clone();
        next.phi += t * delta[0];
        next.p += t * delta[1];
        if config.estimates_power() {
            next.p = next.p.max(P_MIN);
        }
        if config.phi_sign == PhiSign::NonNegative {
            next.phi = next.phi.max(0.0);
        }
        next
    };
    let mut t = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let next = propose(t);
        if feasible(model, &next) {
            return Ok((next, halvings));
        }
        t *= 0.5;
    }
    Err(FitError::BoundaryTrap { iteration: 0 })
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn active_parameters(q: usize, config: &FitConfig) -> Vec<Parameter> {
    let mut params: Vec<Parameter> = (0..q).map(Parameter::Beta).collect();
    if config.estimates_phi() {
        params.push(Parameter::Phi);
    }
    if config.estimates_power() {
        params.push(Parameter::Power);
    }
    params
}

fn index_of(param: Parameter, q: usize) -> usize {
    match param {
        Parameter::Beta(k) => k,
        Parameter::Phi => q,
        Parameter::Power => q + 1,
    }
}

/// Estimating functions over the active parameters at `theta`.
fn active_score(state: &EstFunState, model: &PtwModel, config: &FitConfig) -> Vec<f64> {
    let mut score = state.quasi_score(model);
    let [s_phi, s_p] = state.pearson_score();
    if config.estimates_phi() {
        score.push(s_phi);
    }
    if config.estimates_power() {
        score.push(s_p);
    }
    score
}

/// Sandwich covariance over the active parameters.
pub fn fit_covariance(
    model: &PtwModel,
    theta: &Theta,
    config: &FitConfig,
) -> Result<(Vec<Parameter>, DenseMatrix), FitError> {
    let q = model.q();
    let state = EstFunState::new(model, theta)?;
    let mut s = state.sensitivity(model);
    if config.covariance_form == CovarianceForm::Decoupled {
        for j in q..q + 2 {
            for k in 0..q {
                s[(j, k)] = 0.0;
            }
        }
    }
    let v = state.variability(model);
    let params = active_parameters(q, config);
    let idx: Vec<usize> = params.iter().map(|&p| index_of(p, q)).collect();
    let cov = godambe_covariance(&s.select(&idx), &v.select(&idx))?;
    Ok((params, cov))
}

/// One λ-step direction `-α S_λ⁻¹ ψ_λ` restricted to the free components.
/// Returns `None` when the dispersion sensitivity is singular.
/// Newton direction for β. Only `S_β` and `ψ_β` enter: the β-row of the
/// sensitivity has no λ block.
fn beta_direction(state: &EstFunState, model: &PtwModel) -> Result<Vec<f64>, FitError> {
    Ok(solve_linear(&state.sensitivity_beta(model), &state.quasi_score(model))?)
}

fn lambda_direction(state: &EstFunState, config: &FitConfig) -> Option<[f64; 2]> {
    let score = state.pearson_score();
    let s = state.sensitivity_lambda();
    let a = config.alpha;
    match (config.estimates_phi(), config.estimates_power()) {
        (false, false) => Some([0.0, 0.0]),
        (true, false) => (s[(0, 0)] != 0.0).then(|| [-a * score[0] / s[(0, 0)], 0.0]),
        (false, true) => (s[(1, 1)] != 0.0).then(|| [0.0, -a * score[1] / s[(1, 1)]]),
        (true, true) => solve_linear(&s, &score).ok().map(|d| [-a * d[0], -a * d[1]]),
    }
}

pub fn fit(model: &PtwModel, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate()?;
    model.check_rank()?;
    let q = model.q();
    let n_params = active_parameters(q, config).len();
    if config.estimates_power() && model.n() <= n_params {
        return Err(FitError::TooFewObservations { n: model.n(), params: n_params });
    }
    let mut theta = match &config.start {
        Some(t) => t.clone(),
        None => initialize(model, config)?,
    };
    if let Some(phi) = config.fixed_phi {
        theta.phi = phi;
    }
    if let PowerMode::Fixed(p) = config.power_mode {
        theta.p = p;
    }
    EstFunState::new(model, &theta)?;

    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut power_stalled = false;
    let mut best: Option<(f64, Theta)> = None;
    let mut iterations = 0;

    for iteration in 1..=config.max_iter {
        iterations = iteration;
        let state = EstFunState::new(model, &theta)?;
        let db = beta_direction(&state, model)?;
        let mut next = theta.clone();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            next.beta = theta.beta.iter().zip(&db).map(|(b, d)| b - t * d).collect();
            if feasible(model, &next) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(FitError::BoundaryTrap { iteration });
        }

        let state = EstFunState::new(model, &next)?;
        let delta = match lambda_direction(&state, config) {
            Some(d) => d,
            None => {
                power_stalled = true;
                let s = state.sensitivity_lambda();
                let score = state.pearson_score();
                if config.estimates_phi() && s[(0, 0)] != 0.0 {
                    [-config.alpha * score[0] / s[(0, 0)], 0.0]
                } else {
                    [0.0, 0.0]
                }
            }
        };
        let (stepped, halvings) = step_control(&next, delta, model, config).map_err(|e| match e {
            FitError::BoundaryTrap { .. } => FitError::BoundaryTrap { iteration },
            other => other,
        })?;
        if halvings > 0 {
            warnings.push(FitWarning::StepHalved { iteration, halvings });
        }
        let step: Vec<f64> = stepped.to_vec().iter().zip(theta.to_vec()).map(|(a, b)| a - b).collect();
        theta = stepped;

        let state = EstFunState::new(model, &theta)?;
        let score_norm = sup_norm(&active_score(&state, model, config));
        let step_norm = sup_norm(&step);
        trace.push(IterationRecord {
            iteration,
            theta: theta.clone(),
            score_norm,
            step_norm,
        });
        if config.estimates_power() && step.last().is_some_and(|d| d.abs() < config.tol) && score_norm >= config.tol {
            power_stalled = true;
        }
        if best.as_ref().is_none_or(|(s, _)| score_norm < *s) {
            best = Some((score_norm, theta.clone()));
        }
        if score_norm < config.tol && step_norm < config.tol {
            converged = true;
            break;
        }
    }

    if !converged {
        warnings.push(FitWarning::MaxIterations(config.max_iter));
        if let Some((_, t)) = best {
            theta = t;
        }
    }
    let state = EstFunState::new(model, &theta)?;
    let score = active_score(&state, model, config);
    let (parameters, covariance) = fit_covariance(model, &theta, config)?;
    let std_errors: Vec<f64> = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();

    if config.estimates_power() && config.estimates_phi() {
        let se_phi = std_errors[q];
        let phi_near_zero = theta.phi.abs() <= 1.96 * se_phi;
        if phi_near_zero && (power_stalled || !converged) {
            warnings.push(FitWarning::FlatPower);
        }
    }

    Ok(FitResult {
        theta_hat: theta,
        covariance,
        parameters,
        std_errors,
        iterations,
        trace,
        converged,
        warnings,
        score,
    })
}
