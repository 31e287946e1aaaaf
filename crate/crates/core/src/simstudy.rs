//! Replicated simulate-and-fit studies: bias, standard errors and Wald
//! coverage of the estimating-function estimators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaser::{fit, FitConfig};
use crate::estfun::{PtwModel, Theta};
use crate::numcore::{DenseMatrix, RngStream};
use crate::ptwdist::{ptw_sample, PtwParams};
use crate::refdists::{moment_map, unit_grid, MomentDesign, RefDistError, RefFamily};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudyError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("no results at the baseline sample size {0}")]
    MissingBaseline(usize),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    RefDist(#[from] RefDistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Generator {
    /// `μ_i = exp{log 10 + 0.8 x_1i − x_2i}` with Poisson-Tweedie counts.
    PoissonTweedie { p: f64, phi: f64 },
    /// `λ_i = exp{λ₀ + λ₁ x_1i}` with COM-Poisson counts.
    ComPoisson { lambda0: f64, lambda1: f64, nu: f64 },
    /// `λ_i = exp{λ₀ + λ₁ x_1i}` with Gamma-Count counts.
    GammaCount { lambda0: f64, lambda1: f64, nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyScale {
    Desk,
    Paper,
}

impl StudyScale {
    pub fn sample_sizes(self) -> Vec<usize> {
        match self {
            StudyScale::Desk => vec![100, 500],
            StudyScale::Paper => vec![100, 250, 500, 1000],
        }
    }

    pub fn replicates(self) -> usize {
        match self {
            StudyScale::Desk => 200,
            StudyScale::Paper => 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub generator: Generator,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    /// `(β, φ, p)` the estimates are compared against.
    pub truth: Theta,
    pub fit_config: FitConfig,
}

const BETA_41: [f64; 3] = [std::f64::consts::LN_10, 0.8, -1.0];

impl Scenario {
    /// Overdispersed scenario with the three-coefficient predictor.
    pub fn poisson_tweedie(name: &str, p: f64, phi: f64, scale: StudyScale) -> Self {
        Self {
            name: name.to_string(),
            generator: Generator::PoissonTweedie { p, phi },
            sample_sizes: scale.sample_sizes(),
            replicates: scale.replicates(),
            truth: Theta::new(BETA_41.to_vec(), phi, p),
            fit_config: FitConfig::default(),
        }
    }

    /// Underdispersed scenario; the truth is the moment mapping of the
    /// generator's parameters.
    pub fn reference(
        name: &str,
        family: RefFamily,
        lambda0: f64,
        lambda1: f64,
        nu: f64,
        scale: StudyScale,
        seed: u64,
    ) -> Result<Self, StudyError> {
        let map = moment_map(family, lambda0, lambda1, nu, &MomentDesign::default(), &RngStream::new(seed, 0))?;
        let generator = match family {
            RefFamily::ComPoisson => Generator::ComPoisson { lambda0, lambda1, nu },
            RefFamily::GammaCount => Generator::GammaCount { lambda0, lambda1, nu },
        };
        Ok(Self {
            name: name.to_string(),
            generator,
            sample_sizes: scale.sample_sizes(),
            replicates: scale.replicates(),
            truth: Theta::new(vec![map.beta0, map.beta1], map.phi, map.p),
            fit_config: FitConfig::default(),
        })
    }

    fn validate(&self) -> Result<(), StudyError> {
        if self.replicates < 50 {
            return Err(StudyError::InvalidScenario(format!("{} replicates < 50", self.replicates)));
        }
        let q = self.truth.beta.len();
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n <= q + 2) {
            return Err(StudyError::InvalidScenario(format!("sample size {n} too small for {q} coefficients")));
        }
        if self.sample_sizes.is_empty() {
            return Err(StudyError::InvalidScenario("no sample sizes".into()));
        }
        Ok(())
    }

    /// Design matrix and one simulated response vector of size `n`.
    pub fn simulate(&self, n: usize, rng: &mut RngStream) -> Result<(DenseMatrix, Vec<u64>), String> {
        let x1 = unit_grid(n);
        match self.generator {
            Generator::PoissonTweedie { p, phi } => {
                // x₂ alternates between its two levels
                let rows: Vec<Vec<f64>> = x1.iter().enumerate().map(|(i, &x)| vec![1.0, x, (i % 2) as f64]).collect();
                let mut y = Vec::with_capacity(n);
                for r in &rows {
                    let mu = (BETA_41[0] + BETA_41[1] * r[1] + BETA_41[2] * r[2]).exp();
                    let params = PtwParams::new(mu, phi, p).map_err(|e| e.to_string())?;
                    y.push(ptw_sample(&params, 1, rng).map_err(|e| e.to_string())?[0]);
                }
                Ok((DenseMatrix::from_rows(&rows).map_err(|e| e.to_string())?, y))
            }
            Generator::ComPoisson { lambda0, lambda1, nu } | Generator::GammaCount { lambda0, lambda1, nu } => {
                let family = match self.generator {
                    Generator::ComPoisson { .. } => RefFamily::ComPoisson,
                    _ => RefFamily::GammaCount,
                };
                let rows: Vec<Vec<f64>> = x1.iter().map(|&x| vec![1.0, x]).collect();
                let mut y = Vec::with_capacity(n);
                for &x in &x1 {
                    let lambda = (lambda0 + lambda1 * x).exp();
                    y.push(family.sample(lambda, nu, 1, rng).map_err(|e| e.to_string())?[0]);
                }
                Ok((DenseMatrix::from_rows(&rows).map_err(|e| e.to_string())?, y))
            }
        }
    }
}

/// Named scenarios. Over-dispersed names are `ptw-p{power}-di{index}` with
/// the dispersion chosen so that the dispersion index equals `index` at
/// `μ = 10`; underdispersed names are `cmp-nu{ν}` and `gc-nu{ν}`.
pub fn scenario_catalog(name: &str, scale: StudyScale, seed: u64) -> Result<Scenario, StudyError> {
    if let Some(rest) = name.strip_prefix("ptw-p") {
        let (p_str, di_str) = rest
            .split_once("-di")
            .ok_or_else(|| StudyError::UnknownScenario(name.to_string()))?;
        let p: f64 = p_str.parse().map_err(|_| StudyError::UnknownScenario(name.to_string()))?;
        let di: f64 = di_str.parse().map_err(|_| StudyError::UnknownScenario(name.to_string()))?;
        let phi = match (p_str, di_str) {
            // the standard grid, with dispersion rounded to the stated digits
            ("1.1", "2") => 0.8,
            ("1.1", "5") => 3.2,
            ("1.1", "10") => 7.2,
            ("1.1", "20") => 15.0,
            ("2", "2") => 0.1,
            ("2", "5") => 0.4,
            ("2", "10") => 0.9,
            ("2", "20") => 1.9,
            ("3", "2") => 0.01,
            ("3", "5") => 0.04,
            ("3", "10") => 0.09,
            ("3", "20") => 0.19,
            _ if p >= 1.0 && di > 1.0 => (di - 1.0) / 10f64.powf(p - 1.0),
            _ => return Err(StudyError::UnknownScenario(name.to_string())),
        };
        return Ok(Scenario::poisson_tweedie(name, p, phi, scale));
    }
    let reference = |prefix: &str, family, l0, l1| -> Option<Result<Scenario, StudyError>> {
        let nu: f64 = name.strip_prefix(prefix)?.parse().ok()?;
        Some(Scenario::reference(name, family, l0, l1, nu, scale, seed))
    };
    reference("cmp-nu", RefFamily::ComPoisson, 8.0, 4.0)
        .or_else(|| reference("gc-nu", RefFamily::GammaCount, 2.0, 1.0))
        .unwrap_or_else(|| Err(StudyError::UnknownScenario(name.to_string())))
}

/// Names in the full scenario grid.
pub fn full_scenarios() -> Vec<String> {
    let mut names = Vec::new();
    for p in ["1.1", "2", "3"] {
        for di in ["2", "5", "10", "20"] {
            names.push(format!("ptw-p{p}-di{di}"));
        }
    }
    for fam in ["cmp", "gc"] {
        for nu in ["2", "4", "6", "8"] {
            names.push(format!("{fam}-nu{nu}"));
        }
    }
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    pub mean_std_error: f64,
    pub empirical_std_error: f64,
    /// Monte Carlo standard error of `mean_bias`.
    pub bias_mc_stderr: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeSummary {
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub parameters: Vec<ParameterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub scenario: String,
    pub seed: u64,
    pub rows: Vec<SampleSizeSummary>,
}

impl StudyResult {
    pub fn row(&self, n: usize) -> Option<&SampleSizeSummary> {
        self.rows.iter().find(|r| r.n == n)
    }
}

pub fn parameter_names(q: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..q).map(|k| format!("beta{k}")).collect();
    names.push("phi".into());
    names.push("p".into());
    names
}

/// Worker count from `PTW_THREADS`, defaulting to the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("PTW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_study(scenario: &Scenario, seed: u64) -> Result<StudyResult, StudyError> {
    run_study_with_threads(scenario, seed, worker_count())
}

type Replicate = Option<(Vec<f64>, Vec<f64>)>;

fn replicate(scenario: &Scenario, n: usize, rng: &mut RngStream) -> Replicate {
    let (x, y) = scenario.simulate(n, rng).ok()?;
    let model = PtwModel::new(x, y, None).ok()?;
    let res = fit(&model, &scenario.fit_config).ok()?;
    if !res.converged || res.std_errors.len() != scenario.truth.beta.len() + 2 {
        return None;
    }
    if res.std_errors.iter().any(|s| !s.is_finite()) {
        return None;
    }
    Some((res.theta_hat.to_vec(), res.std_errors))
}

/// As [`run_study`] with an explicit worker count. Replicate `r` at sample
/// size index `k` always draws from substream `r` of stream `k`, and results
/// are reduced in replicate order, so the output does not depend on
/// `threads`.
pub fn run_study_with_threads(scenario: &Scenario, seed: u64, threads: usize) -> Result<StudyResult, StudyError> {
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| StudyError::ThreadPool(e.to_string()))?;
    let truth = scenario.truth.to_vec();
    let names = parameter_names(scenario.truth.beta.len());
    let mut rows = Vec::new();
    for (k, &n) in scenario.sample_sizes.iter().enumerate() {
        let parent = RngStream::new(seed, k as u64);
        let fits: Vec<Replicate> = pool.install(|| {
            (0..scenario.replicates)
                .into_par_iter()
                .map(|r| replicate(scenario, n, &mut parent.substream(r as u64)))
                .collect()
        });
        let ok: Vec<&(Vec<f64>, Vec<f64>)> = fits.iter().flatten().collect();
        let m = ok.len() as f64;
        let parameters = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let est: Vec<f64> = ok.iter().map(|(t, _)| t[j]).collect();
                let se: Vec<f64> = ok.iter().map(|(_, s)| s[j]).collect();
                let mean = est.iter().sum::<f64>() / m;
                let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
                let hits = est.iter().zip(&se).filter(|(e, s)| (*e - truth[j]).abs() <= 1.959_963_984_540_054 * *s).count();
                ParameterSummary {
                    parameter: name.clone(),
                    truth: truth[j],
                    mean_estimate: mean,
                    mean_bias: mean - truth[j],
                    mean_std_error: se.iter().sum::<f64>() / m,
                    empirical_std_error: sd,
                    bias_mc_stderr: sd / m.sqrt(),
                    coverage: hits as f64 / m,
                }
            })
            .collect();
        rows.push(SampleSizeSummary {
            n,
            replicates: scenario.replicates,
            failures: scenario.replicates - ok.len(),
            parameters,
        });
    }
    Ok(StudyResult {
        scenario: scenario.name.clone(),
        seed,
        rows,
    })
}

/// Bias and `bias ± s.e.` limits divided by the average standard error at
/// `n = 100`, per sample size and parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedRow {
    pub n: usize,
    pub parameter: String,
    pub bias: f64,
    pub lower: f64,
    pub upper: f64,
    pub std_error: f64,
}

pub const BASELINE_N: usize = 100;

pub fn standardized_bias_table(result: &StudyResult) -> Result<Vec<StandardizedRow>, StudyError> {
    let base = result.row(BASELINE_N).ok_or(StudyError::MissingBaseline(BASELINE_N))?;
    let mut table = Vec::new();
    for row in &result.rows {
        for (p, b) in row.parameters.iter().zip(&base.parameters) {
            let unit = b.mean_std_error;
            table.push(StandardizedRow {
                n: row.n,
                parameter: p.parameter.clone(),
                bias: p.mean_bias / unit,
                lower: (p.mean_bias - p.mean_std_error) / unit,
                upper: (p.mean_bias + p.mean_std_error) / unit,
                std_error: p.mean_std_error / unit,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(n: usize, bias: f64, se: f64) -> SampleSizeSummary {
        SampleSizeSummary {
            n,
            replicates: 100,
            failures: 0,
            parameters: vec![ParameterSummary {
                parameter: "beta0".into(),
                truth: 1.0,
                mean_estimate: 1.0 + bias,
                mean_bias: bias,
                mean_std_error: se,
                empirical_std_error: se,
                bias_mc_stderr: se / 10.0,
                coverage: 0.95,
            }],
        }
    }

    #[test]
    fn standardization() {
        let result = StudyResult {
            scenario: "mock".into(),
            seed: 0,
            rows: vec![summary(100, 0.0, 0.4), summary(400, 0.0, 0.2)],
        };
        let t = standardized_bias_table(&result).unwrap();
        assert_eq!(t[0].std_error, 1.0);
        assert_eq!(t[0].bias, 0.0);
        assert_eq!((t[0].lower, t[0].upper), (-1.0, 1.0));
        assert_eq!(t[1].std_error, 0.5);
        let no_base = StudyResult {
            rows: vec![summary(250, 0.0, 0.3)],
            ..result
        };
        assert!(matches!(standardized_bias_table(&no_base), Err(StudyError::MissingBaseline(100))));
    }

    #[test]
    fn catalog_lookup() {
        let s = scenario_catalog("ptw-p2-di2", StudyScale::Desk, 1).unwrap();
        assert_eq!(s.generator, Generator::PoissonTweedie { p: 2.0, phi: 0.1 });
        assert_eq!((s.replicates, s.sample_sizes.clone()), (200, vec![100, 500]));
        let s = scenario_catalog("ptw-p1.5-di2", StudyScale::Paper, 1).unwrap();
        assert!(matches!(s.generator, Generator::PoissonTweedie { phi, .. } if (phi - 0.1f64.sqrt()).abs() < 1e-15));
        assert_eq!(s.sample_sizes, vec![100, 250, 500, 1000]);
        assert_eq!(
            scenario_catalog("ptw-p3-di20", StudyScale::Desk, 1).unwrap().truth.phi,
            0.19
        );
        assert!(scenario_catalog("nope", StudyScale::Desk, 1).is_err());
        assert_eq!(full_scenarios().len(), 20);
    }

    #[test]
    fn scenario_validation() {
        let mut s = scenario_catalog("ptw-p2-di2", StudyScale::Desk, 1).unwrap();
        s.replicates = 10;
        assert!(run_study(&s, 1).is_err());
        s.replicates = 60;
        s.sample_sizes = vec![4];
        assert!(run_study(&s, 1).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut s = scenario_catalog("ptw-p2-di2", StudyScale::Desk, 1).unwrap();
        s.replicates = 50;
        s.sample_sizes = vec![100];
        let a = run_study_with_threads(&s, 7, 1).unwrap();
        let b = run_study_with_threads(&s, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
