//! COM-Poisson and Gamma-Count count distributions, used as generators of
//! underdispersed data, and the simulation-based mapping of their regression
//! parameters onto the mean-variance model `E = exp(β₀ + β₁x)`,
//! `Var = E + φ E^p`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use thiserror::Error;

use crate::numcore::{solve_linear, DenseMatrix, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefDistError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("nonlinear least squares did not converge: {0}")]
    NlsConvergence(String),
}

/// Support truncation: stop once the remaining mass is below this.
const TAIL: f64 = 1e-12;
/// Hard cap on the tabulated support.
const MAX_SUPPORT: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComPoissonParams {
    pub lambda: f64,
    pub nu: f64,
}

impl ComPoissonParams {
    pub fn new(lambda: f64, nu: f64) -> Result<Self, RefDistError> {
        check_positive(lambda, nu)?;
        Ok(Self { lambda, nu })
    }

    /// PMF `λ^y / (y!)^ν / Z(λ, ν)` on `0..len`, normalized in log space. The
    /// series is cut once past the mode and the next term falls below
    /// `1e-12` of the partial sum.
    pub fn pmf_table(&self) -> Vec<f64> {
        let ln_lambda = self.lambda.ln();
        let ln_term = |y: usize| y as f64 * ln_lambda - self.nu * ln_gamma(y as f64 + 1.0);
        let mode = self.lambda.powf(1.0 / self.nu).floor() as usize;
        let top = ln_term(mode);
        let mut terms = Vec::new();
        let mut partial = 0.0;
        for y in 0..MAX_SUPPORT {
            let t = (ln_term(y) - top).exp();
            terms.push(t);
            partial += t;
            if y > mode && t < TAIL * partial {
                break;
            }
        }
        terms.iter().map(|t| t / partial).collect()
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<u64> {
        invert_cdf(&cumulative(&self.pmf_table()), n, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaCountParams {
    pub lambda: f64,
    pub nu: f64,
}

impl GammaCountParams {
    pub fn new(lambda: f64, nu: f64) -> Result<Self, RefDistError> {
        check_positive(lambda, nu)?;
        Ok(Self { lambda, nu })
    }

    /// `P(Y = y) = G(yν, νλ) - G((y+1)ν, νλ)` with `G` the regularized lower
    /// incomplete gamma and `G(0, t) = 1`.
    pub fn pmf(&self, y: u64) -> f64 {
        let t = self.nu * self.lambda;
        let (a0, a1) = (y as f64 * self.nu, (y + 1) as f64 * self.nu);
        let upper = |a: f64| if a == 0.0 { 0.0 } else { gamma_ur(a, t) };
        let lower = |a: f64| if a == 0.0 { 1.0 } else { gamma_lr(a, t) };
        // difference the tail that is not close to one, to avoid cancellation
        if a1 <= t {
            (upper(a1) - upper(a0)).max(0.0)
        } else {
            (lower(a0) - lower(a1)).max(0.0)
        }
    }

    pub fn pmf_table(&self) -> Vec<f64> {
        let mut table = Vec::new();
        let mut mass = 0.0;
        let centre = self.lambda.ceil() as usize;
        for y in 0..MAX_SUPPORT {
            let v = self.pmf(y as u64);
            table.push(v);
            mass += v;
            if y > centre && 1.0 - mass < TAIL {
                break;
            }
        }
        table
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<u64> {
        invert_cdf(&cumulative(&self.pmf_table()), n, rng)
    }
}

fn check_positive(lambda: f64, nu: f64) -> Result<(), RefDistError> {
    if !(lambda > 0.0 && lambda.is_finite() && nu > 0.0 && nu.is_finite()) {
        return Err(RefDistError::InvalidParameter(format!(
            "λ = {lambda} and ν = {nu} must be positive and finite"
        )));
    }
    Ok(())
}

fn cumulative(pmf: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    pmf.iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn invert_cdf(cdf: &[f64], n: usize, rng: &mut RngStream) -> Vec<u64> {
    let total = *cdf.last().unwrap_or(&1.0);
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u64
        })
        .collect()
}

pub fn compoisson_sample(params: &ComPoissonParams, n: usize, rng: &mut RngStream) -> Vec<u64> {
    params.sample(n, rng)
}

pub fn gammacount_sample(params: &GammaCountParams, n: usize, rng: &mut RngStream) -> Vec<u64> {
    params.sample(n, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefFamily {
    ComPoisson,
    GammaCount,
}

impl RefFamily {
    pub fn pmf_table(self, lambda: f64, nu: f64) -> Result<Vec<f64>, RefDistError> {
        Ok(match self {
            RefFamily::ComPoisson => ComPoissonParams::new(lambda, nu)?.pmf_table(),
            RefFamily::GammaCount => GammaCountParams::new(lambda, nu)?.pmf_table(),
        })
    }

    pub fn sample(self, lambda: f64, nu: f64, n: usize, rng: &mut RngStream) -> Result<Vec<u64>, RefDistError> {
        Ok(invert_cdf(&cumulative(&self.pmf_table(lambda, nu)?), n, rng))
    }
}

/// Grid and replication of the moment mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentDesign {
    /// Points of the equally spaced grid on `[-1, 1]`.
    pub grid_len: usize,
    /// Draws per grid point; `None` uses the exact moments of the PMF.
    pub replicates: Option<usize>,
}

impl Default for MomentDesign {
    fn default() -> Self {
        Self {
            grid_len: 1000,
            replicates: Some(1000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentMap {
    pub beta0: f64,
    pub beta1: f64,
    pub phi: f64,
    pub p: f64,
    pub mean_rss: f64,
    pub variance_rss: f64,
}

/// Equally spaced points from -1 to 1.
pub fn unit_grid(len: usize) -> Vec<f64> {
    match len {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..len).map(|i| -1.0 + 2.0 * i as f64 / (len - 1) as f64).collect(),
    }
}

fn table_moments(pmf: &[f64]) -> (f64, f64) {
    let mean: f64 = pmf.iter().enumerate().map(|(y, p)| y as f64 * p).sum();
    let var = pmf.iter().enumerate().map(|(y, p)| (y as f64 - mean).powi(2) * p).sum();
    (mean, var)
}

fn sample_moments(y: &[u64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<u64>() as f64 / n;
    let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Gauss-Newton for `min Σ (t_i - f(θ; i))²` with step halving.
fn gauss_newton<F>(model: F, targets: &[f64], start: Vec<f64>, valid: impl Fn(&[f64]) -> bool) -> Result<(Vec<f64>, f64), RefDistError>
where
    F: Fn(&[f64]) -> (Vec<f64>, DenseMatrix),
{
    let rss = |theta: &[f64]| -> f64 {
        let (fit, _) = model(theta);
        fit.iter().zip(targets).map(|(f, t)| (t - f).powi(2)).sum()
    };
    let mut theta = start;
    if !valid(&theta) {
        return Err(RefDistError::NlsConvergence("infeasible starting values".into()));
    }
    let mut current = rss(&theta);
    for _ in 0..500 {
        let (fit, jac) = model(&theta);
        let resid: Vec<f64> = targets.iter().zip(&fit).map(|(t, f)| t - f).collect();
        let jt = jac.transpose();
        let mut normal = jt.matmul(&jac).map_err(nls)?;
        let rhs = jt.matvec(&resid).map_err(nls)?;
        let step = match solve_linear(&normal, &rhs) {
            Ok(s) => s,
            Err(_) => {
                // a parameter is unidentified at this point (e.g. p when φ = 0): damp it
                let ridge = 1e-10 * normal.max_abs();
                for k in 0..normal.rows() {
                    normal[(k, k)] += ridge;
                }
                solve_linear(&normal, &rhs).map_err(nls)?
            }
        };
        let mut t = 1.0;
        let mut improved = None;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            if valid(&trial) {
                let r = rss(&trial);
                if r.is_finite() && r <= current {
                    improved = Some((trial, r));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, r)) = improved else {
            return Ok((theta, current));
        };
        let change = next.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rel_drop = (current - r) / current.max(f64::MIN_POSITIVE);
        theta = next;
        current = r;
        if change < 1e-10 || rel_drop < 1e-14 {
            return Ok((theta, current));
        }
    }
    Err(RefDistError::NlsConvergence("iteration limit reached".into()))
}

fn nls(e: crate::numcore::NumError) -> RefDistError {
    RefDistError::NlsConvergence(e.to_string())
}

/// Map `(λ₀, λ₁, ν)` onto `(β₀, β₁, φ, p)`: tabulate mean and variance at
/// `λ_i = exp(λ₀ + λ₁ x_i)` over the grid, then fit `E = exp(β₀ + β₁x)` and
/// `Var = E + φE^p` by least squares, the latter with the empirical means as
/// regressor.
pub fn moment_map(
    family: RefFamily,
    lambda0: f64,
    lambda1: f64,
    nu: f64,
    design: &MomentDesign,
    rng: &RngStream,
) -> Result<MomentMap, RefDistError> {
    if design.grid_len < 3 {
        return Err(RefDistError::InvalidParameter("moment grid needs at least 3 points".into()));
    }
    if design.replicates.is_some_and(|r| r < 2) {
        return Err(RefDistError::InvalidParameter("at least 2 replicates per grid point".into()));
    }
    let x = unit_grid(design.grid_len);
    let moments: Vec<(f64, f64)> = x
        .par_iter()
        .enumerate()
        .map(|(i, &xi)| {
            let lambda = (lambda0 + lambda1 * xi).exp();
            let pmf = family.pmf_table(lambda, nu)?;
            Ok(match design.replicates {
                None => table_moments(&pmf),
                Some(r) => {
                    let mut sub = rng.substream(i as u64);
                    sample_moments(&invert_cdf(&cumulative(&pmf), r, &mut sub))
                }
            })
        })
        .collect::<Result<_, RefDistError>>()?;
    let e: Vec<f64> = moments.iter().map(|m| m.0).collect();
    let v: Vec<f64> = moments.iter().map(|m| m.1).collect();
    if e.iter().any(|&m| !(m > 0.0)) {
        return Err(RefDistError::NlsConvergence("a grid point has zero empirical mean".into()));
    }

    // start (β₀, β₁) from the regression of log Ê on x
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, e.iter().map(|m| m.ln()).sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&e).map(|(a, m)| (a - mx) * (m.ln() - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b1 = sxy / sxx;
    let mean_model = |b: &[f64]| {
        let f: Vec<f64> = x.iter().map(|xi| (b[0] + b[1] * xi).exp()).collect();
        let jac = DenseMatrix::from_rows(&f.iter().zip(&x).map(|(fi, xi)| vec![*fi, fi * xi]).collect::<Vec<_>>())
            .expect("finite jacobian");
        (f, jac)
    };
    let (beta, mean_rss) = gauss_newton(mean_model, &e, vec![my - b1 * mx, b1], |b| b.iter().all(|v| v.is_finite()))?;

    let var_model = |l: &[f64]| {
        let f: Vec<f64> = e.iter().map(|m| m + l[0] * m.powf(l[1])).collect();
        let rows: Vec<Vec<f64>> = e.iter().map(|m| vec![m.powf(l[1]), l[0] * m.powf(l[1]) * m.ln()]).collect();
        (f, DenseMatrix::from_rows(&rows).expect("finite jacobian"))
    };
    let admissible = |l: &[f64]| l.iter().all(|v| v.is_finite()) && e.iter().all(|m| m + l[0] * m.powf(l[1]) > 0.0);
    let (lambda, variance_rss) = gauss_newton(var_model, &v, vec![-0.5, 1.1], admissible)?;
    Ok(MomentMap {
        beta0: beta[0],
        beta1: beta[1],
        phi: lambda[0],
        p: lambda[1],
        mean_rss,
        variance_rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn poisson_pmf(y: u64, mu: f64) -> f64 {
        (y as f64 * mu.ln() - mu - ln_gamma(y as f64 + 1.0)).exp()
    }

    /// Pearson chi-square p-value, pooling cells with expected count < 5.
    fn chi_square_p(sample: &[u64], pmf: &dyn Fn(u64) -> f64) -> f64 {
        let n = sample.len() as f64;
        let top = *sample.iter().max().unwrap() as usize;
        let mut observed = vec![0.0; top + 1];
        for &y in sample {
            observed[y as usize] += 1.0;
        }
        let (mut stat, mut cells) = (0.0, 0usize);
        let (mut o_acc, mut e_acc) = (0.0, 0.0);
        let mut e_total = 0.0;
        for (y, &o) in observed.iter().enumerate() {
            let e = n * pmf(y as u64);
            e_total += e;
            o_acc += o;
            e_acc += e;
            if e_acc >= 5.0 {
                stat += (o_acc - e_acc).powi(2) / e_acc;
                cells += 1;
                o_acc = 0.0;
                e_acc = 0.0;
            }
        }
        // everything beyond the largest draw plus any pending cell
        e_acc += n - e_total;
        if e_acc > 0.0 {
            stat += (o_acc - e_acc).powi(2) / e_acc;
            cells += 1;
        }
        1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn unit_nu_reduces_to_poisson() {
        let cmp = ComPoissonParams::new(6.5, 1.0).unwrap().pmf_table();
        let gc = GammaCountParams::new(6.5, 1.0).unwrap();
        for y in 0..40u64 {
            let p = poisson_pmf(y, 6.5);
            assert!((cmp.get(y as usize).copied().unwrap_or(0.0) - p).abs() < 1e-11);
            assert!((gc.pmf(y) - p).abs() < 1e-12, "y={y}");
        }
        let mut rng = RngStream::new(1, 0);
        let s = ComPoissonParams::new(6.5, 1.0).unwrap().sample(100_000, &mut rng);
        assert!(chi_square_p(&s, &|y| poisson_pmf(y, 6.5)) > 0.001);
    }

    #[test]
    fn gamma_count_table_sums_to_one() {
        for &(l, nu) in &[(2.0, 2.0), (20.0, 8.0), (0.3, 4.0), (150.0, 6.0)] {
            let t = GammaCountParams::new(l, nu).unwrap().pmf_table();
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(t.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn samplers_underdisperse() {
        let mut rng = RngStream::new(2, 0);
        let s = ComPoissonParams::new(8.0, 2.0).unwrap().sample(50_000, &mut rng);
        let (m, v) = sample_moments(&s);
        assert!(v < m);
        let s = GammaCountParams::new(2.0, 2.0).unwrap().sample(100_000, &mut rng);
        let (m, v) = sample_moments(&s);
        assert!(v / m < 1.0);
    }

    #[test]
    fn strong_com_poisson_dispersion_concentrates() {
        let t = ComPoissonParams::new(1.2, 50.0).unwrap().pmf_table();
        assert!(t[0] + t[1] > 1.0 - 1e-12);
        let s = ComPoissonParams::new(1.2, 50.0).unwrap().sample(10_000, &mut RngStream::new(3, 0));
        assert!(s.iter().all(|&y| y <= 1));
    }

    #[test]
    fn goodness_of_fit_for_study_parameters() {
        let parent = RngStream::new(4, 0);
        for (i, nu) in [2.0, 4.0, 6.0, 8.0].into_iter().enumerate() {
            let cmp = ComPoissonParams::new(8f64.exp(), nu).unwrap();
            let table = cmp.pmf_table();
            let s = cmp.sample(100_000, &mut parent.substream(i as u64));
            let p = chi_square_p(&s, &|y| table.get(y as usize).copied().unwrap_or(0.0));
            assert!(p > 0.001, "CMP ν={nu}: p={p}");

            let gc = GammaCountParams::new(2f64.exp(), nu).unwrap();
            let s = gc.sample(100_000, &mut parent.substream(10 + i as u64));
            let p = chi_square_p(&s, &|y| gc.pmf(y));
            assert!(p > 0.001, "GC ν={nu}: p={p}");
        }
    }

    #[test]
    fn equidispersed_mapping_recovers_truth() {
        let design = MomentDesign {
            grid_len: 200,
            replicates: None,
        };
        for fam in [RefFamily::ComPoisson, RefFamily::GammaCount] {
            let m = moment_map(fam, 2.0, 1.0, 1.0, &design, &RngStream::new(0, 0)).unwrap();
            assert!(m.phi.abs() < 0.02, "{fam:?} {m:?}");
            assert!((m.beta0 - 2.0).abs() < 1e-6 && (m.beta1 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn moment_map_is_deterministic() {
        let design = MomentDesign {
            grid_len: 100,
            replicates: Some(200),
        };
        let a = moment_map(RefFamily::GammaCount, 2.0, 1.0, 4.0, &design, &RngStream::new(5, 0)).unwrap();
        let b = moment_map(RefFamily::GammaCount, 2.0, 1.0, 4.0, &design, &RngStream::new(5, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.phi < 0.0);
    }
}
