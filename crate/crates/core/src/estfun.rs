//! Quasi-score and Pearson estimating functions for Poisson-Tweedie
//! regression with a log link, together with their sensitivity and
//! variability matrices.
//!
//! Parameters are ordered `θ = (β_1..β_Q, φ, p)` throughout.

use nalgebra::SVD;
use thiserror::Error;

use crate::numcore::{DenseMatrix, NumError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstFunError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("variance C = {value:e} at observation {index} is not positive")]
    VarianceNonPositive { index: usize, value: f64 },
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("sensitivity matrix is singular: {0}")]
    SingularSensitivity(NumError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

/// Design, response and offset of a log-link count regression.
#[derive(Debug, Clone, PartialEq)]
pub struct PtwModel {
    x: DenseMatrix,
    y: Vec<u64>,
    offset: Vec<f64>,
}

impl PtwModel {
    /// `offset` defaults to zeros.
    pub fn new(x: DenseMatrix, y: Vec<u64>, offset: Option<Vec<f64>>) -> Result<Self, EstFunError> {
        let n = x.rows();
        if y.len() != n {
            return Err(EstFunError::Shape(format!("{} responses for {} design rows", y.len(), n)));
        }
        if n < x.cols() {
            return Err(EstFunError::Shape(format!("{} observations for {} coefficients", n, x.cols())));
        }
        let offset = offset.unwrap_or_else(|| vec![0.0; n]);
        if offset.len() != n {
            return Err(EstFunError::Shape(format!("{} offsets for {} observations", offset.len(), n)));
        }
        if offset.iter().any(|o| !o.is_finite()) {
            return Err(EstFunError::Shape("non-finite offset".into()));
        }
        Ok(Self { x, y, offset })
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn q(&self) -> usize {
        self.x.cols()
    }

    /// Numerical column rank of the design from its singular values.
    pub fn rank(&self) -> usize {
        let svd = SVD::new(self.x.to_nalgebra(), false, false);
        let top = svd.singular_values.max();
        let cut = top * 1e-10 * self.n().max(self.q()) as f64;
        svd.singular_values.iter().filter(|&&s| s > cut).count()
    }

    pub fn check_rank(&self) -> Result<(), EstFunError> {
        let rank = self.rank();
        if rank < self.q() {
            return Err(EstFunError::RankDeficient { rank, cols: self.q() });
        }
        Ok(())
    }

    /// `μ_i = exp(x_iᵀβ + offset_i)`.
    pub fn mean(&self, beta: &[f64]) -> Result<Vec<f64>, EstFunError> {
        let eta = self.x.matvec(beta)?;
        Ok(eta.iter().zip(&self.offset).map(|(e, o)| (e + o).exp()).collect())
    }
}

/// Regression coefficients and the dispersion pair `λ = (φ, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub phi: f64,
    pub p: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, phi: f64, p: f64) -> Self {
        Self { beta, phi, p }
    }

    /// `(β, φ, p)` as one vector.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.phi);
        v.push(self.p);
        v
    }
}

/// Per-observation quantities shared by all estimating-function operations.
#[derive(Debug, Clone)]
pub struct EstFunState {
    pub mu: Vec<f64>,
    pub c: Vec<f64>,
    pub resid: Vec<f64>,
    pub resid2: Vec<f64>,
    pub w_phi: Vec<f64>,
    pub w_p: Vec<f64>,
    pub w_beta: DenseMatrix,
}

impl EstFunState {
    pub fn new(model: &PtwModel, theta: &Theta) -> Result<Self, EstFunError> {
        if theta.beta.len() != model.q() {
            return Err(EstFunError::Shape(format!(
                "{} coefficients for {} design columns",
                theta.beta.len(),
                model.q()
            )));
        }
        let mu = model.mean(&theta.beta)?;
        let (phi, p) = (theta.phi, theta.p);
        let n = model.n();
        let mut c = Vec::with_capacity(n);
        let mut w_phi = Vec::with_capacity(n);
        let mut w_p = Vec::with_capacity(n);
        let mut w_beta = DenseMatrix::zeros(n, model.q());
        for (i, &m) in mu.iter().enumerate() {
            let mp = m.powf(p);
            let ci = m + phi * mp;
            if !(ci > 0.0) || !ci.is_finite() {
                return Err(EstFunError::VarianceNonPositive { index: i, value: ci });
            }
            let inv2 = 1.0 / (ci * ci);
            w_phi.push(mp * inv2);
            w_p.push(phi * mp * m.ln() * inv2);
            let dc = (m + phi * p * mp) * inv2;
            for (k, &xik) in model.x().row(i).iter().enumerate() {
                w_beta[(i, k)] = dc * xik;
            }
            c.push(ci);
        }
        let resid: Vec<f64> = model.y().iter().zip(&mu).map(|(&y, m)| y as f64 - m).collect();
        let resid2 = resid.iter().map(|r| r * r).collect();
        Ok(Self {
            mu,
            c,
            resid,
            resid2,
            w_phi,
            w_p,
            w_beta,
        })
    }

    fn q(&self) -> usize {
        self.w_beta.cols()
    }

    /// Per-observation quasi-score contributions `μ_i x_i C_i⁻¹ (y_i - μ_i)`.
    fn beta_terms(&self, model: &PtwModel, i: usize) -> impl Iterator<Item = f64> + '_ {
        let f = self.mu[i] * self.resid[i] / self.c[i];
        model.x().row(i).to_vec().into_iter().map(move |x| f * x)
    }

    /// Per-observation Pearson contributions `(W_φ, W_p) · ((y-μ)² - C)`.
    fn lambda_terms(&self, i: usize) -> [f64; 2] {
        let bracket = self.resid2[i] - self.c[i];
        [self.w_phi[i] * bracket, self.w_p[i] * bracket]
    }

    pub fn quasi_score(&self, model: &PtwModel) -> Vec<f64> {
        let mut score = vec![0.0; self.q()];
        for i in 0..self.mu.len() {
            for (s, t) in score.iter_mut().zip(self.beta_terms(model, i)) {
                *s += t;
            }
        }
        score
    }

    pub fn pearson_score(&self) -> [f64; 2] {
        (0..self.mu.len()).fold([0.0, 0.0], |acc, i| {
            let t = self.lambda_terms(i);
            [acc[0] + t[0], acc[1] + t[1]]
        })
    }

    /// `S_β = -∑ μ_i² x_i x_iᵀ / C_i`.
    pub fn sensitivity_beta(&self, model: &PtwModel) -> DenseMatrix {
        let q = self.q();
        let mut s = DenseMatrix::zeros(q, q);
        for i in 0..self.mu.len() {
            let f = self.mu[i] * self.mu[i] / self.c[i];
            let xi = model.x().row(i);
            for j in 0..q {
                for k in 0..q {
                    s[(j, k)] -= f * xi[j] * xi[k];
                }
            }
        }
        s
    }

    fn w_lambda(&self, i: usize) -> [f64; 2] {
        [self.w_phi[i], self.w_p[i]]
    }

    /// `S_λ_{jk} = -∑ W_{iλ_j} C_i² W_{iλ_k}`.
    pub fn sensitivity_lambda(&self) -> DenseMatrix {
        let mut s = DenseMatrix::zeros(2, 2);
        for i in 0..self.mu.len() {
            let w = self.w_lambda(i);
            let c2 = self.c[i] * self.c[i];
            for j in 0..2 {
                for k in 0..2 {
                    s[(j, k)] -= w[j] * c2 * w[k];
                }
            }
        }
        s
    }

    /// `S_λβ_{jk} = -∑ W_{iλ_j} C_i² W_{iβ_k}`.
    pub fn sensitivity_lambda_beta(&self) -> DenseMatrix {
        let q = self.q();
        let mut s = DenseMatrix::zeros(2, q);
        for i in 0..self.mu.len() {
            let w = self.w_lambda(i);
            let c2 = self.c[i] * self.c[i];
            for j in 0..2 {
                for k in 0..q {
                    s[(j, k)] -= w[j] * c2 * self.w_beta[(i, k)];
                }
            }
        }
        s
    }

    /// Full `(Q+2)²` sensitivity `[[S_β, 0], [S_λβ, S_λ]]`.
    pub fn sensitivity(&self, model: &PtwModel) -> DenseMatrix {
        let q = self.q();
        let mut s = DenseMatrix::zeros(q + 2, q + 2);
        let sb = self.sensitivity_beta(model);
        let sl = self.sensitivity_lambda();
        let slb = self.sensitivity_lambda_beta();
        for j in 0..q {
            for k in 0..q {
                s[(j, k)] = sb[(j, k)];
            }
        }
        for j in 0..2 {
            for k in 0..q {
                s[(q + j, k)] = slb[(j, k)];
            }
            for k in 0..2 {
                s[(q + j, q + k)] = sl[(j, k)];
            }
        }
        s
    }

    /// Full `(Q+2)²` variability: analytic `V_β = -S_β`, empirical `Ṽ_λ` and
    /// `Ṽ_λβ` from per-observation products, assembled symmetrically.
    pub fn variability(&self, model: &PtwModel) -> DenseMatrix {
        let q = self.q();
        let mut v = DenseMatrix::zeros(q + 2, q + 2);
        let sb = self.sensitivity_beta(model);
        for j in 0..q {
            for k in 0..q {
                v[(j, k)] = -sb[(j, k)];
            }
        }
        for i in 0..self.mu.len() {
            let l = self.lambda_terms(i);
            let b: Vec<f64> = self.beta_terms(model, i).collect();
            for j in 0..2 {
                for k in 0..2 {
                    v[(q + j, q + k)] += l[j] * l[k];
                }
                for k in 0..q {
                    v[(q + j, k)] += l[j] * b[k];
                    v[(k, q + j)] += l[j] * b[k];
                }
            }
        }
        v
    }
}

pub fn quasi_score(model: &PtwModel, theta: &Theta) -> Result<Vec<f64>, EstFunError> {
    Ok(EstFunState::new(model, theta)?.quasi_score(model))
}

pub fn pearson_score(model: &PtwModel, theta: &Theta) -> Result<[f64; 2], EstFunError> {
    Ok(EstFunState::new(model, theta)?.pearson_score())
}

pub fn sensitivity(model: &PtwModel, theta: &Theta) -> Result<DenseMatrix, EstFunError> {
    Ok(EstFunState::new(model, theta)?.sensitivity(model))
}

pub fn variability(model: &PtwModel, theta: &Theta) -> Result<DenseMatrix, EstFunError> {
    Ok(EstFunState::new(model, theta)?.variability(model))
}

/// Inverse Godambe information `S⁻¹ V S⁻ᵀ`, symmetrized.
pub fn godambe_covariance(s: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix, EstFunError> {
    if !s.is_square() || s.rows() != v.rows() || !v.is_square() {
        return Err(EstFunError::Shape(format!(
            "sensitivity {}x{} and variability {}x{}",
            s.rows(),
            s.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let s_inv = s.inverse().map_err(EstFunError::SingularSensitivity)?;
    let j = s_inv.matmul(v)?.matmul(&s_inv.transpose())?;
    Ok(j.symmetrized())
}
