//! Gauss-Laguerre quadrature for integrals of the form `∫₀^∞ e^{-x} f(x) dx`.

use nalgebra::{DMatrix, SymmetricEigen};

use super::NumError;

pub const MAX_LAGUERRE_ORDER: usize = 512;

/// Nodes and weights of an n-point Gauss-Laguerre rule.
///
/// Weights of the outermost nodes fall below the smallest normal `f64` once
/// `n` exceeds roughly 180, so the rule also carries the log-weights, which
/// stay finite for every supported order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∑ w_k f(x_k)`, approximating `∫₀^∞ e^{-x} f(x) dx`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Laguerre polynomials `L_n(x)` and `L_{n-1}(x)` by the three-term
/// recurrence, rescaled as they grow. Returns `(l_n, l_nm1, log_scale)` with
/// the true values equal to the returned ones times `exp(log_scale)`.
fn laguerre_pair(n: usize, x: f64) -> (f64, f64, f64) {
    const RESCALE: f64 = 1e150;
    let mut prev = 1.0;
    let mut cur = 1.0 - x;
    let mut log_scale = 0.0;
    if n == 0 {
        return (1.0, 0.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 - x) * cur - kf * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
        if cur.abs() > RESCALE {
            cur /= RESCALE;
            prev /= RESCALE;
            log_scale += RESCALE.ln();
        }
    }
    (cur, prev, log_scale)
}

/// Build the n-point Gauss-Laguerre rule (weight function `e^{-x}`).
///
/// Eigenvalues of the Jacobi matrix seed a Newton iteration on the Laguerre
/// recurrence, which polishes every node to full precision.
pub fn gauss_laguerre(n: usize) -> Result<QuadratureRule, NumError> {
    if n == 0 || n > MAX_LAGUERRE_ORDER {
        return Err(NumError::QuadratureOrder(n));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        jacobi[(k, k)] = 2.0 * k as f64 + 1.0;
        if k + 1 < n {
            jacobi[(k, k + 1)] = (k + 1) as f64;
            jacobi[(k + 1, k)] = (k + 1) as f64;
        }
    }
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guesses.sort_by(f64::total_cmp);

    let nf = n as f64;
    let mut nodes = Vec::with_capacity(n);
    let mut log_weights = Vec::with_capacity(n);
    for mut x in guesses {
        for _ in 0..100 {
            let (ln, lnm1, _) = laguerre_pair(n, x);
            // L_n'(x) = n (L_n - L_{n-1}) / x
            let deriv = nf * (ln - lnm1) / x;
            let dx = ln / deriv;
            x -= dx;
            if dx.abs() <= 1e-15 * x.abs() {
                break;
            }
        }
        let (_, lnm1, log_scale) = laguerre_pair(n, x);
        // w = x / (n L_{n-1}(x))^2 at a root of L_n
        let lw = x.ln() - 2.0 * nf.ln() - 2.0 * (lnm1.abs().ln() + log_scale);
        nodes.push(x);
        log_weights.push(lw);
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) || nodes[0] <= 0.0 {
        return Err(NumError::Convergence(format!(
            "Gauss-Laguerre nodes of order {n} are not strictly increasing"
        )));
    }
    // Renormalize so the constant function integrates to exactly one; this
    // absorbs the O(n·ε) drift of the recurrence in the raw weights.
    let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_total = top + log_weights.iter().map(|lw| (lw - top).exp()).sum::<f64>().ln();
    for lw in &mut log_weights {
        *lw -= log_total;
    }
    let weights = log_weights.iter().map(|lw| lw.exp()).collect();
    Ok(QuadratureRule {
        nodes,
        weights,
        log_weights,
    })
}
