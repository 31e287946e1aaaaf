//! Reference integrators used only as test oracles.

/// `∫₀^∞ f(z) dz` by the trapezoid rule after substituting `z = e^t`.
/// For integrands decaying at both ends this converges geometrically.
pub fn integrate_positive<F: Fn(f64) -> f64>(f: F) -> f64 {
    let (lo, hi, steps) = (-40.0f64, 8.0f64, 20_000usize);
    let h = (hi - lo) / steps as f64;
    (0..=steps)
        .map(|k| {
            let t = lo + k as f64 * h;
            let z = t.exp();
            let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
            weight * f(z) * z
        })
        .sum::<f64>()
        * h
}

/// Poisson-Tweedie PMF for `1 < p < 2` by the exact mixture series: given
/// `N = n` gamma summands the count is negative binomial with size `nα`.
pub fn compound_poisson_pmf(y: u64, mu: f64, phi: f64, p: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let rate = mu.powf(2.0 - p) / (phi * (2.0 - p));
    let shape = (2.0 - p) / (p - 1.0);
    let theta = phi * (p - 1.0) * mu.powf(p - 1.0);
    let yf = y as f64;
    let ln_pois = |n: f64| n * rate.ln() - rate - ln_gamma(n + 1.0);
    let mut total = if y == 0 { (-rate).exp() } else { 0.0 };
    let top = (rate + 40.0 * rate.sqrt() + 50.0) as u64;
    for n in 1..=top {
        let size = n as f64 * shape;
        let ln_nb = ln_gamma(yf + size) - ln_gamma(size) - ln_gamma(yf + 1.0) - size * theta.ln_1p()
            + yf * (theta.ln() - theta.ln_1p());
        total += (ln_pois(n as f64) + ln_nb).exp();
    }
    total
}
