use ptw_core::chaser::{fit, FitConfig, FitResult, Parameter, PowerMode};
use ptw_core::estfun::{pearson_score, quasi_score, PtwModel};
use ptw_core::numcore::{DenseMatrix, RngStream};
use ptw_core::ptwdist::{ptw_sample, PtwParams};
use ptw_core::simstudy::{scenario_catalog, StudyScale};
use rand_distr::{Distribution, Poisson};

fn two_column_model(mut y_of_mu: impl FnMut(f64) -> u64, n: usize, beta: [f64; 2]) -> PtwModel {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, -1.0 + 2.0 * i as f64 / (n - 1) as f64]).collect();
    let y = rows.iter().map(|r| y_of_mu((beta[0] + beta[1] * r[1]).exp())).collect();
    PtwModel::new(DenseMatrix::from_rows(&rows).unwrap(), y, None).unwrap()
}

fn poisson_model(n: usize, beta: [f64; 2], seed: u64) -> PtwModel {
    let mut rng = RngStream::new(seed, 0);
    two_column_model(|mu| Poisson::new(mu).unwrap().sample(&mut rng) as u64, n, beta)
}

fn se(res: &FitResult, p: Parameter) -> f64 {
    res.std_error(p).unwrap()
}

#[test]
fn converged_fits_solve_the_estimating_equations() {
    for (k, &(phi, p)) in [(0.5, 1.2), (0.2, 2.0), (0.02, 3.0), (1.0, 1.5)].iter().enumerate() {
        let mut rng = RngStream::new(31, k as u64);
        let model = two_column_model(
            |mu| ptw_sample(&PtwParams::new(mu, phi, p).unwrap(), 1, &mut rng).unwrap()[0],
            400,
            [1.5, 0.7],
        );
        let cfg = FitConfig::default();
        let res = fit(&model, &cfg).unwrap();
        assert!(res.converged, "phi {phi} p {p}");
        let qs = quasi_score(&model, &res.theta_hat).unwrap();
        let ps = pearson_score(&model, &res.theta_hat).unwrap();
        assert!(qs.iter().chain(&ps).all(|s| s.abs() < cfg.tol), "{qs:?} {ps:?}");
        for (i, s) in res.std_errors.iter().enumerate() {
            assert_eq!(*s, res.covariance[(i, i)].sqrt());
            assert!(*s > 0.0);
        }
    }
}

#[test]
fn poisson_data_with_gamma_power() {
    let truth = [1.2, -0.6];
    let model = poisson_model(800, truth, 4);
    let res = fit(
        &model,
        &FitConfig {
            power_mode: PowerMode::Fixed(2.0),
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert!(res.converged);
    assert_eq!(res.parameters.len(), 3);
    assert!(res.theta_hat.phi.abs() < 4.0 * se(&res, Parameter::Phi));
    for k in 0..2 {
        assert!((res.theta_hat.beta[k] - truth[k]).abs() < 4.0 * se(&res, Parameter::Beta(k)));
    }
}

#[test]
fn fixed_powers_agree_on_equidispersed_data() {
    let model = poisson_model(2000, [2.0, 0.5], 12);
    let fits: Vec<FitResult> = [1.0, 2.0, 3.0]
        .iter()
        .map(|&p| {
            let res = fit(
                &model,
                &FitConfig {
                    power_mode: PowerMode::Fixed(p),
                    ..FitConfig::default()
                },
            )
            .unwrap();
            assert!(res.converged, "p = {p}");
            res
        })
        .collect();
    for other in &fits[1..] {
        for k in 0..2 {
            let (a, b) = (fits[0].theta_hat.beta[k], other.theta_hat.beta[k]);
            assert!((a - b).abs() <= 0.02 * a.abs(), "beta{k}: {a} vs {b}");
            let (a, b) = (se(&fits[0], Parameter::Beta(k)), se(other, Parameter::Beta(k)));
            assert!((a - b).abs() <= 0.02 * a, "se beta{k}: {a} vs {b}");
        }
    }
}

#[test]
fn gamma_count_underdispersion_keeps_variances_positive() {
    let scenario = scenario_catalog("gc-nu8", StudyScale::Desk, 3).unwrap();
    let (x, y) = scenario.simulate(1000, &mut RngStream::new(3, 9)).unwrap();
    let model = PtwModel::new(x, y, None).unwrap();
    let res = fit(&model, &FitConfig::default()).unwrap();
    assert!(res.converged);
    assert!(res.theta_hat.phi < 0.0, "{}", res.theta_hat.phi);
    let mu = model.mean(&res.theta_hat.beta).unwrap();
    assert!(mu.iter().all(|m| m + res.theta_hat.phi * m.powf(res.theta_hat.p) > 0.0));
}

/// Share of replicates at `n` whose fit converged with `φ̂ < 0`, and the mean
/// `φ̂` over converged fits.
fn underdispersed_replicates(name: &str, n: usize, reps: u64, seed: u64) -> (f64, f64) {
    let scenario = scenario_catalog(name, StudyScale::Desk, seed).unwrap();
    let parent = RngStream::new(seed, 1);
    let mut negative = 0;
    let mut phis = Vec::new();
    for r in 0..reps {
        let (x, y) = scenario.simulate(n, &mut parent.substream(r)).unwrap();
        let model = PtwModel::new(x, y, None).unwrap();
        if let Ok(res) = fit(&model, &scenario.fit_config) {
            if res.converged {
                phis.push(res.theta_hat.phi);
                if res.theta_hat.phi < 0.0 {
                    negative += 1;
                }
            }
        }
    }
    (negative as f64 / reps as f64, phis.iter().sum::<f64>() / phis.len() as f64)
}

#[test]
fn underdispersion_sign_recovery() {
    for name in ["cmp-nu4", "cmp-nu8", "gc-nu4", "gc-nu8"] {
        let (share, mean_phi) = underdispersed_replicates(name, 1000, 200, 77);
        assert!(share >= 0.95, "{name}: {share}");
        if name == "gc-nu4" {
            assert!((mean_phi + 0.682).abs() < 0.05, "{mean_phi}");
        }
    }
}
