use proptest::prelude::*;
use ptw_core::chaser::{step_control, FitConfig, P_MIN};
use ptw_core::estfun::{PtwModel, Theta};
use ptw_core::numcore::{solve_linear, DenseMatrix, RngStream};
use ptw_core::ptwdist::{dispersion_index, ptw_pmf, PmfConfig, PtwParams};
use ptw_core::tweedie::{tweedie_laplace, TweedieParams};
use rand::RngCore;

/// Square matrix with a dominant diagonal, so the condition number stays
/// moderate whatever the off-diagonal draw.
fn well_conditioned(n: usize, entries: &[f64]) -> DenseMatrix {
    let mut a = DenseMatrix::new(n, n, entries[..n * n].to_vec()).unwrap();
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
        a[(i, i)] = off + 1.0 + a[(i, i)].abs();
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn solve_inverts_matmul(
        n in 1usize..8,
        entries in prop::collection::vec(-5.0f64..5.0, 64),
        x in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let a = well_conditioned(n, &entries);
        let b = a.matvec(&x[..n]).unwrap();
        let solved = solve_linear(&a, &b).unwrap();
        let scale = x[..n].iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (s, t) in solved.iter().zip(&x[..n]) {
            prop_assert!((s - t).abs() <= 1e-6 * scale, "{s} vs {t}");
        }
        let inv = a.inverse().unwrap();
        let id = a.matmul(&inv).unwrap();
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((id[(i, j)] - e).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn streams_replay(seed in any::<u64>(), stream in any::<u64>(), child in any::<u64>()) {
        let draw = |mut r: RngStream| (0..8).map(|_| r.next_u64()).collect::<Vec<_>>();
        prop_assert_eq!(draw(RngStream::new(seed, stream)), draw(RngStream::new(seed, stream)));
        let parent = RngStream::new(seed, stream);
        prop_assert_eq!(draw(parent.substream(child)), draw(parent.substream(child)));
    }

    #[test]
    fn laplace_transform_decreases_from_one(
        mu in 0.1f64..50.0,
        phi in 0.01f64..3.0,
        p in prop::sample::select(vec![1.0, 1.1, 1.5, 1.9, 2.0, 3.0]),
        s in prop::collection::vec(0.0f64..20.0, 6),
    ) {
        let t = TweedieParams::new(mu, phi, p).unwrap();
        prop_assert_eq!(tweedie_laplace(&t, 0.0).unwrap(), 1.0);
        let mut s = s;
        s.sort_by(f64::total_cmp);
        let values: Vec<f64> = s.iter().map(|&v| tweedie_laplace(&t, v).unwrap()).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nonnegative_dispersion_never_underdisperses(
        mu in 0.01f64..500.0,
        phi in 0.0f64..20.0,
        p in 0.0f64..4.0,
    ) {
        let params = PtwParams::new(mu, phi, p).unwrap();
        prop_assert!(dispersion_index(&params).unwrap() >= 1.0);
    }

    #[test]
    fn pmfs_are_probabilities(
        mu in 0.1f64..40.0,
        phi in 0.01f64..2.0,
        p in prop::sample::select(vec![1.0, 1.5, 2.0, 3.0]),
        y in 0u64..120,
    ) {
        let params = PtwParams::new(mu, phi, p).unwrap();
        let cfg = PmfConfig { mc_draws: 2000, ..PmfConfig::default() };
        let est = ptw_pmf(&params, y, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&est.value), "{}", est.value);
        prop_assert!(est.mc_stderr.is_finite());
    }

    #[test]
    fn step_control_lands_on_positive_variances(
        beta in (0.0f64..3.0, -1.0f64..1.0),
        phi in -0.3f64..1.0,
        p in 1.0f64..2.5,
        dphi in -20.0f64..20.0,
        dp in -5.0f64..5.0,
    ) {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64 / 19.0]).collect();
        let model = PtwModel::new(DenseMatrix::from_rows(&rows).unwrap(), vec![2; 20], None).unwrap();
        let theta = Theta::new(vec![beta.0, beta.1], phi, p);
        let mu = model.mean(&theta.beta).unwrap();
        prop_assume!(mu.iter().all(|m| m + phi * m.powf(p) > 0.0));
        let (next, _) = step_control(&theta, [dphi, dp], &model, &FitConfig::default()).unwrap();
        prop_assert!(next.p >= P_MIN);
        prop_assert!(mu.iter().all(|m| m + next.phi * m.powf(next.p) > 0.0));
    }
}
