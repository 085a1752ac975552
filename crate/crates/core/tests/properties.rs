mod common {
    pub mod oracles;
}

use common::oracles::*;
use proptest::prelude::*;
use sqfc::bandwidth::{select_bandwidth, CvConfig};
use sqfc::detrend::estimate_trend;
use sqfc::inference::{bands, min_eigenvalue, VarianceMode};
use sqfc::localfit::{default_grid, fit_at, fit_curve, FitConfig, LocalFitResult};
use sqfc::simulate::{generate, BetaFn, DgpConfig, ErrorDist};
use sqfc::{KernelFamily, KernelSpec, LossSpec, SpatialDataset, TrendKernelSpec};

fn flat(fit: &LocalFitResult) -> Vec<f64> {
    let mut v = fit.beta_hat.clone();
    v.extend(fit.slope_hat.iter().flatten());
    v
}

fn loss_for(quantile: bool, tau: f64) -> LossSpec {
    if quantile {
        LossSpec::quantile(tau).unwrap()
    } else {
        LossSpec::Squared
    }
}

fn transformed(ds: &SpatialDataset, f: impl Fn(f64) -> f64) -> SpatialDataset {
    let y: Vec<f64> = ds.observations().iter().map(|o| f(o.y)).collect();
    ds.with_responses(&y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn location_shift_moves_only_the_intercept(
        seed in any::<u64>(),
        quantile in any::<bool>(),
        tau in 0.1f64..0.9,
        d in 1usize..4,
        shift in -50.0f64..50.0,
    ) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 80, d, 1, false);
        let cfg = FitConfig::new(loss_for(quantile, tau), KernelSpec::epanechnikov(1), 0.4);
        let base = fit_at(&ds, &[0.5], &cfg).unwrap();
        let moved = fit_at(&transformed(&ds, |y| y + shift), &[0.5], &cfg).unwrap();
        let mut expected = flat(&base);
        expected[0] += shift;
        for (a, b) in flat(&moved).iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn positive_scaling_scales_every_coefficient(
        seed in any::<u64>(),
        quantile in any::<bool>(),
        tau in 0.1f64..0.9,
        d in 1usize..4,
        c in 0.05f64..20.0,
    ) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 80, d, 1, true);
        let cfg = FitConfig::new(loss_for(quantile, tau), KernelSpec::epanechnikov(1), 0.4);
        let base = fit_at(&ds, &[0.5], &cfg).unwrap();
        let scaled = fit_at(&transformed(&ds, |y| c * y), &[0.5], &cfg).unwrap();
        for (a, b) in flat(&scaled).iter().zip(flat(&base)) {
            prop_assert!((a - c * b).abs() <= 1e-6 * (1.0 + c * b.abs()), "{a} vs {}", c * b);
        }
    }

    #[test]
    fn fitted_objective_never_exceeds_the_zero_fit(
        seed in any::<u64>(),
        loss_kind in 0usize..3,
        tau in 0.05f64..0.95,
        k in 1usize..3,
    ) {
        let mut r = rng(seed);
        let ds = random_dataset(&mut r, 120, 2, k, loss_kind == 1);
        let loss = match loss_kind {
            0 => LossSpec::quantile(tau).unwrap(),
            1 => LossSpec::huber(1.0).unwrap(),
            _ => LossSpec::Squared,
        };
        let u0 = vec![0.5; k];
        let cfg = FitConfig::new(loss, KernelSpec::epanechnikov(k), 0.6);
        let fit = fit_at(&ds, &u0, &cfg).unwrap();
        let zero: f64 = local_rows(&ds, &u0, 0.6).iter().map(|(y, _, w)| w * loss.value(*y)).sum();
        prop_assert!(fit.objective <= zero * (1.0 + 1e-12));
    }

    #[test]
    fn trend_weights_are_normalised(seed in any::<u64>(), g in 0.15f64..0.6, order4 in any::<bool>()) {
        let sim = generate(&DgpConfig::new([12, 9], vec![BetaFn::Constant { a: 1.0 }], ErrorDist::Gaussian { sigma: 1.0 }, seed)).unwrap();
        let kernel = TrendKernelSpec::new(KernelFamily::Epanechnikov, if order4 { 4 } else { 2 }).unwrap();
        let model = estimate_trend(&sim.dataset, g, kernel).unwrap();
        for s in [[0.5, 0.5], [1.0 / 12.0, 1.0 / 9.0], [0.3, 0.9]] {
            let w = model.weights_at(&s).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn quantile_curves_are_ordered_on_homoscedastic_data() {
    let mut dgp = DgpConfig::new(
        [30, 30],
        vec![BetaFn::Sine { amp: 0.5, freq: 0.5 }, BetaFn::Linear { a: 1.0, b: 0.5 }],
        ErrorDist::Gaussian { sigma: 1.0 },
        11,
    );
    dgp.tau = Some(0.5);
    let ds = generate(&dgp).unwrap().dataset;
    let grid = default_grid(&ds, 100);
    let intercepts: Vec<Vec<Option<f64>>> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&tau| {
            let cfg = FitConfig::new(LossSpec::quantile(tau).unwrap(), KernelSpec::epanechnikov(1), 0.3);
            fit_curve(&ds, grid.clone(), &cfg).unwrap().points.iter().map(|p| p.fit.as_ref().map(|f| f.beta_hat[0])).collect()
        })
        .collect();
    let ordered = (0..grid.len())
        .filter(|&g| match (intercepts[0][g], intercepts[1][g], intercepts[2][g]) {
            (Some(a), Some(b), Some(c)) => a <= b && b <= c,
            _ => false,
        })
        .count();
    assert!(ordered as f64 >= 0.95 * grid.len() as f64, "{ordered} of {} ordered", grid.len());
}

#[test]
fn band_covariances_are_positive_semidefinite() {
    let mut dgp = DgpConfig::new([25, 25], vec![BetaFn::Sine { amp: 1.0, freq: 1.0 }, BetaFn::Constant { a: 1.0 }], ErrorDist::Gaussian { sigma: 1.0 }, 5);
    for (tau, loss) in [(Some(0.3), LossSpec::quantile(0.3).unwrap()), (None, LossSpec::huber(1.0).unwrap()), (None, LossSpec::Squared)] {
        dgp.tau = tau;
        let ds = generate(&dgp).unwrap().dataset;
        let cfg = FitConfig::new(loss, KernelSpec::epanechnikov(1), 0.25);
        let curve = fit_curve(&ds, default_grid(&ds, 25), &cfg).unwrap();
        for mode in [VarianceMode::Independent, VarianceMode::Conditional(vec![1])] {
            let b = bands(&curve, &ds, &mode, 0.95).unwrap();
            for p in b.points.iter().filter(|p| p.error.is_none()) {
                assert!(min_eigenvalue(&p.covariance) >= -1e-10, "{loss:?} at {:?}", p.u0);
            }
        }
    }
}

#[test]
fn failures_do_not_increase_with_bandwidth() {
    let mut r = rng(17);
    let ds = random_dataset(&mut r, 60, 2, 1, true);
    let grid = vec![0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64];
    let cfg = CvConfig::new(grid, FitConfig::new(LossSpec::quantile(0.5).unwrap(), KernelSpec::epanechnikov(1), 1.0));
    let report = select_bandwidth(&ds, &cfg).unwrap();
    assert!(report.candidates.windows(2).all(|w| w[1].failures <= w[0].failures), "{:?}", report.candidates);
    assert_eq!(report, select_bandwidth(&ds, &cfg).unwrap());
}
