use std::collections::BTreeSet;

use emv_core::forecast::{forecast, ForecastSource, ForecastSpec};
use emv_core::frailty::{simulate_vintage_hazard, FrailtyScenario};
use emv_core::synth::{generate, GeneratorSpec, MissingPattern, VintageSource};
use emv_core::vintage_effects::{fit_random_effects, ExogenousHandling, ProcessKind};
use emv_core::*;
use proptest::prelude::*;

fn cells_strategy() -> impl Strategy<Value = Vec<(u32, u32)>> {
    (2u32..=12, 4u32..=24, 0.0f64..0.3, any::<u64>()).prop_map(|(a_max, t_max, p, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut cells = Vec::new();
        for a in 0..=a_max {
            for t in 1..=t_max {
                if rng.random::<f64>() >= p {
                    cells.push((a, t));
                }
            }
        }
        cells
    })
}

fn panel_from(cells: &[(u32, u32)], seed: u64) -> PanelGrid {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    PanelGrid::from_cells(cells.iter().map(|&(age, time)| Cell {
        age,
        time,
        value: rng.random::<f64>() + 0.1 * age as f64 - 0.02 * time as f64,
        weight: 1.0,
    }))
    .unwrap()
}

fn constraints(layout: &Layout) -> Vec<ConstraintSpec> {
    let a_star = layout.ages[layout.ages.len() / 2];
    vec![
        ConstraintSpec::LastTwoVintagesEqual,
        ConstraintSpec::FirstLastVintagesEqual,
        ConstraintSpec::Intrinsic,
        ConstraintSpec::vintage_trend_zero(4),
        ConstraintSpec::maturity_slope(-0.01, a_star),
        ConstraintSpec::MatchParametric { target_slope: 0.003 },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn null_vector_annihilates_design(cells in cells_strategy()) {
        prop_assume!(cells.len() >= 2);
        let design = EmvDesign::from_cells(cells.iter().copied()).unwrap();
        let xc = design.apply(design.null_vector());
        prop_assert!(xc.amax() <= 1e-10 * design.norm_inf());
    }

    #[test]
    fn constraints_change_only_the_c_component(cells in cells_strategy(), seed in any::<u64>()) {
        let grid = panel_from(&cells, seed);
        let Ok(design) = EmvDesign::build(&grid) else { return Ok(()) };
        let layout = design.layout().clone();
        prop_assume!(layout.ages.len() >= 3 && layout.vintages.len() >= 4);
        let fit = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        let base = intrinsic(&fit, &design).unwrap();
        let fitted = base.reconstruct(&design);
        for spec in constraints(&layout) {
            let Ok(d) = apply_constraint(&fit, &design, &spec) else { continue };
            prop_assert!((d.reconstruct(&design) - &fitted).amax() < 1e-8);
            prop_assert!(drift_report(&base, &d).is_ok());
            prop_assert!(d.constraint_residual(&spec).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn intrinsic_is_idempotent_and_drift_is_recovered(cells in cells_strategy(), seed in any::<u64>(), gamma in -2.0f64..2.0) {
        let grid = panel_from(&cells, seed);
        let Ok(design) = EmvDesign::build(&grid) else { return Ok(()) };
        let fit = fit_linear(&design, &grid, &ResponseTransform::identity()).unwrap();
        let d = intrinsic(&fit, &design).unwrap();
        let again = reidentify(&d, &ConstraintSpec::Intrinsic).unwrap();
        prop_assert!((again.beta() - d.beta()).amax() < 1e-12);
        let layout = d.layout();
        let shifted = Decomposition::from_beta(&layout, &(d.beta() + layout.null_vector() * gamma), None, gamma, None);
        let got = drift_report(&d, &shifted).unwrap();
        prop_assert!((got - gamma).abs() < 1e-10);
    }

    #[test]
    fn panel_csv_round_trips(cells in cells_strategy(), seed in any::<u64>()) {
        prop_assume!(!cells.is_empty());
        let grid = panel_from(&cells, seed);
        let back = PanelGrid::from_csv_reader(grid.to_csv_string().as_bytes()).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn frailty_mixture_bounds(h0 in 0.001f64..0.1, tau in 0.5f64..12.0, omega in 0.01f64..2.0) {
        let s = FrailtyScenario { h0, tau, omega, horizon: 48, ..Default::default() };
        let c = simulate_vintage_hazard(&s).unwrap();
        prop_assert_eq!(c.vintage_hazard[0], 0.0);
        for i in 0..c.ages.len() {
            let top = c.account_hazard.iter().map(|q| q[i]).fold(0.0, f64::max);
            prop_assert!(c.vintage_hazard[i] <= top * (1.0 + 1e-12));
        }
        prop_assert!(c.survival.windows(2).all(|w| w[1] <= w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn predicted_vintages_are_conditionally_shrunk(seed in 0u64..10_000, ar in any::<bool>(), sigma2 in 0.005f64..0.1) {
        let (kind, vintage) = if ar {
            (ProcessKind::Ar1, VintageSource::Ar1 { rho: 0.6, sigma2 })
        } else {
            (ProcessKind::IidNormal, VintageSource::Iid { sigma2 })
        };
        let g = generate(&GeneratorSpec { max_age: 6, max_time: 30, seed, vintage, ..Default::default() }).unwrap();
        let fit = fit_random_effects(&g.grid, &ResponseTransform::identity(), kind, &ExogenousHandling::Nonparametric(ConstraintSpec::LastTwoVintagesEqual)).unwrap();
        for (e, b) in fit.shrinkage.iter().zip(&fit.blup) {
            let m = e.conditional_mean;
            prop_assert!((b.value - m).abs() <= (e.conditional_fixed - m).abs() + 1e-8);
        }
        let var = |xs: Vec<f64>| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        prop_assert!(var(fit.shrinkage.iter().map(|e| e.shrunk).collect()) <= var(fit.shrinkage.iter().map(|e| e.fixed).collect()) + 1e-12);
        prop_assert!(fit.process.sigma2_v >= 0.0 && fit.process.rho.abs() < 1.0);
    }

    #[test]
    fn horizon_zero_forecast_is_the_fit(seed in 0u64..10_000, k in -0.03f64..0.03) {
        let g = generate(&GeneratorSpec { max_age: 8, max_time: 30, seed, missing: MissingPattern::Random { p: 0.1 }, ..Default::default() }).unwrap();
        let design = EmvDesign::build(&g.grid).unwrap();
        let fit = fit_linear(&design, &g.grid, &ResponseTransform::identity()).unwrap();
        let a_star = *design.layout().ages.iter().rev().nth(3).unwrap();
        let d = apply_constraint(&fit, &design, &ConstraintSpec::maturity_slope(k, a_star)).unwrap();
        let f = forecast(ForecastSource::Decomposition { decomposition: &d, transform: ResponseTransform::identity(), cells: &fit.cells }, &ForecastSpec::new(0)).unwrap();
        let observed: BTreeSet<(u32, u32)> = fit.cells.iter().copied().collect();
        let got: BTreeSet<(u32, u32)> = f.cells.iter().map(|c| (c.age, c.time)).collect();
        prop_assert_eq!(&got, &observed);
        for (c, y) in f.cells.iter().zip(&fit.fitted) {
            prop_assert!((c.theta_hat - y).abs() < 1e-9);
        }
    }
}
