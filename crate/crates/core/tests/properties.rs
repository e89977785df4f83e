use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use sponsored_market::delay_stability::{
    default_omega_grid, delay_independent_certificate, integrate_delayed, linearize_at, small_delay_stability, DelaySpec,
    InitialHistory,
};
use sponsored_market::geometry::{box_planes, max_violation, project_polygon};
use sponsored_market::market_model::{
    mu_payoff_vector, CspParams, CspStrategy, MarketParams, MnoStrategy, PopulationState, ProviderStrategy,
};
use sponsored_market::ne_search::project_simplex;
use sponsored_market::replicator::{
    follower_equilibrium, integrate_replicator, potential_value, replicator_rhs, FollowerConfig, Integrator, OdeConfig,
};

#[derive(Debug, Clone)]
struct Case {
    p: MarketParams<f64>,
    a: ProviderStrategy<f64>,
    x: PopulationState<f64>,
}

fn csp() -> impl Strategy<Value = (CspParams<f64>, CspStrategy<f64>, f64)> {
    (0.5..3.0f64, 0.1..3.0f64, 1.0..5.0f64, 0.0..1.0f64, 1e4..1e7f64, 0.05..1.0f64).prop_map(|(g1, g2, o, th, b, w)| {
        (CspParams { gamma1: g1, gamma2: g2, overhead: o, sigma: 10.0, budget_cap: 1e4 }, CspStrategy { theta: th, bandwidth: b }, w)
    })
}

fn market() -> impl Strategy<Value = Case> {
    (prop::collection::vec(csp(), 1..=4), 100usize..20000, 0.0..25.0f64, any::<bool>(), 0.05..1.0f64).prop_map(
        |(cs, n, pu, opt_out, w0)| {
            let mut w: Vec<f64> = std::iter::once(if opt_out { w0 } else { 0.0 }).chain(cs.iter().map(|c| c.2)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            Case {
                p: MarketParams { population: n, csps: cs.iter().map(|c| c.0).collect(), pu_cap: 30.0, pc_cap: 1.0, opt_out_allowed: opt_out },
                a: ProviderStrategy { mno: MnoStrategy { pu, pc: 0.0 }, csps: cs.iter().map(|c| c.1).collect() },
                x: PopulationState::new_unchecked(w),
            }
        },
    )
}

fn ode(t_max: f64) -> OdeConfig<f64> {
    OdeConfig { dt: 0.01, t_max, method: Integrator::Rk4, convergence_tol: 1e-10, record_stride: 1 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rates_sum_to_zero(c in market()) {
        let pi = mu_payoff_vector(&c.x, &c.a, &c.p).unwrap();
        let rates = replicator_rhs(&c.x, &pi);
        let scale = pi.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(rates.iter().sum::<f64>().abs() <= 1e-13 * scale);
    }

    #[test]
    fn trajectories_stay_on_simplex_and_climb_potential(c in market()) {
        let tr = integrate_replicator(&c.x, &c.a, &c.p, &ode(20.0)).unwrap();
        for x in &tr.states {
            prop_assert!((x.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(x.shares.iter().all(|s| *s >= 0.0));
        }
        for w in tr.diagnostics.windows(2) {
            prop_assert!(w[1].potential >= w[0].potential - 1e-9 * w[0].potential.abs().max(1.0));
        }
    }

    #[test]
    fn potential_gradient_is_the_payoff_vector(c in market()) {
        let pi = mu_payoff_vector(&c.x, &c.a, &c.p).unwrap();
        let h = 1e-6;
        for i in 0..c.x.shares.len() {
            let shift = |s: f64| {
                let mut v = c.x.shares.clone();
                v[i] += s;
                potential_value(&PopulationState::new_unchecked(v), &c.a, &c.p).unwrap()
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            prop_assert!((fd - pi[i]).abs() <= 1e-5 * pi[i].abs().max(1.0), "coordinate {}: {} vs {}", i, fd, pi[i]);
        }
    }

    #[test]
    fn simplex_projection_is_the_nearest_point(v in prop::collection::vec(-3.0..3.0f64, 2..6), opt_out in any::<bool>(),
                                              probes in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 6), 8)) {
        let x = project_simplex(&v, opt_out);
        prop_assert!((x.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(x.shares.iter().all(|s| *s >= 0.0));
        if !opt_out {
            prop_assert_eq!(x.shares[0], 0.0);
        }
        let again = project_simplex(&x.shares, opt_out);
        prop_assert!(again.dist_inf(&x) <= 1e-12);
        let start = usize::from(!opt_out);
        for q in &probes {
            let mut y: Vec<f64> = q[..v.len()].to_vec();
            y.iter_mut().take(start).for_each(|e| *e = 0.0);
            let s: f64 = y.iter().sum();
            if s <= 0.0 {
                continue;
            }
            y.iter_mut().for_each(|e| *e /= s);
            let inner: f64 = (0..v.len()).map(|i| (v[i] - x.shares[i]) * (y[i] - x.shares[i])).sum();
            prop_assert!(inner <= 1e-10);
        }
    }

    #[test]
    fn box_projection_is_coordinate_clamp(z in (-5.0..5.0f64, -5.0..5.0f64), lo in (-2.0..0.0f64, -2.0..0.0f64),
                                          span in (0.1..3.0f64, 0.1..3.0f64), w in (0.1..10.0f64, 0.1..10.0f64)) {
        let (lo, hi) = ([lo.0, lo.1], [lo.0 + span.0, lo.1 + span.1]);
        let planes = box_planes(lo, hi);
        let y = project_polygon([z.0, z.1], &planes, [w.0, w.1]).unwrap();
        prop_assert!(max_violation(y, &planes) <= 1e-12);
        assert_abs_diff_eq!(y[0], z.0.clamp(lo[0], hi[0]), epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], z.1.clamp(lo[1], hi[1]), epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_delay_matches_undelayed(c in market()) {
        let cfg = OdeConfig { convergence_tol: 0.0, ..ode(5.0) };
        let plain = integrate_replicator(&c.x, &c.a, &c.p, &cfg).unwrap();
        let delayed =
            integrate_delayed(&InitialHistory::Constant(c.x.clone()), &DelaySpec::uniform(c.p.n_csp(), 0.0), &c.a, &c.p, &cfg).unwrap();
        prop_assert!(plain.terminal().dist_inf(delayed.terminal()) <= 1e-9);
    }

    #[test]
    fn certificate_implies_undelayed_stability(c in market()) {
        let Ok(x) = follower_equilibrium(&c.x, &c.a, &c.p, &FollowerConfig::default()) else { return Ok(()) };
        let Ok(lin) = linearize_at(&x, &c.a, &c.p, 1e-6) else { return Ok(()) };
        if delay_independent_certificate(&lin, &default_omega_grid()).is_some() {
            prop_assert!(small_delay_stability(&lin));
        }
    }
}

#[test]
fn f32_trajectory_tracks_f64() {
    let p64 = MarketParams {
        population: 2000,
        csps: vec![
            CspParams { gamma1: 1.7, gamma2: 0.3, overhead: 2.0, sigma: 10.0, budget_cap: 1e4 },
            CspParams { gamma1: 1.2, gamma2: 0.2, overhead: 3.0, sigma: 10.0, budget_cap: 1e4 },
        ],
        pu_cap: 10.0,
        pc_cap: 1.0,
        opt_out_allowed: true,
    };
    let a64 = ProviderStrategy {
        mno: MnoStrategy { pu: 2.0, pc: 0.0 },
        csps: vec![CspStrategy { theta: 0.3, bandwidth: 5e5 }, CspStrategy { theta: 0.0, bandwidth: 8e5 }],
    };
    let x64 = PopulationState::barycenter(2, true);
    let p32 = MarketParams {
        population: p64.population,
        csps: p64
            .csps
            .iter()
            .map(|c| CspParams { gamma1: c.gamma1 as f32, gamma2: c.gamma2 as f32, overhead: c.overhead as f32, sigma: c.sigma as f32, budget_cap: c.budget_cap as f32 })
            .collect(),
        pu_cap: 10.0f32,
        pc_cap: 1.0,
        opt_out_allowed: true,
    };
    let a32 = ProviderStrategy::<f32>::from_slice(&a64.to_vec().iter().map(|v| *v as f32).collect::<Vec<_>>()).unwrap();
    let x32 = PopulationState::<f32>::barycenter(2, true);
    let t64 = integrate_replicator(&x64, &a64, &p64, &OdeConfig { convergence_tol: 0.0, ..ode(30.0) }).unwrap();
    let cfg32 = OdeConfig { dt: 0.01f32, t_max: 30.0, method: Integrator::Rk4, convergence_tol: 0.0, record_stride: 1 };
    let t32 = integrate_replicator(&x32, &a32, &p32, &cfg32).unwrap();
    for (u, v) in t32.terminal().shares.iter().zip(&t64.terminal().shares) {
        assert_abs_diff_eq!(*u as f64, *v, epsilon = 1e-3);
    }
    assert!(t32.diagnostics.iter().all(|d| d.rate_sum.abs() <= 1e-3));
}
