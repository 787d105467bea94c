mod common;

use common::*;
use longrun_core::longrun_affine::solve_horizon_riccati_ode;
use longrun_core::simulate::{
    mc_longrun_convergence, mc_path_identities, mc_supermartingale, pairwise_sum, simulate_correlated_drivers,
    simulate_state, McEstimate, RngStreamSpec,
};
use longrun_core::spd::SpdMatrix;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scalar_mean_follows_euler_recursion() {
    let spec = benchmark();
    let x0 = SpdMatrix::from_matrix(&one(0.5)).unwrap();
    let (dt, steps) = (0.01, 100);
    let ends: Vec<f64> = (0..4000)
        .map(|i| simulate_state(&spec, &x0, 1.0, dt, RngStreamSpec::new(21, i)).unwrap().x[steps].as_matrix()[(0, 0)])
        .collect();
    // E[X_{k+1}] = E[X_k] + dt (L^2 + 2 K E[X_k]) while the projection is idle
    let mut m = 0.5;
    for _ in 0..steps {
        m += dt * (4.0 - 2.0 * m);
    }
    let est = McEstimate::from_samples(&ends, dt);
    assert!(est.within(m, 3.0), "{} vs {m} (s.e. {})", est.mean, est.standard_error);
}

#[test]
fn path_identities_hold_at_fine_steps() {
    let spec = benchmark_rho(0.5);
    let x0 = SpdMatrix::from_matrix(&one(1.0)).unwrap();
    let ode = solve_horizon_riccati_ode(&spec, 1.0, 1e-4).unwrap();
    let stats = mc_path_identities(&spec, &x0, 1.0, 1e-4, 200, 7, &ode).unwrap();
    assert!(stats.median_wealth <= 5e-3, "{stats:?}");
    assert!(stats.median_deflator <= 5e-3, "{stats:?}");
}

#[test]
fn uncorrelated_scalar_policies_coincide() {
    let spec = benchmark();
    let x0 = SpdMatrix::from_matrix(&one(1.0)).unwrap();
    let rows = mc_longrun_convergence(&spec, &x0, 1.0, &[2.0, 5.0], 200, 1e-2, 3).unwrap();
    for r in rows {
        assert_eq!(r.sup_ratio.mean, 0.0);
        assert_eq!(r.strategy_distance.mean, 0.0);
    }
}

#[test]
fn paths_are_reproducible_per_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = random_wishart(2, 2, -1.0, &mut rng);
    let x0 = rand_spd(2, &mut rng);
    let a = simulate_state(&spec, &x0, 0.5, 1e-2, RngStreamSpec::new(9, 3)).unwrap();
    let b = simulate_state(&spec, &x0, 0.5, 1e-2, RngStreamSpec::new(9, 3)).unwrap();
    let c = simulate_state(&spec, &x0, 0.5, 1e-2, RngStreamSpec::new(9, 4)).unwrap();
    assert_eq!(a.x.len(), 51);
    for (p, q) in a.x.iter().zip(&b.x) {
        assert_eq!(p.as_matrix(), q.as_matrix());
    }
    assert_ne!(a.x[50].as_matrix(), c.x[50].as_matrix());
    let dz = simulate_correlated_drivers(&spec, &a).unwrap();
    assert_eq!(dz.len(), 50);
    assert_eq!(dz[0].len(), 2);
}

#[test]
fn states_stay_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for s in 0..5 {
        let spec = random_wishart(2, 1, -1.0, &mut rng);
        let x0 = SpdMatrix::from_matrix(&(DMatrix::identity(2, 2) * 1e-3)).unwrap();
        let path = simulate_state(&spec, &x0, 1.0, 5e-2, RngStreamSpec::new(s, 0)).unwrap();
        assert!(path.x.iter().all(|x| x.as_sym().min_eigenvalue() > 0.0));
    }
}

#[test]
fn deflated_wealth_is_a_supermartingale() {
    let spec = benchmark_rho(0.5);
    let x0 = SpdMatrix::from_matrix(&one(1.0)).unwrap();
    let rep = mc_supermartingale(&spec, &x0, 1.0, &[0.2], 20_000, 1e-2, 13).unwrap();
    assert!(rep.deflated_wealth.mean <= 1.0 + 3.0 * rep.deflated_wealth.standard_error, "{rep:?}");
    assert!(rep.numeraire.mean <= 1.0 + 3.0 * rep.numeraire.standard_error, "{rep:?}");
    assert_eq!(rep.admissible_fraction, 1.0);
}

#[test]
fn pairwise_sum_is_exact_on_integers() {
    let v: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
    assert_eq!(pairwise_sum(&v), 500_500.0);
    let e = McEstimate::from_samples(&[1.0, 1.0, 1.0], 0.1);
    assert_eq!((e.mean, e.standard_error), (1.0, 0.0));
}
