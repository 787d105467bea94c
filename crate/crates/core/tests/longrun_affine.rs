mod common;

use common::*;
use longrun_core::longrun_affine::{
    counterexample_search, eval_affine_f_coeffs, planar_example_params, solve_ergodic_riccati, solve_horizon_riccati_ode,
    solve_lyapunov, AffineFCoeffs,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scalar_riccati_matches_quadratic_root(
        k in -2.0f64..0.5,
        l in 1.6f64..3.0,
        zeta in 0.5f64..2.0,
        nu in -0.8f64..0.8,
        rho in -0.8f64..0.8,
        r1 in 0.0f64..0.2,
        p in -3.0f64..-0.2,
    ) {
        let w = longrun_core::model::WishartParams::new(one(k), one(l), one(1.0)).unwrap();
        let mk = longrun_core::model::MarketParams::wishart_constant(0.02, one(r1), one(zeta), &[nu], &[rho]).unwrap();
        let spec = longrun_core::model::ModelSpec::new(longrun_core::model::StateModel::Wishart(w), mk, p).unwrap();
        let (m, lam) = scalar_riccati(k, l, 1.0, zeta, nu, rho, 0.02, r1, p);
        match solve_ergodic_riccati(&spec) {
            Ok(sol) => {
                prop_assert!((sol.mhat[(0, 0)] - m).abs() <= 1e-10 * (1.0 + m.abs()));
                prop_assert!((sol.lambda_hat - lam).abs() <= 1e-10 * (1.0 + lam.abs()));
                prop_assert!(sol.stability_margin < 0.0);
            }
            Err(e) => prop_assert!(m.is_nan(), "solver failed ({e}) where a root exists: {m}"),
        }
    }

    #[test]
    fn random_riccati_residual_and_stability(seed in any::<u64>(), d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_wishart(d, d, -1.0, &mut rng);
        if let Ok(sol) = solve_ergodic_riccati(&spec) {
            prop_assert!(sol.residual_norm <= 1e-10 * (1.0 + sol.mhat.norm()));
            prop_assert!(sol.stability_margin < 0.0);
            let coeffs = eval_affine_f_coeffs(&spec, &sol.mhat).unwrap();
            prop_assert!(coeffs.state_coefficients().iter().all(|c| c.abs() <= 1e-9));
            prop_assert!((coeffs.constant() - sol.lambda_hat).abs() <= 1e-12 * (1.0 + sol.lambda_hat.abs()));
        }
    }
}

#[test]
fn lyapunov_solves_its_equation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_mat(3, 3, &mut rng) - DMatrix::identity(3, 3) * 2.0;
    let c = rand_sym(3, &mut rng);
    let x = solve_lyapunov(&a, &c).unwrap();
    let r = a.transpose() * &x + &x * &a + &c;
    assert!(r.amax() <= 1e-12, "{}", r.amax());
}

#[test]
fn horizon_ode_converges_monotonically() {
    let spec = benchmark();
    let sol = solve_ergodic_riccati(&spec).unwrap();
    let ode = solve_horizon_riccati_ode(&spec, 50.0, 1e-3).unwrap();
    let gaps: Vec<f64> = (1..=50).map(|t| (ode.at(t as f64).0 - &sol.mhat).norm()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    let (_, m50) = ode.at(50.0);
    let (_, m49) = ode.at(49.0);
    assert!((m50 - m49 - sol.lambda_hat).abs() <= 1e-6);
    assert!(gaps[49] <= 1e-6);
    assert!(ode.richardson_error <= 1e-10);
}

#[test]
fn ergodic_coefficients_vanish() {
    let spec = planar_two_assets();
    let sol = solve_ergodic_riccati(&spec).unwrap();
    match eval_affine_f_coeffs(&spec, &sol.mhat).unwrap() {
        AffineFCoeffs::DLeqN { x_coeff, constant } => {
            assert!(x_coeff.amax() <= 1e-10, "{x_coeff}");
            assert!((constant - sol.lambda_hat).abs() <= 1e-12);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn planar_coefficients_match_oracle() {
    let spec = counterexample();
    let ex = planar_example_params(&spec).unwrap();
    assert_eq!((ex.ell, ex.rho, ex.nu, ex.r1, ex.p), (2.0, 0.5, 0.5, 0.1, -1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let m = rand_sym(2, &mut rng);
        let oracle = planar_f_coeffs(m[(0, 0)], m[(0, 1)], m[(1, 1)], 2.0, 0.5, 0.5, 0.02, 0.1, -1.0);
        let got = eval_affine_f_coeffs(&spec, &m).unwrap();
        let mut all = got.state_coefficients();
        all.push(got.constant());
        for (a, b) in all.iter().zip(oracle) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{all:?} vs {oracle:?}");
        }
    }
}

#[test]
fn counterexample_has_no_affine_solution() {
    let rep = counterexample_search(&counterexample(), 7).unwrap();
    assert!(rep.restrictions_hold);
    let pinned = 4.2367886605956326e-7;
    assert!((rep.min_residual - pinned).abs() <= 1e-6 * pinned, "{:.17e}", rep.min_residual);
    assert_eq!(rep.chain.forced_z_coeff, -0.1);
    assert!(rep.chain.contradiction);
    assert!(rep.chain.alternative_branch.iter().all(|(_, x)| x.abs() > 1e-3));

    let flat = counterexample_search(&planar(2.0, 0.5, 0.5, 0.02, 0.0, -1.0), 7).unwrap();
    assert!(flat.min_residual <= 1e-12, "{:e}", flat.min_residual);
}

#[test]
fn wide_state_is_rejected_by_riccati() {
    let err = solve_ergodic_riccati(&counterexample()).unwrap_err();
    assert!(err.to_string().contains("d <= n"), "{err}");
}
