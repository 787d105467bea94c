use longrun_core::spd::{project_to_spd, sqrt_spd, trace_product, SpdMatrix, SymMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd(d: usize, entries: &[f64], shift: f64) -> SpdMatrix {
    let a = DMatrix::from_row_slice(d, d, &entries[..d * d]);
    SpdMatrix::from_matrix(&(&a * a.transpose() + DMatrix::identity(d, d) * shift)).unwrap()
}

fn sym(d: usize, entries: &[f64]) -> SymMatrix {
    let a = DMatrix::from_row_slice(d, d, &entries[..d * d]);
    SymMatrix::symmetrize(&(&a + a.transpose())).unwrap()
}

proptest! {
    #[test]
    fn sqrt_squares_back(d in 1usize..=4, e in prop::collection::vec(-3.0f64..3.0, 16), s in 1e-3f64..2.0) {
        let x = spd(d, &e, s);
        let r = sqrt_spd(&x);
        prop_assert!(r.as_sym().min_eigenvalue() > 0.0);
        let err = (r.as_matrix() * r.as_matrix() - x.as_matrix()).norm();
        prop_assert!(err <= 1e-12 * (1.0 + x.frobenius_norm()), "err {err}");
    }

    #[test]
    fn projection_idempotent_and_floored(d in 1usize..=4, e in prop::collection::vec(-3.0f64..3.0, 16), floor in 1e-8f64..1e-1) {
        let x = sym(d, &e);
        let p = project_to_spd(&x, floor).unwrap();
        prop_assert!(p.as_sym().min_eigenvalue() >= floor * (1.0 - 1e-9));
        let pp = project_to_spd(p.as_sym(), floor).unwrap();
        prop_assert!((pp.as_matrix() - p.as_matrix()).norm() <= 1e-12 * (1.0 + p.frobenius_norm()));
        // clipping moves no farther than the eigenvalue shortfall
        let shortfall: f64 = x.eigenvalues().iter().map(|v| (floor - v).max(0.0).powi(2)).sum::<f64>().sqrt();
        prop_assert!((p.as_matrix() - x.as_matrix()).norm() <= shortfall * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn trace_product_cyclic(d in 1usize..=4, e in prop::collection::vec(-2.0f64..2.0, 48)) {
        let m: Vec<DMatrix<f64>> = (0..3).map(|k| DMatrix::from_row_slice(d, d, &e[16 * k..16 * k + d * d])).collect();
        let t0 = trace_product(&[&m[0], &m[1], &m[2]]).unwrap();
        let t1 = trace_product(&[&m[1], &m[2], &m[0]]).unwrap();
        let t2 = trace_product(&[&m[2], &m[0], &m[1]]).unwrap();
        let scale = 1.0 + m.iter().map(|a| a.norm()).product::<f64>();
        prop_assert!((t0 - t1).abs() <= 1e-13 * scale);
        prop_assert!((t0 - t2).abs() <= 1e-13 * scale);
    }

    #[test]
    fn svec_round_trip(d in 1usize..=4, e in prop::collection::vec(-3.0f64..3.0, 16)) {
        let x = sym(d, &e);
        let v = x.svec();
        prop_assert!((v.norm() - x.frobenius_norm()).abs() <= 1e-12 * (1.0 + x.frobenius_norm()));
        let back = SymMatrix::from_svec(d, &v).unwrap();
        prop_assert!((back.as_matrix() - x.as_matrix()).amax() <= 1e-14 * (1.0 + x.frobenius_norm()));
    }
}

#[test]
fn projection_examples() {
    let x = SymMatrix::from_diagonal(&[1.0, -1.0]);
    let p = project_to_spd(&x, 1e-10).unwrap();
    assert_eq!(p.as_matrix()[(1, 1)], 1e-10);
    assert_eq!(p.as_matrix()[(0, 0)], 1.0);
    assert!(project_to_spd(&x, 0.0).is_err());
    assert!(SpdMatrix::from_matrix(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
}
