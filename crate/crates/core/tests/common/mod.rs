#![allow(dead_code)]

use longrun_core::model::{MarketParams, ModelSpec, StateModel, WishartParams};
use longrun_core::spd::SpdMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn one(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Scalar benchmark: K = -1, L = 2, Lambda = 1, zeta = 1, nu = 0.5,
/// r0 = 0.02, r1 = 0.05, p = -1, with a chosen correlation.
pub fn benchmark_rho(rho: f64) -> ModelSpec {
    let w = WishartParams::new(one(-1.0), one(2.0), one(1.0)).unwrap();
    let mk = MarketParams::wishart_constant(0.02, one(0.05), one(1.0), &[0.5], &[rho]).unwrap();
    ModelSpec::new(StateModel::Wishart(w), mk, -1.0).unwrap()
}

pub fn benchmark() -> ModelSpec {
    benchmark_rho(0.0)
}

/// Planar parameters with one asset: `K = C = Lambda = I`, `L = ell I`,
/// `zeta = (1, 0)`, `rho = rho (1, 1)'`, `r1 = r1 I`.
pub fn planar(ell: f64, rho: f64, nu: f64, r0: f64, r1: f64, p: f64) -> ModelSpec {
    let i2 = DMatrix::identity(2, 2);
    let w = WishartParams::new(i2.clone(), &i2 * ell, i2.clone()).unwrap();
    let zeta = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let mk = MarketParams::wishart_constant(r0, &i2 * r1, zeta, &[nu], &[rho, rho]).unwrap();
    ModelSpec::new(StateModel::Wishart(w), mk, p).unwrap()
}

pub fn counterexample() -> ModelSpec {
    planar(2.0, 0.5, 0.5, 0.02, 0.1, -1.0)
}

/// Same state as the counter-example with two assets, `zeta = I`.
pub fn planar_two_assets() -> ModelSpec {
    let i2 = DMatrix::identity(2, 2);
    let w = WishartParams::new(i2.clone(), &i2 * 2.0, i2.clone()).unwrap();
    let mk = MarketParams::wishart_constant(0.02, &i2 * 0.1, i2.clone(), &[0.5, 0.5], &[0.5, 0.5]).unwrap();
    ModelSpec::new(StateModel::Wishart(w), mk, -1.0).unwrap()
}

pub fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn rand_sym(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = rand_mat(d, d, rng);
    (&a + a.transpose()) * 0.5
}

pub fn rand_spd(d: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
    let a = rand_mat(d, d, rng);
    SpdMatrix::from_matrix(&(&a * a.transpose() + DMatrix::identity(d, d) * 0.1)).unwrap()
}

/// Random Wishart specification; `LL' - (d+1) Lambda Lambda'` is made
/// positive definite and `r1` positive semidefinite.
pub fn random_wishart(d: usize, n: usize, p: f64, rng: &mut ChaCha8Rng) -> ModelSpec {
    let lambda = rand_mat(d, d, rng) + DMatrix::identity(d, d) * 0.5;
    let ll = &lambda * lambda.transpose();
    let extra = rand_mat(d, d, rng);
    let target = &ll * (d as f64 + 1.5) + &extra * extra.transpose() + DMatrix::identity(d, d) * 0.1;
    let l = target.cholesky().unwrap().l();
    let k = rand_mat(d, d, rng) * 0.5 - DMatrix::identity(d, d);
    let r1h = rand_mat(d, d, rng) * 0.2;
    let r1 = &r1h * r1h.transpose();
    let mut rho: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = rho.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target_norm = rng.gen_range(0.0..0.9);
    rho.iter_mut().for_each(|v| *v *= target_norm / norm);
    let nu: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let zeta = rand_mat(n, d, rng) + DMatrix::identity(n, d);
    let w = WishartParams::new(k, l, lambda).unwrap();
    let mk = MarketParams::wishart_constant(rng.gen_range(0.0..0.05), r1, zeta, &nu, &rho).unwrap();
    ModelSpec::new(StateModel::Wishart(w), mk, p).unwrap()
}

/// Stabilizing root and growth rate of the scalar Riccati quadratic
/// `a2 M^2 + a1 M + a0 = 0`, `lambda = L^2 M + p r0`.
pub fn scalar_riccati(k: f64, l: f64, lam: f64, zeta: f64, nu: f64, rho: f64, r0: f64, r1: f64, p: f64) -> (f64, f64) {
    let q = p / (p - 1.0);
    let a2 = 2.0 * lam * lam * (1.0 - q * rho * rho);
    let a1 = 2.0 * (k - q * zeta * nu * rho * lam);
    let a0 = p * r1 - 0.5 * q * zeta * zeta * nu * nu;
    let m = (-a1 - (a1 * a1 - 4.0 * a2 * a0).sqrt()) / (2.0 * a2);
    (m, l * l * m + p * r0)
}

/// `sqrt(x) Theta sqrt(x)`: `x` when `d <= n`, else `x zeta' (zeta x zeta')^-1 zeta x`.
pub fn sandwich_theta(x: &DMatrix<f64>, zeta: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = zeta.shape();
    if d <= n {
        x.clone()
    } else {
        let s = zeta * x * zeta.transpose();
        x * zeta.transpose() * s.try_inverse().unwrap() * zeta * x
    }
}

pub struct WishartClosedForms {
    pub bbar: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub abar: DMatrix<f64>,
    pub v: f64,
}

/// Entrywise closed forms for constant-coefficient Wishart markets with
/// `C = I`.
#[allow(clippy::too_many_arguments)]
pub fn wishart_closed_forms(
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    lam: &DMatrix<f64>,
    zeta: &DMatrix<f64>,
    nu: &[f64],
    rho: &[f64],
    r0: f64,
    r1: &DMatrix<f64>,
    p: f64,
    x: &DMatrix<f64>,
) -> WishartClosedForms {
    let d = x.nrows();
    let q = p / (p - 1.0);
    let nu = DMatrix::from_column_slice(nu.len(), 1, nu);
    let rho = DMatrix::from_column_slice(rho.len(), 1, rho);
    let ll = lam * lam.transpose();
    let lrrl = lam * &rho * rho.transpose() * lam.transpose();
    let t = x * zeta.transpose() * &nu * rho.transpose() * lam.transpose();
    let bbar = l * l.transpose() + k * x + x * k.transpose() - &t * q - t.transpose() * q;
    let s = sandwich_theta(x, zeta);
    let dd = d * d;
    let mut a = DMatrix::zeros(dd, dd);
    let mut abar = DMatrix::zeros(dd, dd);
    for i in 0..d {
        for j in 0..d {
            for kk in 0..d {
                for ll_ in 0..d {
                    let r = i * d + j;
                    let c = kk * d + ll_;
                    a[(r, c)] = x[(i, kk)] * ll[(j, ll_)]
                        + x[(i, ll_)] * ll[(j, kk)]
                        + x[(j, kk)] * ll[(i, ll_)]
                        + x[(j, ll_)] * ll[(i, kk)];
                    abar[(r, c)] = a[(r, c)]
                        - q * (s[(i, kk)] * lrrl[(j, ll_)]
                            + s[(i, ll_)] * lrrl[(j, kk)]
                            + s[(j, kk)] * lrrl[(i, ll_)]
                            + s[(j, ll_)] * lrrl[(i, kk)]);
                }
            }
        }
    }
    let zn = zeta.transpose() * &nu;
    let v = p * r0 + 0.5 * p * (x * (r1 + r1.transpose())).trace() - 0.5 * q * (x * &zn * zn.transpose()).trace();
    WishartClosedForms { bbar, a, abar, v }
}

/// Planar example operator on `Tr(M X)`, `X = [[x, y], [y, z]]`,
/// `M = [[m1, m2], [m2, m3]]`; coefficients of `x, y, z, y^2/x` and the
/// constant. The `y` coefficient carries `4 m2 (m1 + m3)` from
/// `2 Tr(x M Lambda Lambda' M)`.
#[allow(clippy::too_many_arguments)]
pub fn planar_f_coeffs(m1: f64, m2: f64, m3: f64, ell: f64, rho: f64, nu: f64, r0: f64, r1: f64, p: f64) -> [f64; 5] {
    let q = p / (p - 1.0);
    let (s12, s23) = (m1 + m2, m2 + m3);
    [
        2.0 * (m1 * m1 + m2 * m2) - 2.0 * q * rho * rho * s12 * s12 + 2.0 * m1 - 2.0 * q * rho * nu * s12 + p * r1
            - 0.5 * q * nu * nu,
        4.0 * m2 * (m1 + m3) - 4.0 * q * rho * rho * s12 * s23 + 4.0 * m2 - 2.0 * q * rho * nu * s23,
        2.0 * (m2 * m2 + m3 * m3) + 2.0 * m3 + p * r1,
        -2.0 * q * rho * rho * s23 * s23,
        p * r0 + ell * ell * (m1 + m3),
    ]
}

pub fn planar_f_value(c: &[f64; 5], x: &DMatrix<f64>) -> f64 {
    let (xx, y, z) = (x[(0, 0)], x[(0, 1)], x[(1, 1)]);
    c[0] * xx + c[1] * y + c[2] * z + c[3] * y * y / xx + c[4]
}

/// For `K = k I`, `Lambda Lambda' = l2 I`, `u = Tr X` solves
/// `du = (Tr LL' + 2 k u) dt + 2 sqrt(l2 u) dW`. Returns `(L u^j, L^2 u^j)`
/// at `u` for `j` in {1, 2}.
pub fn trace_generator(tr_ll: f64, k: f64, l2: f64, u: f64, power: u32) -> (f64, f64) {
    let (al, be, ga) = (tr_ll, 2.0 * k, 4.0 * l2);
    // polynomial coefficients [c0, c1, c2] in u
    let gen = |c: [f64; 3]| -> [f64; 3] {
        [al * c[1], be * c[1] + 2.0 * al * c[2] + ga * c[2], 2.0 * be * c[2]]
    };
    let phi = if power == 1 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let l1 = gen(phi);
    let l2_ = gen(l1);
    let ev = |c: [f64; 3]| c[0] + c[1] * u + c[2] * u * u;
    (ev(l1), ev(l2_))
}
