//! Affine value functions `v(x) = Tr(M x) + m` for constant-coefficient
//! Wishart models: ergodic and finite-horizon Riccati equations, the affine
//! policy, and the coefficient bundle behind the `d > n` counter-example.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::spd::{sqrt_psd, SpdMatrix, SymMatrix};

/// Constant matrices of the affine reduction. With
/// `Abar = K - q Lambda rho nu' zeta`, `S = 2 Lambda (1 - q rho rho') Lambda'`
/// and `Q = (p (r1 + r1') - q zeta' nu nu' zeta) / 2`, the `x`-coefficient of
/// the operator applied to `Tr(M x)` is `M S M + Abar' M + M Abar + Q` when
/// `d <= n`.
#[derive(Clone, Debug)]
pub struct AffineData {
    pub d: usize,
    pub n: usize,
    pub abar: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub q_mat: DMatrix<f64>,
    pub llt: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub lrrl: DMatrix<f64>,
    pub zeta: DMatrix<f64>,
    pub p: f64,
    pub q: f64,
    pub r0: f64,
}

impl AffineData {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let w = spec
            .wishart()
            .ok_or_else(|| Error::Unsupported("affine reduction needs a Wishart state".into()))?;
        if !spec.market.is_constant() {
            return Err(Error::Unsupported(
                "affine reduction needs constant zeta, nu, rho".into(),
            ));
        }
        let x = SpdMatrix::identity(spec.d());
        let zeta = match &spec.market.vol {
            crate::model::Volatility::Factor(z) => z.eval(&x),
            crate::model::Volatility::Direct(_) => {
                return Err(Error::Unsupported("affine reduction needs factor volatility".into()))
            }
        };
        let nu = DVector::from_column_slice(spec.market.nu.eval(&x).as_slice());
        let rho = DVector::from_column_slice(spec.market.rho.eval(&x).as_slice());
        let d = w.d;
        let q = spec.q;
        let p = spec.p;
        let lam = &w.lambda;
        let rrt = &rho * rho.transpose();
        let abar = &w.k - lam * &rho * nu.transpose() * &zeta * q;
        let s = lam * (DMatrix::identity(d, d) - &rrt * q) * lam.transpose() * 2.0;
        let r1 = &spec.market.r1;
        let znnz = zeta.transpose() * &nu * nu.transpose() * &zeta;
        let q_mat = ((r1 + r1.transpose()) * p - znnz * q) * 0.5;
        Ok(AffineData {
            d,
            n: spec.n(),
            abar,
            s: sym(&s),
            q_mat: sym(&q_mat),
            llt: w.llt(),
            lambda: lam.clone(),
            lrrl: sym(&(lam * rrt * lam.transpose())),
            zeta,
            p,
            q,
            r0: spec.market.r0,
        })
    }

    /// `M S M + Abar' M + M Abar + Q`.
    pub fn riccati_rhs(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let out = m * &self.s * m + self.abar.transpose() * m + m * &self.abar + &self.q_mat;
        sym(&out)
    }

    pub fn growth_rate(&self, m: &DMatrix<f64>) -> f64 {
        (&self.llt * m).trace() + self.p * self.r0
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_sym_eig(m: &DMatrix<f64>) -> f64 {
    SymMatrix::symmetrize(m).expect("square").max_eigenvalue()
}

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub mhat: DMatrix<f64>,
    pub lambda_hat: f64,
    /// `Abar + S Mhat`
    pub closed_loop: DMatrix<f64>,
    pub residual_norm: f64,
    /// Largest eigenvalue of the symmetric part of `closed_loop`.
    pub stability_margin: f64,
    pub iterations: usize,
}

fn hypothesis(check: &str, detail: impl Into<String>) -> Error {
    Error::Hypothesis {
        check: check.into(),
        detail: detail.into(),
    }
}

fn check_affine_preconditions(spec: &ModelSpec) -> Result<AffineData> {
    let data = AffineData::from_spec(spec)?;
    if data.d > data.n {
        return Err(hypothesis(
            "d <= n",
            format!("d = {} exceeds n = {}; no affine ergodic solution is available", data.d, data.n),
        ));
    }
    Ok(data)
}

/// Stabilizing solution of `0 = M S M + Abar' M + M Abar + Q`.
pub fn solve_ergodic_riccati(spec: &ModelSpec) -> Result<RiccatiSolution> {
    let data = check_affine_preconditions(spec)?;
    let w = spec.wishart().expect("checked");
    let d = data.d;
    if !(spec.p < 0.0) {
        return Err(hypothesis("p < 0", format!("p = {}", spec.p)));
    }
    let lam_min = SymMatrix::symmetrize(&w.lambda_lambda_t())?.min_eigenvalue();
    if !(lam_min > 0.0) {
        return Err(hypothesis("Lambda Lambda' > 0", format!("min eigenvalue {lam_min:e}")));
    }
    let gap = &data.llt - w.lambda_lambda_t() * (d as f64 + 1.0);
    let gap_min = SymMatrix::symmetrize(&gap)?.min_eigenvalue();
    if !(gap_min > 0.0) {
        return Err(hypothesis(
            "LL' > (d+1) Lambda Lambda'",
            format!("min eigenvalue of the difference {gap_min:e}"),
        ));
    }
    let r1 = &spec.market.r1;
    let r1_min = SymMatrix::symmetrize(&(r1 + r1.transpose()))?.min_eigenvalue();
    if r1_min < -1e-12 {
        return Err(hypothesis("r1 + r1' >= 0", format!("min eigenvalue {r1_min:e}")));
    }

    let (mhat, iterations) = if d == 1 {
        let a = data.abar[(0, 0)];
        let s = data.s[(0, 0)];
        let q = data.q_mat[(0, 0)];
        let disc = a * a - s * q;
        if !(disc > 0.0) || !(s > 0.0) {
            return Err(Error::NumericalAbort(format!(
                "scalar Riccati equation has no stabilizing root (discriminant {disc:e})"
            )));
        }
        // closed loop a + s M = -sqrt(disc) < 0
        (DMatrix::from_element(1, 1, (-a - disc.sqrt()) / s), 0)
    } else {
        newton_kleinman(&data)?
    };
    let closed_loop = &data.abar + &data.s * &mhat;
    let residual_norm = data.riccati_rhs(&mhat).norm();
    let stability_margin = max_sym_eig(&closed_loop);
    Ok(RiccatiSolution {
        lambda_hat: data.growth_rate(&mhat),
        mhat,
        closed_loop,
        residual_norm,
        stability_margin,
        iterations,
    })
}

/// Solves `a' X + X a + c = 0` by Kronecker vectorization.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    // column-major vec: vec(a' X) = (I kron a') vec X, vec(X a) = (a' kron I) vec X
    let op = id.kronecker(&a.transpose()) + a.transpose().kronecker(&id);
    let rhs = DVector::from_column_slice((-c).as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov operator".into()))?;
    Ok(sym(&DMatrix::from_column_slice(d, d, sol.as_slice())))
}

const NEWTON_MAX_ITER: usize = 100;

/// Newton-Kleinman on `Abar' X + X Abar - X S X - Q = 0` with `X = -M`.
fn newton_kleinman(data: &AffineData) -> Result<(DMatrix<f64>, usize)> {
    let d = data.d;
    let b = sqrt_psd(&SymMatrix::symmetrize(&data.s)?).into_matrix();
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("square root of S".into()))?;
    let w_mat = -&data.q_mat;
    // Abar - B F = -I
    let mut f = &b_inv * (&data.abar + DMatrix::identity(d, d));
    let mut x = DMatrix::zeros(d, d);
    let mut last_res = f64::INFINITY;
    for it in 1..=NEWTON_MAX_ITER {
        let acl = &data.abar - &b * &f;
        let c = &w_mat + f.transpose() * &f;
        let x_new = solve_lyapunov(&acl, &c)?;
        let step = (&x_new - &x).norm();
        x = x_new;
        f = b.transpose() * &x;
        last_res = data.riccati_rhs(&(-&x)).norm();
        if !last_res.is_finite() {
            break;
        }
        if step <= 1e-14 * (1.0 + x.norm()) && last_res <= 1e-11 * (1.0 + x.norm()) {
            return Ok((-x, it));
        }
    }
    Err(Error::NoConvergence {
        iterations: NEWTON_MAX_ITER,
        residual: last_res,
    })
}

#[derive(Clone, Debug)]
pub struct HorizonRiccatiPath {
    pub times: Vec<f64>,
    pub m_mats: Vec<DMatrix<f64>>,
    pub m_scalar: Vec<f64>,
    /// Richardson estimate of the sup-norm error of `M` (fixed-step RK4
    /// against the halved step).
    pub richardson_error: f64,
    data: AffineData,
}

fn rk4_step(data: &AffineData, m: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, f64) {
    let k1 = data.riccati_rhs(m);
    let m2 = m + &k1 * (0.5 * dt);
    let k2 = data.riccati_rhs(&m2);
    let m3 = m + &k2 * (0.5 * dt);
    let k3 = data.riccati_rhs(&m3);
    let m4 = m + &k3 * dt;
    let k4 = data.riccati_rhs(&m4);
    let next = m + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0);
    let g = |mm: &DMatrix<f64>| (&data.llt * mm).trace();
    let dm = (g(m) + 2.0 * g(&m2) + 2.0 * g(&m3) + g(&m4)) * dt / 6.0 + data.p * data.r0 * dt;
    (sym(&next), dm)
}

const EXPLOSION_NORM: f64 = 1e8;

fn integrate(data: &AffineData, horizon: f64, dt: f64) -> Result<(Vec<f64>, Vec<DMatrix<f64>>, Vec<f64>)> {
    let steps = (horizon / dt).ceil().max(0.0) as usize;
    let h = if steps > 0 { horizon / steps as f64 } else { 0.0 };
    let mut times = Vec::with_capacity(steps + 1);
    let mut mats = Vec::with_capacity(steps + 1);
    let mut scal = Vec::with_capacity(steps + 1);
    let mut m = DMatrix::zeros(data.d, data.d);
    let mut s = 0.0;
    times.push(0.0);
    mats.push(m.clone());
    scal.push(0.0);
    for k in 1..=steps {
        let (next, dm) = rk4_step(data, &m, h);
        m = next;
        s += dm;
        let norm = m.norm();
        if !(norm <= EXPLOSION_NORM) {
            return Err(Error::Explosion(format!(
                "|M(T)| = {norm:e} exceeds {EXPLOSION_NORM:e} at T = {:.6}",
                k as f64 * h
            )));
        }
        times.push(k as f64 * h);
        mats.push(m.clone());
        scal.push(s);
    }
    Ok((times, mats, scal))
}

/// Integrates `dM/dT = M S M + Abar' M + M Abar + Q`, `dm/dT = Tr(LL'M) + p r0`
/// from `M(0) = 0`, `m(0) = 0`.
pub fn solve_horizon_riccati_ode(spec: &ModelSpec, horizon: f64, dt: f64) -> Result<HorizonRiccatiPath> {
    if !(horizon >= 0.0) || !(dt > 0.0) {
        return Err(Error::param("T/dt", "need T >= 0 and dt > 0"));
    }
    let data = check_affine_preconditions(spec)?;
    let (times, m_mats, m_scalar) = integrate(&data, horizon, dt)?;
    let richardson_error = if horizon > 0.0 {
        let (_, fine, _) = integrate(&data, horizon, dt / 2.0)?;
        let coarse_end = m_mats.last().expect("nonempty");
        let fine_end = fine.last().expect("nonempty");
        (coarse_end - fine_end).amax() / 15.0
    } else {
        0.0
    };
    Ok(HorizonRiccatiPath {
        times,
        m_mats,
        m_scalar,
        richardson_error,
        data,
    })
}

impl HorizonRiccatiPath {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    /// `(M(tau), m(tau))` by cubic Hermite interpolation, using the ODE
    /// right-hand side as node derivatives. `tau` is clamped to the grid.
    pub fn at(&self, tau: f64) -> (DMatrix<f64>, f64) {
        let n = self.times.len();
        if n == 1 || tau <= 0.0 {
            return (self.m_mats[0].clone(), self.m_scalar[0]);
        }
        let t_end = self.times[n - 1];
        if tau >= t_end {
            return (self.m_mats[n - 1].clone(), self.m_scalar[n - 1]);
        }
        let h = self.times[1] - self.times[0];
        let k = ((tau / h).floor() as usize).min(n - 2);
        let t0 = self.times[k];
        let h = self.times[k + 1] - t0;
        let s = (tau - t0) / h;
        let (h00, h10, h01, h11) = (
            2.0 * s * s * s - 3.0 * s * s + 1.0,
            s * s * s - 2.0 * s * s + s,
            -2.0 * s * s * s + 3.0 * s * s,
            s * s * s - s * s,
        );
        let (m0, m1) = (&self.m_mats[k], &self.m_mats[k + 1]);
        let (d0, d1) = (self.data.riccati_rhs(m0), self.data.riccati_rhs(m1));
        let m = m0 * h00 + &d0 * (h10 * h) + m1 * h01 + &d1 * (h11 * h);
        let (s0, s1) = (self.m_scalar[k], self.m_scalar[k + 1]);
        let (e0, e1) = (self.data.growth_rate(m0), self.data.growth_rate(m1));
        let sc = s0 * h00 + e0 * h10 * h + s1 * h01 + e1 * h11 * h;
        (sym(&m), sc)
    }

    /// `v(tau, x) = Tr(M(tau) x) + m(tau)`.
    pub fn value(&self, tau: f64, x: &SpdMatrix) -> f64 {
        let (m, s) = self.at(tau);
        (&m * x.as_matrix()).trace() + s
    }

    pub fn data(&self) -> &AffineData {
        &self.data
    }
}

/// The portfolio of an affine value function `Tr(M x)`.
pub fn affine_policy(spec: &ModelSpec, m: &DMatrix<f64>, x: &SpdMatrix) -> Result<DVector<f64>> {
    spec.pi(x, m)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AffineFCoeffs {
    /// `F[Tr(M x)] = Tr(x * x_coeff) + constant`
    DLeqN { x_coeff: DMatrix<f64>, constant: f64 },
    /// `d = 2`, `n = 1`, `zeta` along the first axis; with `X = [[x, y], [y, z]]`
    /// the operator is `cx x + cy y + cz z + c_yy y^2/x + constant`.
    Planar {
        x: f64,
        y: f64,
        z: f64,
        y2_over_x: f64,
        constant: f64,
    },
}

impl AffineFCoeffs {
    pub fn eval(&self, xm: &DMatrix<f64>) -> f64 {
        match self {
            AffineFCoeffs::DLeqN { x_coeff, constant } => (xm * x_coeff).trace() + constant,
            AffineFCoeffs::Planar {
                x,
                y,
                z,
                y2_over_x,
                constant,
            } => {
                let (xx, yy, zz) = (xm[(0, 0)], xm[(0, 1)], xm[(1, 1)]);
                x * xx + y * yy + z * zz + y2_over_x * yy * yy / xx + constant
            }
        }
    }

    /// The state-dependent coefficients, which all vanish for an ergodic
    /// affine solution.
    pub fn state_coefficients(&self) -> Vec<f64> {
        match self {
            AffineFCoeffs::DLeqN { x_coeff, .. } => {
                let d = x_coeff.nrows();
                let mut out = Vec::new();
                for i in 0..d {
                    for j in i..d {
                        out.push(if i == j { x_coeff[(i, i)] } else { 2.0 * x_coeff[(i, j)] });
                    }
                }
                out
            }
            AffineFCoeffs::Planar { x, y, z, y2_over_x, .. } => vec![*x, *y, *z, *y2_over_x],
        }
    }

    pub fn constant(&self) -> f64 {
        match self {
            AffineFCoeffs::DLeqN { constant, .. } | AffineFCoeffs::Planar { constant, .. } => *constant,
        }
    }
}

fn planar_geometry(data: &AffineData) -> bool {
    data.d == 2 && data.n == 1 && data.zeta[(0, 1)] == 0.0 && data.zeta[(0, 0)] != 0.0
}

/// The coefficients of `F[Tr(M x)]` as a function of `x`.
pub fn eval_affine_f_coeffs(spec: &ModelSpec, m: &DMatrix<f64>) -> Result<AffineFCoeffs> {
    let data = AffineData::from_spec(spec)?;
    let d = data.d;
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::dim("M", format!("{d}x{d}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    let m = sym(m);
    let constant = data.growth_rate(&m);
    if d <= data.n {
        return Ok(AffineFCoeffs::DLeqN {
            x_coeff: data.riccati_rhs(&m),
            constant,
        });
    }
    if !planar_geometry(&data) {
        return Err(Error::Unsupported(format!(
            "affine coefficients for d = {d} > n = {} only for d = 2, n = 1 with zeta = (z, 0)",
            data.n
        )));
    }
    let ll = &data.lambda * data.lambda.transpose();
    let g = sym(&(&m * ll * &m * 2.0 + data.abar.transpose() * &m + &m * &data.abar + &data.q_mat));
    let nn = sym(&(&m * &data.lrrl * &m));
    let q = data.q;
    Ok(AffineFCoeffs::Planar {
        x: g[(0, 0)] - 2.0 * q * nn[(0, 0)],
        y: 2.0 * g[(0, 1)] - 4.0 * q * nn[(0, 1)],
        z: g[(1, 1)],
        y2_over_x: -2.0 * q * nn[(1, 1)],
        constant,
    })
}

#[derive(Clone, Debug)]
pub struct ChainWitness {
    /// Human-readable implication steps.
    pub steps: Vec<String>,
    /// `z`-coefficient once `M2 = M3 = 0` is forced; equals `p r1`.
    pub forced_z_coeff: f64,
    /// Second branch of the `y`-coefficient (`M1 = M2 - 1`): the candidate
    /// matrices making the `z`-coefficient vanish and the residual
    /// `x`-coefficient there.
    pub alternative_branch: Vec<([f64; 3], f64)>,
    pub contradiction: bool,
}

#[derive(Clone, Debug)]
pub struct CounterexampleReport {
    /// Coefficients of `x, y, z, y^2/x` and the constant at the best `M`.
    pub coefficients: [f64; 5],
    pub best_m: DMatrix<f64>,
    /// Minimal sum of squared state-dependent coefficients.
    pub min_residual: f64,
    pub chain: ChainWitness,
    /// Whether the sign restrictions of the example (`l > sqrt 3`,
    /// `0 < 2 rho^2 < 1`, `r1 > 0`) hold.
    pub restrictions_hold: bool,
    pub starts: usize,
}

/// Parameters of the planar counter-example structure.
#[derive(Clone, Copy, Debug)]
pub struct PlanarExample {
    pub ell: f64,
    pub rho: f64,
    pub nu: f64,
    pub r0: f64,
    pub r1: f64,
    pub p: f64,
}

fn is_scaled_identity(m: &DMatrix<f64>, tol: f64) -> Option<f64> {
    let c = m[(0, 0)];
    let diff = m - DMatrix::identity(m.nrows(), m.ncols()) * c;
    (diff.amax() <= tol).then_some(c)
}

/// Recognizes `Lambda = I`, `L = l I`, `K = I`, `C = I`, `zeta = (1, 0)`,
/// `rho = rho (1, 1)'`, `r1 = r1 I`, `n = 1`.
pub fn planar_example_params(spec: &ModelSpec) -> Result<PlanarExample> {
    let data = AffineData::from_spec(spec)?;
    let w = spec.wishart().expect("checked by AffineData");
    let bad = |what: &str| hypothesis("counter-example structure", what.to_string());
    if data.d != 2 || data.n != 1 {
        return Err(bad("need d = 2 and n = 1"));
    }
    let tol = 1e-14;
    if is_scaled_identity(&w.lambda, tol) != Some(1.0) {
        return Err(bad("need Lambda = I"));
    }
    if is_scaled_identity(&w.k, tol) != Some(1.0) {
        return Err(bad("need K = I"));
    }
    let ell = is_scaled_identity(&w.l, tol).ok_or_else(|| bad("need L = l I"))?;
    let r1 = is_scaled_identity(&spec.market.r1, tol).ok_or_else(|| bad("need r1 = r I"))?;
    if (data.zeta[(0, 0)] - 1.0).abs() > tol || data.zeta[(0, 1)].abs() > tol {
        return Err(bad("need zeta = (1, 0)"));
    }
    let x = SpdMatrix::identity(2);
    let rho = spec.market.rho.eval(&x);
    if (rho[(0, 0)] - rho[(1, 0)]).abs() > tol {
        return Err(bad("need rho = r (1, 1)'"));
    }
    let nu = spec.market.nu.eval(&x)[(0, 0)];
    Ok(PlanarExample {
        ell,
        rho: rho[(0, 0)],
        nu,
        r0: spec.market.r0,
        r1,
        p: spec.p,
    })
}

fn planar_residual(spec: &ModelSpec, v: &[f64; 3]) -> [f64; 4] {
    let m = DMatrix::from_row_slice(2, 2, &[v[0], v[1], v[1], v[2]]);
    match eval_affine_f_coeffs(spec, &m).expect("planar geometry checked") {
        AffineFCoeffs::Planar { x, y, z, y2_over_x, .. } => [x, y, z, y2_over_x],
        AffineFCoeffs::DLeqN { .. } => unreachable!("d > n"),
    }
}

fn objective(spec: &ModelSpec, v: &[f64; 3]) -> f64 {
    planar_residual(spec, v).iter().map(|c| c * c).sum()
}

fn num_grad(spec: &ModelSpec, v: &[f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for i in 0..3 {
        let h = 1e-6 * (1.0 + v[i].abs());
        let mut up = *v;
        let mut dn = *v;
        up[i] += h;
        dn[i] -= h;
        g[i] = (objective(spec, &up) - objective(spec, &dn)) / (2.0 * h);
    }
    g
}

fn bfgs(spec: &ModelSpec, start: [f64; 3]) -> ([f64; 3], f64) {
    let mut x = DVector::from_column_slice(&start);
    let as_arr = |v: &DVector<f64>| [v[0], v[1], v[2]];
    let mut fx = objective(spec, &as_arr(&x));
    let mut g = DVector::from_column_slice(&num_grad(spec, &as_arr(&x)));
    let mut h = DMatrix::<f64>::identity(3, 3);
    for _ in 0..500 {
        if g.norm() < 1e-13 || !fx.is_finite() {
            break;
        }
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(3, 3);
            dir = -g.clone();
        }
        // backtracking Armijo search
        let mut step = 1.0;
        let slope = dir.dot(&g);
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * step;
            let fc = objective(spec, &as_arr(&cand));
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else { break };
        let gn = DVector::from_column_slice(&num_grad(spec, &as_arr(&xn)));
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(3, 3);
            let left = &id - &s * y.transpose() * rho;
            let right = &id - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        let done = (fx - fn_).abs() <= 1e-30 + 1e-15 * fx.abs();
        x = xn;
        fx = fn_;
        g = gn;
        if done {
            break;
        }
    }
    let polished = gauss_newton_polish(spec, as_arr(&x));
    let fp = objective(spec, &polished);
    if fp < fx {
        (polished, fp)
    } else {
        (as_arr(&x), fx)
    }
}

/// Levenberg-Marquardt steps on the four residuals.
fn gauss_newton_polish(spec: &ModelSpec, start: [f64; 3]) -> [f64; 3] {
    let mut x = start;
    let mut mu = 1e-6;
    let mut f = objective(spec, &x);
    for _ in 0..50 {
        let r = planar_residual(spec, &x);
        let mut jac = DMatrix::<f64>::zeros(4, 3);
        for i in 0..3 {
            let h = 1e-7 * (1.0 + x[i].abs());
            let mut up = x;
            let mut dn = x;
            up[i] += h;
            dn[i] -= h;
            let (ru, rd) = (planar_residual(spec, &up), planar_residual(spec, &dn));
            for k in 0..4 {
                jac[(k, i)] = (ru[k] - rd[k]) / (2.0 * h);
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        let mut improved = false;
        for _ in 0..20 {
            let sys = &jtj + DMatrix::<f64>::identity(3, 3) * mu;
            let Some(step) = sys.lu().solve(&(-&jtr)) else { break };
            let cand = [x[0] + step[0], x[1] + step[1], x[2] + step[2]];
            let fc = objective(spec, &cand);
            if fc < f {
                x = cand;
                f = fc;
                mu = (mu * 0.3).max(1e-15);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved || f == 0.0 {
            break;
        }
    }
    x
}

pub const COUNTEREXAMPLE_STARTS: usize = 64;

/// Multi-start minimization of the squared state-dependent coefficients of
/// `F[Tr(M x)]` over symmetric `M`, together with the analytic implication
/// chain showing no affine solution exists.
pub fn counterexample_search(spec: &ModelSpec, seed: u64) -> Result<CounterexampleReport> {
    let ex = planar_example_params(spec)?;
    let normal = Normal::new(0.0, 2.0).expect("valid normal");
    let results: Vec<([f64; 3], f64)> = (0..COUNTEREXAMPLE_STARTS)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let start = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
            bfgs(spec, start)
        })
        .collect();
    let (best, min_residual) = results
        .iter()
        .fold(None::<([f64; 3], f64)>, |acc, &(v, f)| match acc {
            Some((_, bf)) if bf <= f => acc,
            _ => Some((v, f)),
        })
        .expect("at least one start");
    let best_m = DMatrix::from_row_slice(2, 2, &[best[0], best[1], best[1], best[2]]);
    let coeffs = eval_affine_f_coeffs(spec, &best_m)?;
    let sc = coeffs.state_coefficients();
    let chain = chain_witness(spec, &ex)?;
    let restrictions_hold =
        ex.ell > 3f64.sqrt() && 2.0 * ex.rho * ex.rho > 0.0 && 2.0 * ex.rho * ex.rho < 1.0 && ex.r1 > 0.0;
    Ok(CounterexampleReport {
        coefficients: [sc[0], sc[1], sc[2], sc[3], coeffs.constant()],
        best_m,
        min_residual,
        chain,
        restrictions_hold,
        starts: COUNTEREXAMPLE_STARTS,
    })
}

fn chain_witness(spec: &ModelSpec, ex: &PlanarExample) -> Result<ChainWitness> {
    let q = spec.q;
    let mut steps = vec![format!(
        "y^2/x coefficient = -2 q rho^2 (M2 + M3)^2 with q rho^2 = {:.6e} != 0 forces M3 = -M2",
        q * ex.rho * ex.rho
    )];
    steps.push("with M3 = -M2 the y coefficient reduces to 4 M2 (M1 - M2 + 1), so M2 = 0 or M1 = M2 - 1".into());
    let forced = planar_residual(spec, &[0.0, 0.0, 0.0])[2];
    steps.push(format!(
        "branch M2 = 0: M3 = 0 and the z coefficient is p r1 = {forced:.10}"
    ));
    // branch M1 = M2 - 1: z coefficient 4 M2^2 - 2 M2 + p r1 = 0
    let pr1 = ex.p * ex.r1;
    let disc = 4.0 - 16.0 * pr1;
    let mut alternative_branch = Vec::new();
    if disc >= 0.0 {
        for sgn in [1.0, -1.0] {
            let m2 = (2.0 + sgn * disc.sqrt()) / 8.0;
            let v = [m2 - 1.0, m2, -m2];
            let res = planar_residual(spec, &v);
            alternative_branch.push((v, res[0]));
        }
    }
    let alt_closed = alternative_branch.iter().all(|(_, xc)| xc.abs() > 1e-12);
    if disc >= 0.0 {
        steps.push(format!(
            "branch M1 = M2 - 1: z coefficient vanishes only at M2 in {{{}}}, where the x coefficient is {{{}}}",
            alternative_branch
                .iter()
                .map(|(v, _)| format!("{:.10}", v[1]))
                .collect::<Vec<_>>()
                .join(", "),
            alternative_branch
                .iter()
                .map(|(_, xc)| format!("{xc:.10}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    } else {
        steps.push("branch M1 = M2 - 1: z coefficient has no real root".into());
    }
    let contradiction = forced.abs() > 1e-12 && alt_closed;
    Ok(ChainWitness {
        steps,
        forced_z_coeff: forced,
        alternative_branch,
        contradiction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MarketParams, StateModel, WishartParams};

    fn scalar(k: f64, r1: f64, nu: f64) -> ModelSpec {
        let w = WishartParams::new(
            DMatrix::from_element(1, 1, k),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let mk = MarketParams::wishart_constant(
            0.02,
            DMatrix::from_element(1, 1, r1),
            DMatrix::from_element(1, 1, 1.0),
            &[nu],
            &[0.0],
        )
        .unwrap();
        ModelSpec::new(StateModel::Wishart(w), mk, -1.0).unwrap()
    }

    #[test]
    fn scalar_root() {
        let sol = solve_ergodic_riccati(&scalar(-1.0, 0.05, 0.5)).unwrap();
        let m = sol.mhat[(0, 0)];
        // 2M^2 - 2M - 0.1125 = 0, stabilizing root
        let oracle = (2.0 - 4.9f64.sqrt()) / 4.0;
        assert!((m - oracle).abs() < 1e-14);
        assert!((sol.lambda_hat - (4.0 * oracle - 0.02)).abs() < 1e-14);
        assert!(sol.stability_margin < 0.0);
    }

    #[test]
    fn zero_forcing() {
        let sol = solve_ergodic_riccati(&scalar(-1.0, 0.0, 0.0)).unwrap();
        assert_eq!(sol.mhat[(0, 0)], 0.0);
        assert!((sol.lambda_hat + 0.02).abs() < 1e-15);
    }

    #[test]
    fn refuses_positive_p() {
        let spec = scalar(-1.0, 0.05, 0.5);
        let spec = ModelSpec::new(spec.state.clone(), spec.market.clone(), 0.5).unwrap();
        assert!(matches!(solve_ergodic_riccati(&spec), Err(Error::Hypothesis { .. })));
    }

    #[test]
    fn lyapunov_residual() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.1, -2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let x = solve_lyapunov(&a, &c).unwrap();
        let res = a.transpose() * &x + &x * &a + c;
        assert!(res.norm() < 1e-14);
    }

    #[test]
    fn horizon_start_and_first_step() {
        let spec = scalar(-1.0, 0.05, 0.5);
        let path = solve_horizon_riccati_ode(&spec, 0.0, 1e-3).unwrap();
        assert_eq!(path.m_mats[0][(0, 0)], 0.0);
        assert_eq!(path.m_scalar[0], 0.0);
        let data = AffineData::from_spec(&spec).unwrap();
        let rhs = data.riccati_rhs(&DMatrix::zeros(1, 1));
        assert!((rhs[(0, 0)] - 0.5 * (-0.1 - 0.5 * 0.25)).abs() < 1e-15);
        let path = solve_horizon_riccati_ode(&spec, 1e-3, 1e-3).unwrap();
        let euler = 1e-3 * rhs[(0, 0)];
        assert!((path.m_mats[1][(0, 0)] - euler).abs() < 10.0 * 1e-6);
        assert!((path.m_scalar[1] - 1e-3 * (-0.02)).abs() < 10.0 * 1e-6);
    }

    #[test]
    fn horizon_interpolation_hits_nodes() {
        let spec = scalar(-1.0, 0.05, 0.5);
        let path = solve_horizon_riccati_ode(&spec, 1.0, 1e-2).unwrap();
        let (m, s) = path.at(path.times[37]);
        assert!((m[(0, 0)] - path.m_mats[37][(0, 0)]).abs() < 1e-15);
        assert!((s - path.m_scalar[37]).abs() < 1e-15);
        assert!(path.richardson_error < 1e-10);
    }

    #[test]
    fn explosion_detected() {
        // p in (0,1) with a positive forcing term explodes in finite time
        let w = WishartParams::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let mk = MarketParams::wishart_constant(0.0, DMatrix::from_element(1, 1, 5.0), DMatrix::from_element(1, 1, 1.0), &[0.5], &[0.0]).unwrap();
        let spec = ModelSpec::new(StateModel::Wishart(w), mk, 0.5).unwrap();
        assert!(matches!(solve_horizon_riccati_ode(&spec, 10.0, 1e-3), Err(Error::Explosion(_))));
    }

    #[test]
    fn unsupported_geometry() {
        let w = WishartParams::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 3.0, DMatrix::identity(3, 3)).unwrap();
        let mk = MarketParams::wishart_constant(0.0, DMatrix::zeros(3, 3), DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]), &[0.1], &[0.0, 0.0, 0.0]).unwrap();
        let spec = ModelSpec::new(StateModel::Wishart(w), mk, -1.0).unwrap();
        assert!(matches!(eval_affine_f_coeffs(&spec, &DMatrix::zeros(3, 3)), Err(Error::Unsupported(_))));
        assert!(matches!(solve_ergodic_riccati(&spec), Err(Error::Hypothesis { .. })));
    }
}
