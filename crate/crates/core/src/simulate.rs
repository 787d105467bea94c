//! Monte Carlo for the state, the correlated asset drivers, wealth, deflators
//! and the stochastic exponential `Z^{phi,T}`.
//!
//! Every path owns a ChaCha8 stream selected by `(master_seed, stream_id)`.
//! Per step the stream yields the `d x d` driver increment row-major, then
//! the `m` independent increments, so paths are reproducible under any
//! schedule and horizons sharing a step size share increments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::longrun_affine::{solve_ergodic_riccati, solve_horizon_riccati_ode, HorizonRiccatiPath};
use crate::model::{MarketCoeffs, ModelSpec, PolicyBranch, StateCoeffs, StateModel, Volatility};
use crate::spd::{project_to_spd, SpdMatrix, SymMatrix};

pub const EXPLOSION_NORM: f64 = 1e10;
pub const PROJECTION_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RngStreamSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStreamSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RngStreamSpec { master_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.master_seed);
        r.set_stream(self.stream_id);
        r
    }
}

/// A time-dependent value function `phi(tau, x)` with its matrix gradient.
pub trait PhiFunction: Sync {
    fn value(&self, tau: f64, x: &SpdMatrix) -> f64;
    fn grad(&self, tau: f64, x: &SpdMatrix) -> DMatrix<f64>;
    /// The gradient when it does not depend on the state.
    fn affine_grad(&self, _tau: f64) -> Option<DMatrix<f64>> {
        None
    }
}

/// `phi(tau, x) = lambda tau + Tr(M x)`.
#[derive(Clone, Debug)]
pub struct ErgodicAffine {
    pub mhat: DMatrix<f64>,
    pub lambda_hat: f64,
}

impl ErgodicAffine {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let sol = solve_ergodic_riccati(spec)?;
        Ok(ErgodicAffine {
            mhat: sol.mhat,
            lambda_hat: sol.lambda_hat,
        })
    }
}

impl PhiFunction for ErgodicAffine {
    fn value(&self, tau: f64, x: &SpdMatrix) -> f64 {
        self.lambda_hat * tau + (&self.mhat * x.as_matrix()).trace()
    }
    fn grad(&self, _tau: f64, _x: &SpdMatrix) -> DMatrix<f64> {
        self.mhat.clone()
    }
    fn affine_grad(&self, _tau: f64) -> Option<DMatrix<f64>> {
        Some(self.mhat.clone())
    }
}

impl PhiFunction for HorizonRiccatiPath {
    fn value(&self, tau: f64, x: &SpdMatrix) -> f64 {
        HorizonRiccatiPath::value(self, tau, x)
    }
    fn grad(&self, tau: f64, _x: &SpdMatrix) -> DMatrix<f64> {
        self.at(tau).0
    }
    fn affine_grad(&self, tau: f64) -> Option<DMatrix<f64>> {
        Some(self.at(tau).0)
    }
}

/// A value function given by closures.
pub struct FnPhi<V, G> {
    pub value: V,
    pub grad: G,
}

impl<V, G> PhiFunction for FnPhi<V, G>
where
    V: Fn(f64, &SpdMatrix) -> f64 + Sync,
    G: Fn(f64, &SpdMatrix) -> DMatrix<f64> + Sync,
{
    fn value(&self, tau: f64, x: &SpdMatrix) -> f64 {
        (self.value)(tau, x)
    }
    fn grad(&self, tau: f64, x: &SpdMatrix) -> DMatrix<f64> {
        (self.grad)(tau, x)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub n_paths: usize,
    pub dt: f64,
}

/// Pairwise sum; the tree depends only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

impl McEstimate {
    pub fn from_samples(v: &[f64], dt: f64) -> Self {
        let n = v.len();
        let mean = if n > 0 { pairwise_sum(v) / n as f64 } else { f64::NAN };
        let se = if n > 1 {
            let sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&sq) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean,
            standard_error: se,
            n_paths: n,
            dt,
        }
    }

    /// `|mean - target| <= k s.e.`
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.standard_error
    }
}

fn step_count(horizon: f64, dt: f64) -> Result<(usize, f64)> {
    if !(horizon >= 0.0) || !(dt > 0.0) {
        return Err(Error::param("T/dt", "need T >= 0 and dt > 0"));
    }
    let n = (horizon / dt).round() as usize;
    if n == 0 {
        return Ok((0, dt));
    }
    Ok((n, horizon / n as f64))
}

// ---------------------------------------------------------------------------
// kernels

pub(crate) trait Kernel: Sync {
    type State: Clone + Send + Sync;
    type Local;
    type Noise;
    type Dz;
    type Grad: Clone + Send + Sync;
    type Policy: Clone;

    fn state_of(&self, x: &SpdMatrix) -> Result<Self::State>;
    fn spd_of(&self, s: &Self::State) -> SpdMatrix;
    fn draw(&self, rng: &mut ChaCha8Rng, sdt: f64) -> Self::Noise;
    fn local(&self, x: &Self::State) -> Result<Self::Local>;
    fn rate(&self, l: &Self::Local) -> f64;
    fn advance(&self, x: &Self::State, l: &Self::Local, n: &Self::Noise, dt: f64) -> Result<(Self::State, bool)>;
    fn dz(&self, l: &Self::Local, n: &Self::Noise) -> Self::Dz;
    fn to_grad(&self, m: &DMatrix<f64>) -> Self::Grad;
    fn policy(&self, l: &Self::Local, g: &Self::Grad) -> Result<Self::Policy>;
    fn perturb(&self, pi: &Self::Policy, delta: &[f64]) -> Self::Policy;
    /// `Delta log W` without the interest rate.
    fn wealth_inc(&self, l: &Self::Local, pi: &Self::Policy, dz: &Self::Dz, dt: f64) -> f64;
    /// Increment of the log stochastic exponential with premium factor `s`
    /// (`1` for the deflator, `q` for `Z^{phi,T}`).
    fn exp_inc(&self, l: &Self::Local, g: &Self::Grad, n: &Self::Noise, s: f64, dt: f64) -> f64;
    /// `(a - b)' Sigma (a - b)`.
    fn gap(&self, l: &Self::Local, a: &Self::Policy, b: &Self::Policy) -> f64;
}

pub(crate) struct MatrixKernel<'a> {
    pub spec: &'a ModelSpec,
}

pub(crate) struct MatrixLocal {
    sc: StateCoeffs,
    mc: MarketCoeffs,
    r: f64,
    /// sigma' nu
    sig_t_nu: DVector<f64>,
    /// C' sigma' nu
    ct_sig_t_nu: DVector<f64>,
    /// Sigma nu
    sig_nu: DVector<f64>,
    branch: PolicyBranch,
}

fn policy_from_hedge(mc: &MarketCoeffs, h: &DVector<f64>, p: f64, branch: PolicyBranch) -> Result<DVector<f64>> {
    let scale = 1.0 / (1.0 - p);
    match branch {
        PolicyBranch::Wide => {
            let chol = mc
                .big_sigma
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Ellipticity("Sigma is singular".into()))?;
            Ok((&mc.nu + chol.solve(&(&mc.sigma * h))) * scale)
        }
        PolicyBranch::Tall => {
            let chol = (mc.sigma.transpose() * &mc.sigma)
                .cholesky()
                .ok_or_else(|| Error::Ellipticity("sigma' sigma is singular".into()))?;
            Ok(&mc.sigma * chol.solve(&(mc.sigma.transpose() * &mc.nu + h)) * scale)
        }
    }
}

impl<'a> Kernel for MatrixKernel<'a> {
    type State = SpdMatrix;
    type Local = MatrixLocal;
    type Noise = (DMatrix<f64>, DVector<f64>);
    type Dz = DVector<f64>;
    type Grad = DMatrix<f64>;
    type Policy = DVector<f64>;

    fn state_of(&self, x: &SpdMatrix) -> Result<SpdMatrix> {
        if x.dim() != self.spec.d() {
            return Err(Error::dim("x0", self.spec.d(), x.dim()));
        }
        Ok(x.clone())
    }

    fn spd_of(&self, s: &SpdMatrix) -> SpdMatrix {
        s.clone()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, sdt: f64) -> Self::Noise {
        let d = self.spec.d();
        let m = self.spec.m();
        let mut db = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                db[(i, j)] = rng.sample::<f64, _>(StandardNormal) * sdt;
            }
        }
        let dw = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal) * sdt);
        (db, dw)
    }

    fn local(&self, x: &SpdMatrix) -> Result<MatrixLocal> {
        let sc = self.spec.state_coeffs(x)?;
        let mc = self.spec.market(x)?;
        let sig_t_nu = mc.sigma.transpose() * &mc.nu;
        let ct_sig_t_nu = mc.c.transpose() * &sig_t_nu;
        let sig_nu = &mc.big_sigma * &mc.nu;
        let branch = if mc.m > mc.n { PolicyBranch::Wide } else { PolicyBranch::Tall };
        Ok(MatrixLocal {
            r: self.spec.rate(x),
            sc,
            mc,
            sig_t_nu,
            ct_sig_t_nu,
            sig_nu,
            branch,
        })
    }

    fn rate(&self, l: &MatrixLocal) -> f64 {
        l.r
    }

    fn advance(&self, x: &SpdMatrix, l: &MatrixLocal, n: &Self::Noise, dt: f64) -> Result<(SpdMatrix, bool)> {
        let vol = &l.sc.big_f * &n.0 * &l.sc.big_g;
        let next = x.as_matrix() + &l.sc.b * dt + &vol + vol.transpose();
        let s = SymMatrix::symmetrize(&next)?;
        let norm = s.frobenius_norm();
        if !(norm <= EXPLOSION_NORM) {
            return Err(Error::Explosion(format!("|X| = {norm:e} exceeds {EXPLOSION_NORM:e}")));
        }
        let floor = PROJECTION_FLOOR * (1.0 + norm);
        if s.min_eigenvalue() < floor {
            Ok((project_to_spd(&s, floor)?, true))
        } else {
            Ok((SpdMatrix::new_unchecked(s), false))
        }
    }

    fn dz(&self, l: &MatrixLocal, n: &Self::Noise) -> DVector<f64> {
        &l.mc.c * &n.0 * &l.mc.rho + &l.mc.dmat * &n.1
    }

    fn to_grad(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone()
    }

    fn policy(&self, l: &MatrixLocal, g: &DMatrix<f64>) -> Result<DVector<f64>> {
        let eta = l.sc.eta(g);
        let h = &l.mc.c * eta * &l.mc.rho;
        policy_from_hedge(&l.mc, &h, self.spec.p, l.branch)
    }

    fn perturb(&self, pi: &DVector<f64>, delta: &[f64]) -> DVector<f64> {
        pi + DVector::from_column_slice(delta)
    }

    fn wealth_inc(&self, l: &MatrixLocal, pi: &DVector<f64>, dz: &DVector<f64>, dt: f64) -> f64 {
        let sp = &l.mc.big_sigma * pi;
        (pi.dot(&l.sig_nu) - 0.5 * pi.dot(&sp)) * dt + (l.mc.sigma.transpose() * pi).dot(dz)
    }

    fn exp_inc(&self, l: &MatrixLocal, g: &DMatrix<f64>, n: &Self::Noise, s: f64, dt: f64) -> f64 {
        let mc = &l.mc;
        let eta = l.sc.eta(g);
        let w = &mc.theta * &mc.c * &eta * &mc.rho;
        let v = &l.ct_sig_t_nu + mc.c.transpose() * &w;
        let beta = eta - (&v * mc.rho.transpose()) * s;
        let omega = -(&mc.dmat * (&l.sig_t_nu + &w)) * s;
        beta.component_mul(&n.0).sum() + omega.dot(&n.1) - 0.5 * (beta.norm_squared() + omega.norm_squared()) * dt
    }

    fn gap(&self, l: &MatrixLocal, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let e = a - b;
        e.dot(&(&l.mc.big_sigma * &e))
    }
}

/// Scalar constant-coefficient Wishart model (`d = n = m = 1`).
#[derive(Clone, Debug)]
pub(crate) struct ScalarKernel {
    k: f64,
    l2: f64,
    lam: f64,
    zeta: f64,
    nu: f64,
    rho: f64,
    c: f64,
    dcoef: f64,
    r0: f64,
    r1: f64,
    p: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScalarLocal {
    x: f64,
    sx: f64,
    sigma: f64,
    r: f64,
}

impl ScalarKernel {
    pub(crate) fn from_spec(spec: &ModelSpec) -> Option<Self> {
        let StateModel::Wishart(w) = &spec.state else { return None };
        if w.d != 1 || spec.n() != 1 || spec.m() != 1 || !spec.market.is_constant() {
            return None;
        }
        let Volatility::Factor(z) = &spec.market.vol else { return None };
        let x1 = SpdMatrix::identity(1);
        let mc = spec.market(&x1).ok()?;
        Some(ScalarKernel {
            k: w.k[(0, 0)],
            l2: w.l[(0, 0)] * w.l[(0, 0)],
            lam: w.lambda[(0, 0)],
            zeta: z.eval(&x1)[(0, 0)],
            nu: mc.nu[0],
            rho: mc.rho[0],
            c: mc.c[(0, 0)],
            dcoef: mc.dmat[(0, 0)],
            r0: spec.market.r0,
            r1: spec.market.r1[(0, 0)],
            p: spec.p,
        })
    }
}

impl Kernel for ScalarKernel {
    type State = f64;
    type Local = ScalarLocal;
    type Noise = (f64, f64);
    type Dz = f64;
    type Grad = f64;
    type Policy = f64;

    fn state_of(&self, x: &SpdMatrix) -> Result<f64> {
        if x.dim() != 1 {
            return Err(Error::dim("x0", 1, x.dim()));
        }
        Ok(x.as_matrix()[(0, 0)])
    }

    fn spd_of(&self, s: &f64) -> SpdMatrix {
        SpdMatrix::new_unchecked(SymMatrix::from_diagonal(&[*s]))
    }

    fn draw(&self, rng: &mut ChaCha8Rng, sdt: f64) -> (f64, f64) {
        let a = rng.sample::<f64, _>(StandardNormal) * sdt;
        let b = rng.sample::<f64, _>(StandardNormal) * sdt;
        (a, b)
    }

    fn local(&self, x: &f64) -> Result<ScalarLocal> {
        let sx = x.sqrt();
        Ok(ScalarLocal {
            x: *x,
            sx,
            sigma: self.zeta * sx,
            r: self.r0 + self.r1 * x,
        })
    }

    fn rate(&self, l: &ScalarLocal) -> f64 {
        l.r
    }

    fn advance(&self, x: &f64, l: &ScalarLocal, n: &(f64, f64), dt: f64) -> Result<(f64, bool)> {
        let b = self.l2 + (self.k * l.x + l.x * self.k);
        let vol = l.sx * n.0 * self.lam;
        let next = x + b * dt + (vol + vol);
        let norm = next.abs();
        if !(norm <= EXPLOSION_NORM) {
            return Err(Error::Explosion(format!("|X| = {norm:e} exceeds {EXPLOSION_NORM:e}")));
        }
        let floor = PROJECTION_FLOOR * (1.0 + norm);
        if next < floor {
            Ok((floor, true))
        } else {
            Ok((next, false))
        }
    }

    fn dz(&self, _l: &ScalarLocal, n: &(f64, f64)) -> f64 {
        self.c * n.0 * self.rho + self.dcoef * n.1
    }

    fn to_grad(&self, m: &DMatrix<f64>) -> f64 {
        m[(0, 0)]
    }

    fn policy(&self, l: &ScalarLocal, g: &f64) -> Result<f64> {
        if l.sigma == 0.0 {
            return Err(Error::Ellipticity("sigma' sigma is singular".into()));
        }
        let eta = 2.0 * l.sx * self.lam * g;
        let h = self.c * eta * self.rho;
        Ok((self.nu + h / l.sigma) / (1.0 - self.p))
    }

    fn perturb(&self, pi: &f64, delta: &[f64]) -> f64 {
        pi + delta[0]
    }

    fn wealth_inc(&self, l: &ScalarLocal, pi: &f64, dz: &f64, dt: f64) -> f64 {
        let s2 = l.sigma * l.sigma;
        (pi * s2 * self.nu - 0.5 * pi * s2 * pi) * dt + l.sigma * pi * dz
    }

    fn exp_inc(&self, l: &ScalarLocal, g: &f64, n: &(f64, f64), s: f64, dt: f64) -> f64 {
        let eta = 2.0 * l.sx * self.lam * g;
        let stn = l.sigma * self.nu;
        let w = self.c * eta * self.rho;
        let v = self.c * stn + self.c * w;
        let beta = eta - v * self.rho * s;
        let omega = -(self.dcoef * (stn + w)) * s;
        beta * n.0 + omega * n.1 - 0.5 * (beta * beta + omega * omega) * dt
    }

    fn gap(&self, l: &ScalarLocal, a: &f64, b: &f64) -> f64 {
        let e = a - b;
        e * l.sigma * l.sigma * e
    }
}

/// Per-step view handed to path visitors.
pub(crate) struct Step<'s, K: Kernel> {
    pub k: usize,
    pub t: f64,
    pub x: &'s K::State,
    pub local: &'s K::Local,
    pub noise: &'s K::Noise,
    pub dz: &'s K::Dz,
    pub x_next: &'s K::State,
    pub r_next: f64,
}

/// Runs one path of `n` steps; returns the terminal state and the number of
/// projected steps.
pub(crate) fn run_path<K: Kernel>(
    kern: &K,
    x0: &K::State,
    n: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
    visit: &mut dyn FnMut(&Step<K>) -> Result<()>,
) -> Result<(K::State, usize)> {
    let sdt = dt.sqrt();
    let mut x = x0.clone();
    let mut local = kern.local(&x)?;
    let mut projected = 0;
    for k in 0..n {
        let noise = kern.draw(rng, sdt);
        let (xn, proj) = kern.advance(&x, &local, &noise, dt)?;
        projected += proj as usize;
        let ln = kern.local(&xn)?;
        let dz = kern.dz(&local, &noise);
        visit(&Step {
            k,
            t: k as f64 * dt,
            x: &x,
            local: &local,
            noise: &noise,
            dz: &dz,
            x_next: &xn,
            r_next: kern.rate(&ln),
        })?;
        x = xn;
        local = ln;
    }
    Ok((x, projected))
}

/// Gradients of `phi(horizon - t_k, .)` along the step grid, precomputed when
/// they do not depend on the state.
pub(crate) struct GradSeq<'a, K: Kernel> {
    pre: Option<Vec<K::Grad>>,
    phi: &'a dyn PhiFunction,
    horizon: f64,
}

impl<'a, K: Kernel> GradSeq<'a, K> {
    pub(crate) fn new(kern: &K, phi: &'a dyn PhiFunction, horizon: f64, n: usize, dt: f64) -> Self {
        let pre: Option<Vec<K::Grad>> = (0..=n)
            .map(|k| phi.affine_grad(horizon - k as f64 * dt).map(|m| kern.to_grad(&m)))
            .collect();
        GradSeq { pre, phi, horizon }
    }

    pub(crate) fn at(&self, kern: &K, k: usize, t: f64, x: &K::State) -> K::Grad {
        match &self.pre {
            Some(v) => v[k].clone(),
            None => kern.to_grad(&self.phi.grad(self.horizon - t, &kern.spd_of(x))),
        }
    }
}

// ---------------------------------------------------------------------------
// path bundles

#[derive(Clone, Debug)]
pub struct PathBundle {
    pub dt: f64,
    pub times: Vec<f64>,
    pub db: Vec<DMatrix<f64>>,
    pub dw: Vec<DVector<f64>>,
    pub x: Vec<SpdMatrix>,
    pub projected_steps: usize,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.db.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }
}

/// Euler-Maruyama with spectral projection onto `{X >= 1e-10 (1 + |X|)}`.
pub fn simulate_state(spec: &ModelSpec, x0: &SpdMatrix, horizon: f64, dt: f64, stream: RngStreamSpec) -> Result<PathBundle> {
    let kern = MatrixKernel { spec };
    let x0 = kern.state_of(x0)?;
    let (n, dt) = step_count(horizon, dt)?;
    let mut rng = stream.rng();
    let mut b = PathBundle {
        dt,
        times: vec![0.0],
        db: Vec::with_capacity(n),
        dw: Vec::with_capacity(n),
        x: vec![x0.clone()],
        projected_steps: 0,
    };
    let (_, proj) = run_path(&kern, &x0, n, dt, &mut rng, &mut |s| {
        b.times.push((s.k + 1) as f64 * dt);
        b.db.push(s.noise.0.clone());
        b.dw.push(s.noise.1.clone());
        b.x.push(s.x_next.clone());
        Ok(())
    })?;
    b.projected_steps = proj;
    Ok(b)
}

fn bundle_locals(kern: &MatrixKernel, path: &PathBundle) -> Result<Vec<MatrixLocal>> {
    path.x.iter().map(|x| kern.local(x)).collect()
}

/// `Delta Z = C Delta B rho + D Delta W` per step.
pub fn simulate_correlated_drivers(spec: &ModelSpec, path: &PathBundle) -> Result<Vec<DVector<f64>>> {
    let kern = MatrixKernel { spec };
    (0..path.steps())
        .map(|k| {
            let l = kern.local(&path.x[k])?;
            Ok(kern.dz(&l, &(path.db[k].clone(), path.dw[k].clone())))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct WealthPath {
    pub log_w: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DeflatorPath {
    /// `log M^eta`
    pub log_m: Vec<f64>,
    /// `log Z^{phi,T}`
    pub log_z: Vec<f64>,
}

/// Log-Euler wealth under the feedback `policy(t, x)`; `int r dt` uses the
/// trapezoidal rule.
pub fn simulate_wealth(
    spec: &ModelSpec,
    path: &PathBundle,
    policy: &dyn Fn(f64, &SpdMatrix) -> Result<DVector<f64>>,
    w0: f64,
) -> Result<WealthPath> {
    if !(w0 > 0.0) {
        return Err(Error::param("w0", "must be positive"));
    }
    let kern = MatrixKernel { spec };
    let locals = bundle_locals(&kern, path)?;
    let mut lw = w0.ln();
    let mut log_w = vec![lw];
    for k in 0..path.steps() {
        let noise = (path.db[k].clone(), path.dw[k].clone());
        let dz = kern.dz(&locals[k], &noise);
        let pi = policy(path.times[k], &path.x[k])?;
        if pi.len() != spec.n() {
            return Err(Error::dim("policy", spec.n(), pi.len()));
        }
        lw += 0.5 * (locals[k].r + locals[k + 1].r) * path.dt + kern.wealth_inc(&locals[k], &pi, &dz, path.dt);
        log_w.push(lw);
    }
    Ok(WealthPath { log_w })
}

/// `log M^eta` and `log Z^{phi,T}` with `eta_t = eta(T - t, X_t; phi)`.
pub fn simulate_deflator(spec: &ModelSpec, path: &PathBundle, phi: &dyn PhiFunction, horizon: f64) -> Result<DeflatorPath> {
    let kern = MatrixKernel { spec };
    let locals = bundle_locals(&kern, path)?;
    let (mut lm, mut lz) = (0.0, 0.0);
    let mut out = DeflatorPath {
        log_m: vec![0.0],
        log_z: vec![0.0],
    };
    for k in 0..path.steps() {
        let noise = (path.db[k].clone(), path.dw[k].clone());
        let g = phi.grad(horizon - path.times[k], &path.x[k]);
        lm += -0.5 * (locals[k].r + locals[k + 1].r) * path.dt + kern.exp_inc(&locals[k], &g, &noise, 1.0, path.dt);
        lz += kern.exp_inc(&locals[k], &g, &noise, spec.q, path.dt);
        out.log_m.push(lm);
        out.log_z.push(lz);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IdentityResiduals {
    pub wealth: f64,
    pub deflator: f64,
}

/// Residuals of the two pathwise identities between `t = 0` and the path end,
/// with policy and premium taken from `phi(horizon - t, .)`.
pub fn check_path_identities(spec: &ModelSpec, path: &PathBundle, phi: &dyn PhiFunction, horizon: f64) -> Result<IdentityResiduals> {
    let policy = |t: f64, x: &SpdMatrix| spec.pi(x, &phi.grad(horizon - t, x));
    let w = simulate_wealth(spec, path, &policy, 1.0)?;
    let m = simulate_deflator(spec, path, phi, horizon)?;
    let t_end = path.horizon();
    let dphi = phi.value(horizon - t_end, path.x.last().expect("nonempty")) - phi.value(horizon, &path.x[0]);
    let dlw = w.log_w.last().expect("nonempty") - w.log_w[0];
    let dlm = *m.log_m.last().expect("nonempty");
    let dlz = *m.log_z.last().expect("nonempty");
    Ok(IdentityResiduals {
        wealth: (spec.p * dlw + dphi - dlz).abs(),
        deflator: (spec.q * dlm + (1.0 - spec.q) * dphi - dlz).abs(),
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo drivers

fn par_paths<T: Send>(n_paths: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n_paths as u64).into_par_iter().map(f).collect()
}

fn identity_paths<K: Kernel>(
    kern: &K,
    spec: &ModelSpec,
    x0: &SpdMatrix,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    phi: &dyn PhiFunction,
) -> Result<Vec<IdentityResiduals>> {
    let (n, dt) = step_count(horizon, dt)?;
    let s0 = kern.state_of(x0)?;
    let grads = GradSeq::new(kern, phi, horizon, n, dt);
    let (p, q) = (spec.p, spec.q);
    let phi0 = phi.value(horizon, x0);
    par_paths(n_paths, |i| {
        let mut rng = RngStreamSpec::new(seed, i).rng();
        let (mut lw, mut lm, mut lz) = (0.0, 0.0, 0.0);
        let (xt, _) = run_path(kern, &s0, n, dt, &mut rng, &mut |s| {
            let g = grads.at(kern, s.k, s.t, s.x);
            let pi = kern.policy(s.local, &g)?;
            let rr = 0.5 * (kern.rate(s.local) + s.r_next) * dt;
            lw += rr + kern.wealth_inc(s.local, &pi, s.dz, dt);
            lm += -rr + kern.exp_inc(s.local, &g, s.noise, 1.0, dt);
            lz += kern.exp_inc(s.local, &g, s.noise, q, dt);
            Ok(())
        })?;
        let dphi = phi.value(horizon - n as f64 * dt, &kern.spd_of(&xt)) - phi0;
        Ok(IdentityResiduals {
            wealth: (p * lw + dphi - lz).abs(),
            deflator: (q * lm + (1.0 - q) * dphi - lz).abs(),
        })
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityStats {
    pub dt: f64,
    pub n_paths: usize,
    pub median_wealth: f64,
    pub median_deflator: f64,
    pub max_wealth: f64,
    pub max_deflator: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Pathwise identity residuals over `n_paths` seeded paths.
pub fn mc_path_identities(
    spec: &ModelSpec,
    x0: &SpdMatrix,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    phi: &dyn PhiFunction,
) -> Result<IdentityStats> {
    let res = match ScalarKernel::from_spec(spec) {
        Some(k) => identity_paths(&k, spec, x0, horizon, dt, n_paths, seed, phi)?,
        None => identity_paths(&MatrixKernel { spec }, spec, x0, horizon, dt, n_paths, seed, phi)?,
    };
    let w: Vec<f64> = res.iter().map(|r| r.wealth).collect();
    let m: Vec<f64> = res.iter().map(|r| r.deflator).collect();
    Ok(IdentityStats {
        dt: step_count(horizon, dt)?.1,
        n_paths,
        median_wealth: median(&w),
        median_deflator: median(&m),
        max_wealth: w.iter().cloned().fold(0.0, f64::max),
        max_deflator: m.iter().cloned().fold(0.0, f64::max),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    pub horizon: f64,
    /// `v(T, x0)` from the Riccati ODE
    pub v: f64,
    pub target: f64,
    /// `E[(W_T / w0)^p]`
    pub wealth: McEstimate,
    /// `E[M_T^q]^{1/(1-q)}` with a delta-method standard error
    pub deflator: McEstimate,
    pub projected_steps: usize,
}

impl DualityReport {
    pub fn brackets(&self, k: f64) -> bool {
        self.wealth.within(self.target, k) && self.deflator.within(self.target, k)
    }
}

fn duality_paths<K: Kernel>(
    kern: &K,
    spec: &ModelSpec,
    x0: &SpdMatrix,
    path: &HorizonRiccatiPath,
    horizon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<(Vec<(f64, f64)>, usize)> {
    let (n, dt) = step_count(horizon, dt)?;
    let s0 = kern.state_of(x0)?;
    let grads = GradSeq::new(kern, path, horizon, n, dt);
    let out = par_paths(n_paths, |i| {
        let mut rng = RngStreamSpec::new(seed, i).rng();
        let (mut lw, mut lm) = (0.0, 0.0);
        let (_, proj) = run_path(kern, &s0, n, dt, &mut rng, &mut |s| {
            let g = grads.at(kern, s.k, s.t, s.x);
            let pi = kern.policy(s.local, &g)?;
            let rr = 0.5 * (kern.rate(s.local) + s.r_next) * dt;
            lw += rr + kern.wealth_inc(s.local, &pi, s.dz, dt);
            lm += -rr + kern.exp_inc(s.local, &g, s.noise, 1.0, dt);
            Ok(())
        })?;
        Ok(((spec.p * lw).exp(), (spec.q * lm).exp(), proj))
    })?;
    let proj = out.iter().map(|o| o.2).sum();
    Ok((out.into_iter().map(|o| (o.0, o.1)).collect(), proj))
}

/// Both sides of the duality equation against `e^{v(T, x0)}`.
pub fn mc_duality(spec: &ModelSpec, x0: &SpdMatrix, horizon: f64, n_paths: usize, dt: f64, seed: u64) -> Result<DualityReport> {
    let ode = solve_horizon_riccati_ode(spec, horizon, dt.min(1e-3))?;
    let v = ode.value(horizon, x0);
    let (samples, projected_steps) = match ScalarKernel::from_spec(spec) {
        Some(k) => duality_paths(&k, spec, x0, &ode, horizon, n_paths, dt, seed)?,
        None => duality_paths(&MatrixKernel { spec }, spec, x0, &ode, horizon, n_paths, dt, seed)?,
    };
    let dt_used = step_count(horizon, dt)?.1;
    let wv: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mv: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let wealth = McEstimate::from_samples(&wv, dt_used);
    let raw = McEstimate::from_samples(&mv, dt_used);
    let e = 1.0 / (1.0 - spec.q);
    let deflator = McEstimate {
        mean: raw.mean.powf(e),
        standard_error: (e * raw.mean.powf(e - 1.0)).abs() * raw.standard_error,
        n_paths,
        dt: dt_used,
    };
    Ok(DualityReport {
        horizon,
        v,
        target: v.exp(),
        wealth,
        deflator,
        projected_steps,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LongrunRow {
    pub horizon: f64,
    /// `E[sup_u |W^T_u / W_hat_u - 1|]`
    pub sup_ratio: McEstimate,
    /// `E[int (pi^T - pi_hat)' Sigma (pi^T - pi_hat) du]`
    pub strategy_distance: McEstimate,
}

fn longrun_paths<K: Kernel>(
    kern: &K,
    x0: &SpdMatrix,
    t_window: f64,
    finite: &[(f64, &dyn PhiFunction)],
    longrun: &dyn PhiFunction,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let (n, dt) = step_count(t_window, dt)?;
    let s0 = kern.state_of(x0)?;
    let hat = GradSeq::new(kern, longrun, t_window, n, dt);
    let seqs: Vec<GradSeq<K>> = finite.iter().map(|(h, phi)| GradSeq::new(kern, *phi, *h, n, dt)).collect();
    par_paths(n_paths, |i| {
        let mut rng = RngStreamSpec::new(seed, i).rng();
        let nf = seqs.len();
        let mut log_ratio = vec![0.0; nf];
        let mut sup = vec![0.0f64; nf];
        let mut dist = vec![0.0; nf];
        run_path(kern, &s0, n, dt, &mut rng, &mut |s| {
            let gh = hat.at(kern, s.k, s.t, s.x);
            let pih = kern.policy(s.local, &gh)?;
            let dh = kern.wealth_inc(s.local, &pih, s.dz, dt);
            for j in 0..nf {
                let g = seqs[j].at(kern, s.k, s.t, s.x);
                let pi = kern.policy(s.local, &g)?;
                dist[j] += kern.gap(s.local, &pi, &pih) * dt;
                // the interest rate cancels in the ratio
                log_ratio[j] += kern.wealth_inc(s.local, &pi, s.dz, dt) - dh;
                sup[j] = sup[j].max(log_ratio[j].exp_m1().abs());
            }
            Ok(())
        })?;
        Ok(sup.into_iter().zip(dist).collect())
    })
}

/// Convergence of finite-horizon wealth and strategies to the long-run ones
/// on `[0, t_window]`, with common random numbers across horizons.
pub fn mc_longrun_convergence_with(
    spec: &ModelSpec,
    x0: &SpdMatrix,
    t_window: f64,
    finite: &[(f64, &dyn PhiFunction)],
    longrun: &dyn PhiFunction,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<LongrunRow>> {
    for (h, _) in finite {
        if *h < t_window {
            return Err(Error::param("T_list", format!("horizon {h} shorter than the window {t_window}")));
        }
    }
    let per_path = match ScalarKernel::from_spec(spec) {
        Some(k) => longrun_paths(&k, x0, t_window, finite, longrun, n_paths, dt, seed)?,
        None => longrun_paths(&MatrixKernel { spec }, x0, t_window, finite, longrun, n_paths, dt, seed)?,
    };
    let dt_used = step_count(t_window, dt)?.1;
    Ok(finite
        .iter()
        .enumerate()
        .map(|(j, (h, _))| {
            let a: Vec<f64> = per_path.iter().map(|v| v[j].0).collect();
            let b: Vec<f64> = per_path.iter().map(|v| v[j].1).collect();
            LongrunRow {
                horizon: *h,
                sup_ratio: McEstimate::from_samples(&a, dt_used),
                strategy_distance: McEstimate::from_samples(&b, dt_used),
            }
        })
        .collect())
}

/// Affine case: finite-horizon policies from the Riccati ODE, the long-run
/// policy from the ergodic Riccati solution.
pub fn mc_longrun_convergence(
    spec: &ModelSpec,
    x0: &SpdMatrix,
    t_window: f64,
    t_list: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<LongrunRow>> {
    let t_max = t_list.iter().cloned().fold(0.0, f64::max);
    let ode = solve_horizon_riccati_ode(spec, t_max, dt.min(1e-3))?;
    let hat = ErgodicAffine::from_spec(spec)?;
    let finite: Vec<(f64, &dyn PhiFunction)> = t_list.iter().map(|h| (*h, &ode as &dyn PhiFunction)).collect();
    mc_longrun_convergence_with(spec, x0, t_window, &finite, &hat, n_paths, dt, seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct SupermartingaleReport {
    pub horizon: f64,
    /// `E[M^eta_T W^pi_T] / w0` with `pi`, `eta` from the long-run pair
    pub deflated_wealth: McEstimate,
    /// `E[Z^{v_hat}_T W^{pi_hat + delta}_T / W_hat_T]`
    pub numeraire: McEstimate,
    /// fraction of paths whose perturbed wealth stayed positive and finite
    pub admissible_fraction: f64,
}

fn supermart_paths<K: Kernel>(
    kern: &K,
    spec: &ModelSpec,
    x0: &SpdMatrix,
    phi: &dyn PhiFunction,
    delta: &[f64],
    horizon: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let (n, dt) = step_count(horizon, dt)?;
    let s0 = kern.state_of(x0)?;
    let grads = GradSeq::new(kern, phi, horizon, n, dt);
    par_paths(n_paths, |i| {
        let mut rng = RngStreamSpec::new(seed, i).rng();
        let (mut lw, mut lm, mut lz, mut lwd) = (0.0, 0.0, 0.0, 0.0);
        run_path(kern, &s0, n, dt, &mut rng, &mut |s| {
            let g = grads.at(kern, s.k, s.t, s.x);
            let pi = kern.policy(s.local, &g)?;
            let pid = kern.perturb(&pi, delta);
            let rr = 0.5 * (kern.rate(s.local) + s.r_next) * dt;
            lw += rr + kern.wealth_inc(s.local, &pi, s.dz, dt);
            lwd += rr + kern.wealth_inc(s.local, &pid, s.dz, dt);
            lm += -rr + kern.exp_inc(s.local, &g, s.noise, 1.0, dt);
            lz += kern.exp_inc(s.local, &g, s.noise, spec.q, dt);
            Ok(())
        })?;
        Ok(((lm + lw).exp(), (lz + lwd - lw).exp()))
    })
}

/// Deflated wealth and the numeraire inequality for the long-run pair.
pub fn mc_supermartingale(
    spec: &ModelSpec,
    x0: &SpdMatrix,
    horizon: f64,
    delta: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<SupermartingaleReport> {
    if delta.len() != spec.n() {
        return Err(Error::dim("perturbation", spec.n(), delta.len()));
    }
    let hat = ErgodicAffine::from_spec(spec)?;
    let v = match ScalarKernel::from_spec(spec) {
        Some(k) => supermart_paths(&k, spec, x0, &hat, delta, horizon, n_paths, dt, seed)?,
        None => supermart_paths(&MatrixKernel { spec }, spec, x0, &hat, delta, horizon, n_paths, dt, seed)?,
    };
    let dt_used = step_count(horizon, dt)?.1;
    let a: Vec<f64> = v.iter().map(|s| s.0).collect();
    let b: Vec<f64> = v.iter().map(|s| s.1).collect();
    let ok = b.iter().filter(|x| x.is_finite() && **x > 0.0).count();
    Ok(SupermartingaleReport {
        horizon,
        deflated_wealth: McEstimate::from_samples(&a, dt_used),
        numeraire: McEstimate::from_samples(&b, dt_used),
        admissible_fraction: ok as f64 / n_paths.max(1) as f64,
    })
}
