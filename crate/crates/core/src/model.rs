//! Model symbols and pointwise evaluation of the state, market and HJB
//! operator coefficients.
//!
//! Pairs `(i, j)` of matrix entries are flattened as `i * d + j`; quadratic
//! forms over symmetric matrices (`A`, `Abar`, Hessians) are stored in that
//! full `d^2 x d^2` layout and converted to `svec` coordinates on demand.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spd::{full_form_to_svec, full_form_value, sqrt_psd, sqrt_spd, SpdMatrix, SymMatrix};

type FieldFn = dyn Fn(&SpdMatrix) -> DMatrix<f64> + Send + Sync;

/// A matrix-valued coefficient `x -> M(x)`. Vectors are `k x 1` matrices.
#[derive(Clone)]
pub enum Field {
    Constant(DMatrix<f64>),
    /// `base * (1 + amp * |x| / (1 + |x|))`
    Saturating { base: DMatrix<f64>, amp: f64 },
    /// `base * (1 + amp / (1 + |x|))`
    Decaying { base: DMatrix<f64>, amp: f64 },
    Custom {
        name: String,
        rows: usize,
        cols: usize,
        f: Arc<FieldFn>,
    },
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            Field::Saturating { base, amp } => {
                write!(f, "Saturating({}x{}, amp={amp})", base.nrows(), base.ncols())
            }
            Field::Decaying { base, amp } => {
                write!(f, "Decaying({}x{}, amp={amp})", base.nrows(), base.ncols())
            }
            Field::Custom { name, rows, cols, .. } => write!(f, "Custom({name}, {rows}x{cols})"),
        }
    }
}

impl Field {
    pub const BUILTINS: [&'static str; 3] = ["constant", "saturating", "decaying"];

    pub fn constant(m: DMatrix<f64>) -> Self {
        Field::Constant(m)
    }

    pub fn constant_vector(v: &[f64]) -> Self {
        Field::Constant(DMatrix::from_column_slice(v.len(), 1, v))
    }

    pub fn custom<F>(name: impl Into<String>, rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(&SpdMatrix) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Field::Custom {
            name: name.into(),
            rows,
            cols,
            f: Arc::new(f),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Field::Constant(m) | Field::Saturating { base: m, .. } | Field::Decaying { base: m, .. } => {
                (m.nrows(), m.ncols())
            }
            Field::Custom { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Field::Constant(_) => true,
            Field::Saturating { amp, .. } | Field::Decaying { amp, .. } => *amp == 0.0,
            Field::Custom { .. } => false,
        }
    }

    pub fn eval(&self, x: &SpdMatrix) -> DMatrix<f64> {
        match self {
            Field::Constant(m) => m.clone(),
            Field::Saturating { base, amp } => {
                let n = x.frobenius_norm();
                base * (1.0 + amp * n / (1.0 + n))
            }
            Field::Decaying { base, amp } => {
                let n = x.frobenius_norm();
                base * (1.0 + amp / (1.0 + n))
            }
            Field::Custom { f, .. } => f(x),
        }
    }

    /// Largest possible scale factor over the state space, for the built-in
    /// bounded families.
    pub fn sup_scale(&self) -> Option<(f64, f64)> {
        match self {
            Field::Constant(_) => Some((1.0, 1.0)),
            Field::Saturating { amp, .. } | Field::Decaying { amp, .. } => {
                Some(((1.0f64).min(1.0 + amp), (1.0f64).max(1.0 + amp)))
            }
            Field::Custom { .. } => None,
        }
    }

    pub fn base(&self) -> Option<&DMatrix<f64>> {
        match self {
            Field::Constant(m) | Field::Saturating { base: m, .. } | Field::Decaying { base: m, .. } => Some(m),
            Field::Custom { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WishartParams {
    pub d: usize,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

impl WishartParams {
    pub fn new(k: DMatrix<f64>, l: DMatrix<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let d = k.nrows();
        for (name, m) in [("K", &k), ("L", &l), ("Lambda", &lambda)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::dim(
                    format!("model.{name}"),
                    format!("{d}x{d}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
        Ok(WishartParams { d, k, l, lambda })
    }

    pub fn llt(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn lambda_lambda_t(&self) -> DMatrix<f64> {
        &self.lambda * self.lambda.transpose()
    }
}

/// Generic state coefficients `b`, `F`, `G`, each `d x d`.
#[derive(Clone, Debug)]
pub struct GeneralState {
    pub d: usize,
    pub b: Field,
    pub f: Field,
    pub g: Field,
}

#[derive(Clone, Debug)]
pub enum StateModel {
    Wishart(WishartParams),
    General(GeneralState),
}

impl StateModel {
    pub fn dim(&self) -> usize {
        match self {
            StateModel::Wishart(w) => w.d,
            StateModel::General(g) => g.d,
        }
    }
}

/// How the asset volatility `sigma(x)` (n x m) is produced.
#[derive(Clone, Debug)]
pub enum Volatility {
    /// `sigma = zeta(x) sqrt(x)` with `zeta` of shape n x d (requires m = d).
    Factor(Field),
    /// `sigma(x)` given directly.
    Direct(Field),
}

#[derive(Clone, Debug)]
pub struct MarketParams {
    pub n: usize,
    pub m: usize,
    pub r0: f64,
    pub r1: DMatrix<f64>,
    pub vol: Volatility,
    pub nu: Field,
    pub rho: Field,
    pub corr_c: Field,
}

impl MarketParams {
    /// The Wishart factor market: m = d, C = I, sigma = zeta sqrt(x).
    pub fn wishart(d: usize, r0: f64, r1: DMatrix<f64>, zeta: Field, nu: Field, rho: Field) -> Result<Self> {
        let (n, zc) = zeta.shape();
        if zc != d {
            return Err(Error::dim("market.zeta", format!("{n}x{d}"), format!("{n}x{zc}")));
        }
        Ok(MarketParams {
            n,
            m: d,
            r0,
            r1,
            vol: Volatility::Factor(zeta),
            nu,
            rho,
            corr_c: Field::Constant(DMatrix::identity(d, d)),
        })
    }

    pub fn wishart_constant(
        r0: f64,
        r1: DMatrix<f64>,
        zeta: DMatrix<f64>,
        nu: &[f64],
        rho: &[f64],
    ) -> Result<Self> {
        let d = zeta.ncols();
        Self::wishart(
            d,
            r0,
            r1,
            Field::Constant(zeta),
            Field::constant_vector(nu),
            Field::constant_vector(rho),
        )
    }

    pub fn is_constant(&self) -> bool {
        let vol = match &self.vol {
            Volatility::Factor(z) => z.is_constant(),
            Volatility::Direct(_) => false,
        };
        vol && self.nu.is_constant() && self.rho.is_constant() && self.corr_c.is_constant()
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub state: StateModel,
    pub market: MarketParams,
    pub p: f64,
    pub q: f64,
    pub kappa_lower: f64,
    pub kappa_upper: f64,
}

/// Which of the two portfolio formulas to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyBranch {
    /// `m > n`: `Sigma^{-1}(Sigma nu + sigma U grad)`
    Wide,
    /// `m <= n`: `sigma (sigma' sigma)^{-1} (sigma' nu + U grad)`
    Tall,
}

pub fn kappa_bounds(p: f64) -> (f64, f64) {
    let q = p / (p - 1.0);
    if p < 0.0 {
        (1.0 - q, 1.0)
    } else {
        (1.0, 1.0 - q)
    }
}

impl ModelSpec {
    pub fn new(state: StateModel, market: MarketParams, p: f64) -> Result<Self> {
        if !(p < 1.0) || p == 0.0 || !p.is_finite() {
            return Err(Error::param("p", format!("need p < 1 and p != 0, got {p}")));
        }
        let d = state.dim();
        let spec_dims = |name: &str, field: &Field, rows: usize, cols: usize| -> Result<()> {
            let (r, c) = field.shape();
            if (r, c) != (rows, cols) {
                return Err(Error::dim(
                    format!("market.{name}"),
                    format!("{rows}x{cols}"),
                    format!("{r}x{c}"),
                ));
            }
            Ok(())
        };
        let mk = &market;
        if mk.r1.nrows() != d || mk.r1.ncols() != d {
            return Err(Error::dim(
                "market.r1",
                format!("{d}x{d}"),
                format!("{}x{}", mk.r1.nrows(), mk.r1.ncols()),
            ));
        }
        match &mk.vol {
            Volatility::Factor(z) => {
                if mk.m != d {
                    return Err(Error::dim("market.m (factor volatility)", d, mk.m));
                }
                spec_dims("zeta", z, mk.n, d)?;
            }
            Volatility::Direct(s) => spec_dims("sigma", s, mk.n, mk.m)?,
        }
        spec_dims("nu", &mk.nu, mk.n, 1)?;
        spec_dims("rho", &mk.rho, d, 1)?;
        spec_dims("corrC", &mk.corr_c, mk.m, d)?;
        if let StateModel::General(g) = &state {
            spec_dims("b", &g.b, d, d)?;
            spec_dims("F", &g.f, d, d)?;
            spec_dims("G", &g.g, d, d)?;
        }
        let (kl, ku) = kappa_bounds(p);
        Ok(ModelSpec {
            state,
            market,
            p,
            q: p / (p - 1.0),
            kappa_lower: kl,
            kappa_upper: ku,
        })
    }

    /// Copy of the spec with the conjugate exponent replaced; used for the
    /// degenerate `q = 0` assembly.
    pub fn with_q(&self, q: f64) -> ModelSpec {
        let mut out = self.clone();
        out.q = q;
        out
    }

    pub fn d(&self) -> usize {
        self.state.dim()
    }

    pub fn n(&self) -> usize {
        self.market.n
    }

    pub fn m(&self) -> usize {
        self.market.m
    }

    pub fn wishart(&self) -> Option<&WishartParams> {
        match &self.state {
            StateModel::Wishart(w) => Some(w),
            StateModel::General(_) => None,
        }
    }

    /// Constant-coefficient Wishart model (the affine case).
    pub fn is_constant_wishart(&self) -> bool {
        self.wishart().is_some() && self.market.is_constant()
    }

    fn check_x(&self, x: &SpdMatrix) -> Result<()> {
        if x.dim() != self.d() {
            return Err(Error::dim("state point", self.d(), x.dim()));
        }
        Ok(())
    }

    pub fn rate(&self, x: &SpdMatrix) -> f64 {
        self.market.r0 + (&self.market.r1 * x.as_matrix()).trace()
    }

    pub fn state_coeffs(&self, x: &SpdMatrix) -> Result<StateCoeffs> {
        self.check_x(x)?;
        let d = self.d();
        let (b, big_f, big_g) = match &self.state {
            StateModel::Wishart(w) => {
                let xm = x.as_matrix();
                let b = w.llt() + &w.k * xm + xm * w.k.transpose();
                (b, sqrt_spd(x).as_matrix().clone(), w.lambda.transpose())
            }
            StateModel::General(g) => {
                let b = SymMatrix::symmetrize(&g.b.eval(x))?.into_matrix();
                (b, g.f.eval(x), g.g.eval(x))
            }
        };
        let f = &big_f * big_f.transpose();
        let g = big_g.transpose() * &big_g;
        let mut a = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                a.push(DMatrix::from_fn(d, d, |k, l| {
                    big_f[(i, k)] * big_g[(l, j)] + big_f[(j, k)] * big_g[(l, i)]
                }));
            }
        }
        Ok(StateCoeffs {
            d,
            b,
            f,
            g,
            big_f,
            big_g,
            a,
        })
    }

    /// `Tr(b x^-1) - (1+delta) Tr(f x^-1 g x^-1) - Tr(f x^-1) Tr(g x^-1)`,
    /// with `b` replaced by `drift` when given.
    pub fn h_delta(&self, x: &SpdMatrix, delta: f64, drift: Option<&DMatrix<f64>>) -> Result<f64> {
        let sc = self.state_coeffs(x)?;
        let xi = x.inverse();
        if !xi.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular("H_delta".into()));
        }
        let b = drift.unwrap_or(&sc.b);
        if b.nrows() != sc.d || b.ncols() != sc.d {
            return Err(Error::dim("drift override", sc.d, b.nrows()));
        }
        let fxi = &sc.f * &xi;
        let gxi = &sc.g * &xi;
        Ok((b * &xi).trace() - (1.0 + delta) * (&fxi * &gxi).trace() - fxi.trace() * gxi.trace())
    }

    pub fn market(&self, x: &SpdMatrix) -> Result<MarketCoeffs> {
        self.check_x(x)?;
        let mk = &self.market;
        let sigma = match &mk.vol {
            Volatility::Factor(z) => z.eval(x) * sqrt_spd(x).as_matrix(),
            Volatility::Direct(s) => s.eval(x),
        };
        let (n, m) = (mk.n, mk.m);
        let big_sigma = &sigma * sigma.transpose();
        let theta = if m > n {
            let inv = big_sigma
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Ellipticity("Sigma = sigma sigma' is not positive definite".into()))?
                .inverse();
            sigma.transpose() * inv * &sigma
        } else {
            DMatrix::identity(m, m)
        };
        let nu = DVector::from_column_slice(mk.nu.eval(x).as_slice());
        let rho = DVector::from_column_slice(mk.rho.eval(x).as_slice());
        let c = mk.corr_c.eval(x);
        let rr = rho.dot(&rho);
        let inner = DMatrix::identity(m, m) - (&c * c.transpose()) * rr;
        let dmat = sqrt_psd(&SymMatrix::symmetrize(&inner)?).into_matrix();
        Ok(MarketCoeffs {
            n,
            m,
            sigma,
            big_sigma,
            nu,
            c,
            rho,
            dmat,
            theta,
        })
    }

    pub fn operator_coeffs(&self, x: &SpdMatrix) -> Result<OperatorCoeffs> {
        let sc = self.state_coeffs(x)?;
        let mc = self.market(x)?;
        Ok(assemble(self, x, sc, mc))
    }

    pub fn eval_f(&self, x: &SpdMatrix, grad: &DMatrix<f64>, hess: &DMatrix<f64>) -> Result<f64> {
        self.operator_coeffs(x)?.apply(grad, hess)
    }

    pub fn pi(&self, x: &SpdMatrix, grad: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.operator_coeffs(x)?.pi(grad, self.p)
    }

    pub fn eta(&self, x: &SpdMatrix, grad: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.state_coeffs(x)?.eta(grad))
    }

    /// `sum theta_ij Tr(a^ij (a^kl)') theta_kl`.
    pub fn ellipticity_form(&self, x: &SpdMatrix, theta: &DMatrix<f64>) -> Result<f64> {
        let sc = self.state_coeffs(x)?;
        let y = sc.eta(theta);
        Ok((&y * y.transpose()).trace())
    }
}

#[derive(Clone, Debug)]
pub struct StateCoeffs {
    pub d: usize,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub big_f: DMatrix<f64>,
    pub big_g: DMatrix<f64>,
    /// `a^{ij}` at index `i * d + j`.
    pub a: Vec<DMatrix<f64>>,
}

impl StateCoeffs {
    /// `eta_kl = sum_ij a^{ij}_kl grad_ij`.
    pub fn eta(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d;
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let gij = grad[(i, j)];
                if gij != 0.0 {
                    out += &self.a[i * d + j] * gij;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct MarketCoeffs {
    pub n: usize,
    pub m: usize,
    /// n x m
    pub sigma: DMatrix<f64>,
    /// n x n
    pub big_sigma: DMatrix<f64>,
    pub nu: DVector<f64>,
    /// m x d
    pub c: DMatrix<f64>,
    pub rho: DVector<f64>,
    /// m x m
    pub dmat: DMatrix<f64>,
    /// m x m
    pub theta: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct OperatorCoeffs {
    pub d: usize,
    pub state: StateCoeffs,
    pub market: MarketCoeffs,
    pub r: f64,
    /// full layout
    pub big_a: DMatrix<f64>,
    /// full layout
    pub abar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    pub v: f64,
    /// m x d^2, column `i * d + j` is `C a^{ij} rho`
    pub u: DMatrix<f64>,
}

fn assemble(spec: &ModelSpec, x: &SpdMatrix, sc: StateCoeffs, mc: MarketCoeffs) -> OperatorCoeffs {
    let d = sc.d;
    let dd = d * d;
    let q = spec.q;
    let mut amat = DMatrix::zeros(dd, dd);
    for (row, a) in sc.a.iter().enumerate() {
        for (col, v) in a.iter().enumerate() {
            amat[(row, col)] = *v;
        }
    }
    let big_a = &amat * amat.transpose();
    let mut u = DMatrix::zeros(mc.m, dd);
    for (idx, a) in sc.a.iter().enumerate() {
        let col = &mc.c * (a * &mc.rho);
        u.set_column(idx, &col);
    }
    let abar = &big_a - u.transpose() * &mc.theta * &u * q;
    // nu' sigma u^{ij}
    let nsu = (mc.nu.transpose() * &mc.sigma) * &u;
    let bbar = DMatrix::from_fn(d, d, |i, j| sc.b[(i, j)] - q * nsu[(0, i * d + j)]);
    let r = spec.rate(x);
    let v = spec.p * r - 0.5 * q * (mc.nu.transpose() * &mc.big_sigma * &mc.nu)[(0, 0)];
    OperatorCoeffs {
        d,
        state: sc,
        market: mc,
        r,
        big_a,
        abar,
        bbar,
        v,
        u,
    }
}

fn flatten(grad: &DMatrix<f64>) -> DVector<f64> {
    let d = grad.nrows();
    DVector::from_fn(d * d, |a, _| grad[(a / d, a % d)])
}

impl OperatorCoeffs {
    fn check_grad(&self, grad: &DMatrix<f64>) -> Result<()> {
        if grad.nrows() != self.d || grad.ncols() != self.d {
            return Err(Error::dim(
                "gradient",
                format!("{0}x{0}", self.d),
                format!("{}x{}", grad.nrows(), grad.ncols()),
            ));
        }
        Ok(())
    }

    /// `1/2 A:hess + bbar:grad + 1/2 grad Abar grad + V`.
    pub fn apply(&self, grad: &DMatrix<f64>, hess: &DMatrix<f64>) -> Result<f64> {
        self.check_grad(grad)?;
        let dd = self.d * self.d;
        if hess.nrows() != dd || hess.ncols() != dd {
            return Err(Error::dim(
                "hessian",
                format!("{dd}x{dd}"),
                format!("{}x{}", hess.nrows(), hess.ncols()),
            ));
        }
        let second = 0.5 * self.big_a.component_mul(hess).sum();
        Ok(second + self.first_order(grad))
    }

    /// The operator without its second-order part.
    pub fn first_order(&self, grad: &DMatrix<f64>) -> f64 {
        let drift = self.bbar.component_mul(grad).sum();
        drift + 0.5 * full_form_value(&self.abar, grad) + self.v
    }

    pub fn a_svec(&self) -> DMatrix<f64> {
        full_form_to_svec(&self.big_a, self.d).expect("layout")
    }

    pub fn abar_svec(&self) -> DMatrix<f64> {
        full_form_to_svec(&self.abar, self.d).expect("layout")
    }

    /// `sum_ij u^{ij} grad_ij`, an m-vector.
    pub fn hedge_vector(&self, grad: &DMatrix<f64>) -> DVector<f64> {
        &self.u * flatten(grad)
    }

    pub fn default_branch(&self) -> PolicyBranch {
        if self.market.m > self.market.n {
            PolicyBranch::Wide
        } else {
            PolicyBranch::Tall
        }
    }

    pub fn pi(&self, grad: &DMatrix<f64>, p: f64) -> Result<DVector<f64>> {
        self.pi_branch(grad, p, self.default_branch())
    }

    pub fn pi_branch(&self, grad: &DMatrix<f64>, p: f64, branch: PolicyBranch) -> Result<DVector<f64>> {
        self.check_grad(grad)?;
        let mc = &self.market;
        let h = self.hedge_vector(grad);
        let scale = 1.0 / (1.0 - p);
        match branch {
            PolicyBranch::Wide => {
                let chol = mc
                    .big_sigma
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Ellipticity("Sigma is singular".into()))?;
                let rhs = &mc.big_sigma * &mc.nu + &mc.sigma * h;
                Ok(chol.solve(&rhs) * scale)
            }
            PolicyBranch::Tall => {
                let sts = mc.sigma.transpose() * &mc.sigma;
                let chol = sts
                    .cholesky()
                    .ok_or_else(|| Error::Ellipticity("sigma' sigma is singular".into()))?;
                let rhs = mc.sigma.transpose() * &mc.nu + h;
                Ok(&mc.sigma * chol.solve(&rhs) * scale)
            }
        }
    }

    pub fn eta(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        self.state.eta(grad)
    }
}
