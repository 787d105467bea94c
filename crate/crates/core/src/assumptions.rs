//! Verdicts for the parameter restrictions: closed-form in the Wishart case,
//! sampled on meshes otherwise.
//!
//! Sampled checks examine two meshes. The norm-shell mesh has geometric
//! norm levels with random SPD directions; the small-determinant ladder
//! drives the smallest eigenvalue towards zero under fixed random rotations.
//! Asymptotic statements are judged from the trend of per-level extrema, so
//! sampled verdicts are never marked as certified.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::model::{Field, ModelSpec, OperatorCoeffs, StateModel, Volatility};
use crate::spd::{SpdMatrix, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub quantity: String,
    pub value: f64,
    /// Row-major state point, when the violation is located at one.
    pub point: Option<Vec<Vec<f64>>>,
}

impl Witness {
    fn at(quantity: impl Into<String>, value: f64, x: Option<&SpdMatrix>) -> Self {
        Witness {
            quantity: quantity.into(),
            value,
            point: x.map(|x| rows(x.as_matrix())),
        }
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub verdict: Verdict,
    pub certified: bool,
    pub witness: Option<Witness>,
    pub details: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        CheckReport {
            name: name.into(),
            verdict: Verdict::Indeterminate,
            certified: false,
            witness: None,
            details: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn detail(&mut self, key: &str, v: f64) {
        self.details.insert(key.into(), v);
    }

    fn fail(&mut self, w: Witness) {
        self.verdict = Verdict::Fail;
        self.witness = Some(w);
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub points: Vec<SpdMatrix>,
    /// Level index of each point.
    pub level: Vec<usize>,
    /// Level parameter: Frobenius norm for shells, smallest eigenvalue for
    /// the ladder.
    pub levels: Vec<f64>,
}

pub const SHELL_LEVELS: usize = 24;
pub const SHELL_DIRECTIONS: usize = 50;
pub const LADDER_LEVELS: usize = 13;

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

impl Mesh {
    /// `SHELL_LEVELS` norms on `[1e-2, 1e4]` times `SHELL_DIRECTIONS` random
    /// unit-norm SPD directions.
    pub fn norm_shells(d: usize, seed: u64) -> Mesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs: Vec<DMatrix<f64>> = (0..SHELL_DIRECTIONS)
            .map(|_| {
                let q = random_rotation(d, &mut rng);
                let eig = DVector::from_fn(d, |_, _| (rng.gen_range(-3.0f64..0.0)).exp());
                let m = &q * DMatrix::from_diagonal(&eig) * q.transpose();
                let m = SymMatrix::symmetrize(&m).expect("square").into_matrix();
                let n = m.norm();
                m / n
            })
            .collect();
        let levels = geometric(1e-2, 1e4, SHELL_LEVELS);
        let mut points = Vec::new();
        let mut level = Vec::new();
        for (k, r) in levels.iter().enumerate() {
            for dir in &dirs {
                points.push(SpdMatrix::from_matrix(&(dir * *r)).expect("scaled SPD direction"));
                level.push(k);
            }
        }
        Mesh { points, level, levels }
    }

    /// Smallest eigenvalue on a geometric grid from `1e-2` down to `1e-8`,
    /// the other eigenvalues in `[0.5, 2]`, under `SHELL_DIRECTIONS` random
    /// rotations.
    pub fn small_det_ladder(d: usize, seed: u64) -> Mesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1add);
        let frames: Vec<(DMatrix<f64>, Vec<f64>)> = (0..SHELL_DIRECTIONS)
            .map(|_| {
                let q = random_rotation(d, &mut rng);
                let rest = (1..d).map(|_| rng.gen_range(0.5..2.0)).collect();
                (q, rest)
            })
            .collect();
        let levels = geometric(1e-2, 1e-8, LADDER_LEVELS);
        let mut points = Vec::new();
        let mut level = Vec::new();
        for (k, eps) in levels.iter().enumerate() {
            for (q, rest) in &frames {
                let mut eig = vec![*eps];
                eig.extend_from_slice(rest);
                let m = q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
                let s = SymMatrix::symmetrize(&m).expect("square");
                points.push(SpdMatrix::new(s).unwrap_or_else(|_| {
                    SpdMatrix::from_diagonal(&vec![*eps; d]).expect("positive diagonal")
                }));
                level.push(k);
            }
        }
        Mesh { points, level, levels }
    }

    pub fn from_points(points: Vec<SpdMatrix>) -> Mesh {
        let n = points.len();
        Mesh {
            points,
            level: vec![0; n],
            levels: vec![0.0],
        }
    }

    /// Minimum of `vals` on each level, with the index of the minimizer.
    pub fn level_min(&self, vals: &[f64]) -> Vec<(f64, usize)> {
        let mut out = vec![(f64::INFINITY, usize::MAX); self.levels.len()];
        for (i, v) in vals.iter().enumerate() {
            let slot = &mut out[self.level[i]];
            if *v < slot.0 || slot.1 == usize::MAX || v.is_nan() {
                *slot = (*v, i);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Meshes {
    pub large: Mesh,
    pub small: Mesh,
}

impl Meshes {
    pub fn standard(d: usize, seed: u64) -> Meshes {
        Meshes {
            large: Mesh::norm_shells(d, seed),
            small: Mesh::small_det_ladder(d, seed),
        }
    }

    pub fn all_points(&self) -> impl Iterator<Item = &SpdMatrix> {
        self.large.points.iter().chain(self.small.points.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    /// per-level minima settle
    Bounded,
    /// drops keep growing
    Diverging,
    /// strictly increasing over the final levels
    Increasing,
    Unclear,
}

/// Classifies per-level minima ordered towards the asymptotic regime.
pub fn ladder_trend(vals: &[f64]) -> Trend {
    let n = vals.len();
    if vals.iter().any(|v| v.is_nan()) {
        return Trend::Unclear;
    }
    if n < 3 {
        return Trend::Unclear;
    }
    if vals.iter().any(|v| *v == f64::NEG_INFINITY) {
        return Trend::Diverging;
    }
    let d_last = vals[n - 2] - vals[n - 1];
    let d_prev = vals[n - 3] - vals[n - 2];
    if d_last < 0.0 && d_prev < 0.0 {
        return Trend::Increasing;
    }
    if d_last <= 0.0 || d_last < 0.5 * d_prev {
        return Trend::Bounded;
    }
    if d_last >= 0.9 * d_prev {
        return Trend::Diverging;
    }
    Trend::Unclear
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymMatrix::symmetrize(m).expect("square").min_eigenvalue()
}

fn max_eig(m: &DMatrix<f64>) -> f64 {
    SymMatrix::symmetrize(m).expect("square").max_eigenvalue()
}

fn coeffs(spec: &ModelSpec, x: &SpdMatrix) -> Option<OperatorCoeffs> {
    spec.operator_coeffs(x).ok()
}

const NONSTRICT_TOL: f64 = 1e-12;

/// Well-posedness of the state: `LL' >= (d+1) Lambda Lambda' > 0` for
/// Wishart states, sampled bounds on `H_0(x; b)`, growth and local
/// ellipticity otherwise.
pub fn check_wellposedness(spec: &ModelSpec, meshes: &Meshes) -> CheckReport {
    match &spec.state {
        StateModel::Wishart(w) => {
            let mut rep = CheckReport::new("wellposedness");
            let d = w.d as f64;
            let llt = w.llt();
            let ll = w.lambda_lambda_t();
            let gap = min_eig(&(&llt - &ll * (d + 1.0)));
            let lam = min_eig(&ll);
            let tol = NONSTRICT_TOL * (1.0 + llt.norm());
            rep.detail("min_eig_LLt_minus_(d+1)LambdaLambdat", gap);
            rep.detail("min_eig_LambdaLambdat", lam);
            rep.detail("strict", if gap > tol { 1.0 } else { 0.0 });
            rep.certified = true;
            if lam <= 0.0 {
                rep.fail(Witness::at("min eigenvalue of Lambda Lambda'", lam, None));
            } else if gap < -tol {
                rep.fail(Witness::at("min eigenvalue of LL' - (d+1) Lambda Lambda'", gap, None));
            } else {
                rep.verdict = Verdict::Pass;
            }
            rep
        }
        StateModel::General(_) => check_wellposedness_sampled(spec, meshes),
    }
}

/// Mesh-based variant of [`check_wellposedness`] that works for any state.
pub fn check_wellposedness_sampled(spec: &ModelSpec, meshes: &Meshes) -> CheckReport {
    let mut rep = CheckReport::new("wellposedness");
    // local ellipticity of f, g
    let mut worst: Option<(f64, &SpdMatrix, &str)> = None;
    for x in meshes.all_points() {
        let Ok(sc) = spec.state_coeffs(x) else { continue };
        for (name, m) in [("f", &sc.f), ("g", &sc.g)] {
            let e = min_eig(m);
            if worst.map_or(true, |(w, _, _)| e < w) {
                worst = Some((e, x, name));
            }
        }
    }
    if let Some((e, x, name)) = worst {
        rep.detail("min_eig_f_g", e);
        if !(e > 0.0) {
            rep.fail(Witness::at(format!("min eigenvalue of {name}(x)"), e, Some(x)));
            rep.notes.push("local ellipticity (f > 0, g > 0) fails".into());
            return rep;
        }
    }
    let h0 = |x: &SpdMatrix| spec.h_delta(x, 0.0, None).unwrap_or(f64::NAN);
    let small_vals: Vec<f64> = meshes.small.points.iter().map(h0).collect();
    let large_vals: Vec<f64> = meshes.large.points.iter().map(h0).collect();
    let small_min = meshes.small.level_min(&small_vals);
    let large_min = meshes.large.level_min(&large_vals);
    let small_trend = ladder_trend(&small_min.iter().map(|v| v.0).collect::<Vec<_>>());
    let large_trend = ladder_trend(&large_min.iter().map(|v| v.0).collect::<Vec<_>>());
    let (inf_val, inf_idx, inf_small) = small_min
        .iter()
        .map(|v| (v.0, v.1, true))
        .chain(large_min.iter().map(|v| (v.0, v.1, false)))
        .fold((f64::INFINITY, 0, true), |a, b| if b.0 < a.0 { b } else { a });
    rep.detail("inf_H0_sampled", inf_val);
    // growth ratio Tr(f) Tr(g) / (1 + |x|^2) over norm shells
    let ratios: Vec<f64> = meshes
        .large
        .points
        .iter()
        .map(|x| {
            spec.state_coeffs(x)
                .map(|sc| sc.f.trace() * sc.g.trace() / (1.0 + x.frobenius_norm().powi(2)))
                .unwrap_or(f64::NAN)
        })
        .collect();
    let neg: Vec<f64> = ratios.iter().map(|r| -r).collect();
    let per_level: Vec<f64> = meshes.large.level_min(&neg).iter().map(|v| -v.0).collect();
    let growth_max = per_level.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    rep.detail("max_growth_ratio", growth_max);
    let k = per_level.len();
    let growth_ok = k < 2 || per_level[k - 1] <= 1.5 * per_level[k - 2] + 1e-12;
    let point = if inf_small {
        &meshes.small.points[inf_idx]
    } else {
        &meshes.large.points[inf_idx]
    };
    if small_trend == Trend::Diverging || large_trend == Trend::Diverging {
        rep.fail(Witness::at("H_0(x; b) decreasing without bound", inf_val, Some(point)));
    } else if !growth_ok {
        rep.fail(Witness::at("Tr(f)Tr(g)/(1+|x|^2) growing", growth_max, None));
    } else if matches!(small_trend, Trend::Bounded | Trend::Increasing)
        && matches!(large_trend, Trend::Bounded | Trend::Increasing)
    {
        rep.verdict = Verdict::Pass;
    }
    rep
}

/// Which ellipticity form applies to the volatility.
fn vol_form(spec: &ModelSpec, x: &SpdMatrix) -> Option<(String, f64)> {
    let (n, d, m) = (spec.n(), spec.d(), spec.m());
    match &spec.market.vol {
        Volatility::Factor(z) => {
            let z = z.eval(x);
            if d > n {
                Some(("zeta zeta'".into(), min_eig(&(&z * z.transpose()))))
            } else if d < n {
                Some(("zeta' zeta".into(), min_eig(&(z.transpose() * &z))))
            } else {
                let asym = (&z - z.transpose()).amax();
                let e = min_eig(&z);
                Some(("zeta = zeta' > 0".into(), if asym > 1e-12 { -asym } else { e }))
            }
        }
        Volatility::Direct(s) => {
            let s = s.eval(x);
            if m >= n {
                Some(("sigma sigma'".into(), min_eig(&(&s * s.transpose()))))
            } else {
                Some(("sigma' sigma".into(), min_eig(&(s.transpose() * &s))))
            }
        }
    }
}

/// `f, g > 0` and the volatility form selected by the dimensions.
pub fn check_ellipticity(spec: &ModelSpec, mesh: &Mesh) -> CheckReport {
    let mut rep = check_ellipticity_sampled(spec, mesh);
    if spec.is_constant_wishart() && rep.verdict != Verdict::Indeterminate {
        // f = x > 0 on the whole cone, g and the volatility form are constant
        rep.certified = true;
    }
    rep
}

pub fn check_ellipticity_sampled(spec: &ModelSpec, mesh: &Mesh) -> CheckReport {
    let mut rep = CheckReport::new("ellipticity");
    let mut worst_fg: Option<(f64, usize)> = None;
    let mut worst_vol: Option<(f64, usize, String)> = None;
    for (i, x) in mesh.points.iter().enumerate() {
        if let Ok(sc) = spec.state_coeffs(x) {
            let e = min_eig(&sc.f).min(min_eig(&sc.g));
            if worst_fg.as_ref().map_or(true, |w| e < w.0) {
                worst_fg = Some((e, i));
            }
        }
        if let Some((name, e)) = vol_form(spec, x) {
            if worst_vol.as_ref().map_or(true, |w| e < w.0) {
                worst_vol = Some((e, i, name));
            }
        }
    }
    let Some((efg, ifg)) = worst_fg else {
        rep.notes.push("empty mesh".into());
        return rep;
    };
    rep.detail("min_eig_f_g", efg);
    let (ev, iv, name) = worst_vol.expect("mesh nonempty");
    rep.detail("min_eig_volatility_form", ev);
    rep.notes.push(format!("volatility form: {name}"));
    if !(efg > 0.0) {
        rep.fail(Witness::at("min eigenvalue of f(x), g(x)", efg, Some(&mesh.points[ifg])));
    } else if !(ev > 0.0) {
        rep.fail(Witness::at(format!("min eigenvalue of {name}"), ev, Some(&mesh.points[iv])));
    } else {
        rep.verdict = Verdict::Pass;
    }
    rep
}

/// Upper bound of the scale factor of a field over the state space, if known.
fn field_sup(f: &Field) -> Option<f64> {
    f.sup_scale().map(|(_, hi)| hi.abs().max(1.0f64.min(hi.abs())))
}

/// `rho' rho C C' <= 1` (strict: `< 1`).
pub fn check_correlation(spec: &ModelSpec, mesh: &Mesh, strict: bool) -> CheckReport {
    let name = if strict { "correlation_strict" } else { "correlation" };
    let mut rep = CheckReport::new(name);
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for (i, x) in mesh.points.iter().enumerate() {
        let Ok(mc) = spec.market(x) else { continue };
        let v = mc.rho.dot(&mc.rho) * max_eig(&(&mc.c * mc.c.transpose()));
        if v > worst.0 {
            worst = (v, i);
        }
    }
    let mk = &spec.market;
    let mut sup = worst.0;
    let mut certified = false;
    if let (Some(bc), Some(br), Some(sc), Some(sr)) =
        (mk.corr_c.base(), mk.rho.base(), field_sup(&mk.corr_c), field_sup(&mk.rho))
    {
        // built-in fields are positive scalings of a base value
        let br = DVector::from_column_slice(br.as_slice());
        let bound = br.dot(&br) * max_eig(&(bc * bc.transpose())) * sr * sr * sc * sc;
        if mk.corr_c.is_constant() && mk.rho.is_constant() {
            sup = bound;
        } else {
            sup = sup.max(bound);
        }
        certified = true;
    }
    rep.certified = certified;
    rep.detail("sup_rho_rho_CCt", sup);
    rep.detail("gap", 1.0 - sup);
    let ok = if strict { sup < 1.0 } else { sup <= 1.0 + NONSTRICT_TOL };
    if ok {
        rep.verdict = Verdict::Pass;
    } else {
        let x = mesh.points.get(worst.1);
        rep.fail(Witness::at("largest eigenvalue of rho'rho CC'", sup, x));
    }
    rep
}

fn kbar(spec: &ModelSpec, x: &SpdMatrix) -> Option<DMatrix<f64>> {
    let w = spec.wishart()?;
    let mc = spec.market(x).ok()?;
    let zeta = match &spec.market.vol {
        Volatility::Factor(z) => z.eval(x),
        Volatility::Direct(_) => return None,
    };
    Some(&w.k - &w.lambda * &mc.rho * mc.nu.transpose() * zeta * spec.q)
}

/// `p (r1 + r1') - q zeta' nu nu' zeta`.
fn forcing(spec: &ModelSpec, x: &SpdMatrix) -> Option<DMatrix<f64>> {
    let mc = spec.market(x).ok()?;
    let zeta = match &spec.market.vol {
        Volatility::Factor(z) => z.eval(x),
        Volatility::Direct(_) => return None,
    };
    let r1 = &spec.market.r1;
    let zn = zeta.transpose() * &mc.nu;
    Some((r1 + r1.transpose()) * spec.p - &zn * zn.transpose() * spec.q)
}

struct WishartSups {
    /// sup of the largest eigenvalue of Kbar + Kbar'
    kbar_max: f64,
    /// inf of the smallest eigenvalue of -forcing
    neg_forcing_min: f64,
    /// sup of the Frobenius norm of forcing
    forcing_norm: f64,
    exact: bool,
}

fn wishart_sups(spec: &ModelSpec, meshes: &Meshes) -> WishartSups {
    if spec.market.is_constant() {
        let x = SpdMatrix::identity(spec.d());
        let kb = kbar(spec, &x).expect("wishart");
        let fo = forcing(spec, &x).expect("wishart");
        return WishartSups {
            kbar_max: max_eig(&(&kb + kb.transpose())),
            neg_forcing_min: min_eig(&(-&fo)),
            forcing_norm: fo.norm(),
            exact: true,
        };
    }
    let mut s = WishartSups {
        kbar_max: f64::NEG_INFINITY,
        neg_forcing_min: f64::INFINITY,
        forcing_norm: 0.0,
        exact: false,
    };
    for x in meshes.all_points() {
        if let (Some(kb), Some(fo)) = (kbar(spec, x), forcing(spec, x)) {
            s.kbar_max = s.kbar_max.max(max_eig(&(&kb + kb.transpose())));
            s.neg_forcing_min = s.neg_forcing_min.min(min_eig(&(-&fo)));
            s.forcing_norm = s.forcing_norm.max(fo.norm());
        }
    }
    s
}

/// The explicit restrictions for (generalized) Wishart models.
pub fn check_prop_wishart(spec: &ModelSpec, meshes: &Meshes) -> CheckReport {
    let mut rep = CheckReport::new("prop_wishart");
    let Some(w) = spec.wishart() else {
        rep.notes.push("not a Wishart-family state".into());
        return rep;
    };
    let d = w.d as f64;
    let ll = w.lambda_lambda_t();
    let gap = min_eig(&(w.llt() - &ll * (d + 1.0)));
    let lam = min_eig(&ll);
    rep.detail("i_min_eig_gap", gap);
    rep.detail("i_min_eig_LambdaLambdat", lam);
    let sups = wishart_sups(spec, meshes);
    rep.certified = sups.exact;
    if !(gap > 0.0 && lam > 0.0) {
        rep.fail(Witness::at(
            "min eigenvalue of LL' - (d+1) Lambda Lambda' (strict)",
            gap.min(lam),
            None,
        ));
        return rep;
    }
    let r1 = &spec.market.r1;
    let r1_min = min_eig(&(r1 + r1.transpose()));
    rep.detail("mean_reversion_eps", -sups.kbar_max);
    if spec.p < 0.0 {
        rep.detail("ii_min_eig_r1_sym", r1_min);
        rep.detail("ii_alt1_eps", sups.neg_forcing_min);
        if r1_min < -NONSTRICT_TOL * (1.0 + r1.norm()) {
            rep.fail(Witness::at("min eigenvalue of r1 + r1'", r1_min, None));
            return rep;
        }
        if sups.neg_forcing_min > 0.0 {
            rep.notes.push("ii) holds via the forcing alternative".into());
            rep.verdict = Verdict::Pass;
        } else if sups.kbar_max < 0.0 {
            rep.notes.push("ii) holds via the mean-reversion alternative".into());
            rep.verdict = Verdict::Pass;
        } else {
            rep.fail(Witness::at(
                "both alternatives fail: inf min eig(-p(r1+r1')+q zeta'nu nu'zeta), -sup max eig(Kbar+Kbar')",
                sups.neg_forcing_min.max(-sups.kbar_max),
                None,
            ));
        }
    } else {
        let eps = -sups.kbar_max;
        let rhs = 8.0 * (1.0 - spec.q) * d.sqrt() * ll.trace() * sups.forcing_norm;
        rep.detail("iii_eps_squared", eps * eps);
        rep.detail("iii_rhs", rhs);
        if !(eps > 0.0) {
            rep.fail(Witness::at("sup max eig(Kbar + Kbar')", sups.kbar_max, None));
        } else if !(eps * eps > rhs) {
            rep.fail(Witness::at("eps^2 - 8(1-q) sqrt(d) Tr(Lambda Lambda') sup|forcing|", eps * eps - rhs, None));
        } else {
            rep.verdict = Verdict::Pass;
        }
    }
    rep
}

/// Fitted growth constants of the master assumption.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MasterConstants {
    pub alpha1: f64,
    pub beta1: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha2: f64,
}

fn branch_of(c: &MasterConstants, kappa_upper: f64) -> (&'static str, bool) {
    if c.gamma1 > 0.0 && c.beta1 <= 0.0 {
        ("5-i", c.alpha2 > 0.0)
    } else if c.gamma1 < 0.0 && c.beta1 > 0.0 {
        ("5-ii", c.beta1 * c.beta1 + 16.0 * kappa_upper * c.alpha1 * c.gamma1 > 0.0)
    } else if c.gamma1 >= 0.0 && c.beta1 > 0.0 {
        ("5-iii", true)
    } else {
        ("none", false)
    }
}

struct ShellSamples {
    norm: Vec<f64>,
    tf_tg: Vec<f64>,
    bx: Vec<f64>,
    v: Vec<f64>,
    fxgx: Vec<f64>,
}

fn shell_samples(spec: &ModelSpec, mesh: &Mesh) -> ShellSamples {
    let mut s = ShellSamples {
        norm: vec![],
        tf_tg: vec![],
        bx: vec![],
        v: vec![],
        fxgx: vec![],
    };
    for x in &mesh.points {
        let xm = x.as_matrix();
        match coeffs(spec, x) {
            Some(oc) => {
                s.norm.push(x.frobenius_norm());
                s.tf_tg.push(oc.state.f.trace() * oc.state.g.trace());
                s.bx.push((oc.bbar.transpose() * xm).trace());
                s.v.push(oc.v);
                s.fxgx.push((&oc.state.f * xm * &oc.state.g * xm).trace());
            }
            None => {
                s.norm.push(x.frobenius_norm());
                s.tf_tg.push(f64::NAN);
                s.bx.push(f64::NAN);
                s.v.push(f64::NAN);
                s.fxgx.push(f64::NAN);
            }
        }
    }
    s
}

/// Smallest shell level beyond which every fitted inequality holds with a
/// 10% margin on its slope.
fn find_n0(mesh: &Mesh, s: &ShellSamples, c: &MasterConstants, branch: &str) -> Option<f64> {
    let tol = |v: f64| 0.1 * v.abs().max(1e-12);
    let ok_point = |i: usize| -> bool {
        let n = s.norm[i];
        let a2 = s.tf_tg[i] / n <= c.alpha1 + tol(c.alpha1);
        let a3 = s.bx[i] / (n * n) <= -c.beta1 + tol(c.beta1);
        let a4 = s.v[i] / n <= -c.gamma1 + tol(c.gamma1) && s.v[i] / n >= -c.gamma2 - tol(c.gamma2);
        let a5 = branch != "5-i" || s.fxgx[i] / (n * n * n) >= c.alpha2 - tol(c.alpha2);
        a2 && a3 && a4 && a5
    };
    let nl = mesh.levels.len();
    let mut level_ok = vec![true; nl];
    for i in 0..mesh.points.len() {
        if !ok_point(i) {
            level_ok[mesh.level[i]] = false;
        }
    }
    let mut first = None;
    for k in (0..nl).rev() {
        if level_ok[k] {
            first = Some(k);
        } else {
            break;
        }
    }
    first.map(|k| mesh.levels[k])
}

const EPS_GRID_MAX_K: i32 = 20;

fn c0_grid() -> Vec<f64> {
    (-10..=10).rev().map(|k| 2f64.powi(k)).collect()
}

/// The master assumption: growth constants, the branch of part 5 and the
/// small-determinant parts A-C.
pub fn check_master(spec: &ModelSpec, meshes: &Meshes) -> CheckReport {
    if spec.wishart().is_some() {
        check_master_wishart(spec, meshes)
    } else {
        check_master_sampled(spec, meshes)
    }
}

fn check_master_wishart(spec: &ModelSpec, meshes: &Meshes) -> CheckReport {
    let mut rep = CheckReport::new("master");
    let w = spec.wishart().expect("wishart");
    let d = w.d as f64;
    let ll = w.lambda_lambda_t();
    let sups = wishart_sups(spec, meshes);
    let gamma2 = 0.5 * sups.forcing_norm;
    let c = MasterConstants {
        alpha1: d.sqrt() * ll.trace(),
        beta1: -sups.kbar_max,
        gamma1: if spec.p < 0.0 { 0.5 * sups.neg_forcing_min } else { -gamma2 },
        gamma2,
        alpha2: min_eig(&ll) / d.sqrt(),
    };
    put_constants(&mut rep, &c);
    let (branch, part5) = branch_of(&c, spec.kappa_upper);
    rep.notes.push(format!("part 5 branch: {branch}"));
    if branch == "5-ii" {
        rep.detail("5ii_margin", c.beta1 * c.beta1 + 16.0 * spec.kappa_upper * c.alpha1 * c.gamma1);
    }
    let shells = shell_samples(spec, &meshes.large);
    match find_n0(&meshes.large, &shells, &c, branch) {
        Some(n0) => rep.detail("n0", n0),
        None => rep.notes.push("no shell level satisfies the fitted inequalities with 10% margin".into()),
    }
    // part A: LL' - (1 + d + eps) Lambda Lambda' > 0
    let llt = w.llt();
    let mut eps_found = None;
    for k in 0..=EPS_GRID_MAX_K {
        let eps = 2f64.powi(-k);
        if min_eig(&(&llt - &ll * (1.0 + d + eps))) > 0.0 {
            eps_found = Some(eps);
            break;
        }
    }
    rep.certified = sups.exact;
    if !part5 {
        rep.fail(Witness::at(
            format!("part 5 ({branch}) with beta1 = {:.6e}, gamma1 = {:.6e}", c.beta1, c.gamma1),
            c.beta1.max(c.gamma1),
            None,
        ));
        return rep;
    }
    let Some(eps) = eps_found else {
        let e = 2f64.powi(-EPS_GRID_MAX_K);
        rep.fail(Witness::at(
            "min eig(LL' - (1+d+eps) Lambda Lambda') at the smallest eps",
            min_eig(&(&llt - &ll * (1.0 + d + e))),
            None,
        ));
        rep.notes.push("part A: no eps > 0 on the grid".into());
        return rep;
    };
    rep.detail("eps", eps);
    // with a strict margin, delta Tr(x^-1) dominates c0 log det x and |x|
    rep.detail("c0", *c0_grid().first().expect("nonempty"));
    rep.detail("c1", 1.0);
    rep.notes.push("parts B and C hold for every c0, c1 > 0 once part A holds".into());
    rep.verdict = Verdict::Pass;
    rep
}

fn put_constants(rep: &mut CheckReport, c: &MasterConstants) {
    rep.detail("alpha1", c.alpha1);
    rep.detail("beta1", c.beta1);
    rep.detail("gamma1", c.gamma1);
    rep.detail("gamma2", c.gamma2);
    rep.detail("alpha2", c.alpha2);
}

/// Mesh-based master check for any model.
pub fn check_master_sampled(spec: &ModelSpec, meshes: &Meshes) -> CheckReport {
    let mut rep = CheckReport::new("master");
    let large = &meshes.large;
    let s = shell_samples(spec, large);
    let top = large.levels.len().saturating_sub(3);
    let idx: Vec<usize> = (0..large.points.len()).filter(|&i| large.level[i] >= top).collect();
    let fold_max = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).fold(f64::NEG_INFINITY, f64::max);
    let fold_min = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).fold(f64::INFINITY, f64::min);
    let c = MasterConstants {
        alpha1: fold_max(&|i| s.tf_tg[i] / s.norm[i]),
        beta1: -fold_max(&|i| s.bx[i] / s.norm[i].powi(2)),
        gamma1: -fold_max(&|i| s.v[i] / s.norm[i]),
        gamma2: fold_max(&|i| -s.v[i] / s.norm[i]),
        alpha2: fold_min(&|i| s.fxgx[i] / s.norm[i].powi(3)),
    };
    put_constants(&mut rep, &c);
    let (branch, part5) = branch_of(&c, spec.kappa_upper);
    rep.notes.push(format!("part 5 branch: {branch}"));
    let n0 = find_n0(large, &s, &c, branch);
    if let Some(n0) = n0 {
        rep.detail("n0", n0);
    }
    if !part5 {
        rep.fail(Witness::at(
            format!("part 5 ({branch}) with beta1 = {:.6e}, gamma1 = {:.6e}", c.beta1, c.gamma1),
            c.beta1.max(c.gamma1),
            None,
        ));
        return rep;
    }
    let small = &meshes.small;
    let pts: Vec<(OperatorCoeffs, &SpdMatrix)> = small
        .points
        .iter()
        .filter_map(|x| coeffs(spec, x).map(|oc| (oc, x)))
        .collect();
    if pts.len() != small.points.len() {
        rep.notes.push("coefficients undefined at some ladder points".into());
        return rep;
    }
    let h_with = |delta: f64, extra: &dyn Fn(&OperatorCoeffs, &SpdMatrix) -> f64| -> (Vec<f64>, Vec<(f64, usize)>) {
        let vals: Vec<f64> = pts
            .iter()
            .map(|(oc, x)| spec.h_delta(x, delta, Some(&oc.bbar)).unwrap_or(f64::NAN) + extra(oc, x))
            .collect();
        let mins = small.level_min(&vals);
        (vals, mins)
    };
    let trend_of = |mins: &[(f64, usize)]| ladder_trend(&mins.iter().map(|m| m.0).collect::<Vec<_>>());
    // part A
    let mut eps_found = None;
    let mut last_min = (f64::NAN, 0usize);
    for k in 0..=EPS_GRID_MAX_K {
        let eps = 2f64.powi(-k);
        let (_, mins) = h_with(eps, &|_, _| 0.0);
        last_min = *mins.last().expect("levels");
        if trend_of(&mins) == Trend::Bounded || trend_of(&mins) == Trend::Increasing {
            eps_found = Some(eps);
            break;
        }
    }
    let Some(eps) = eps_found else {
        rep.fail(Witness::at(
            "H_eps(x; bbar) decreasing without bound as det x -> 0",
            last_min.0,
            small.points.get(last_min.1),
        ));
        return rep;
    };
    rep.detail("eps", eps);
    // part B: largest c0 on the grid with a bounded ladder
    let mut c0_found = None;
    for c0 in c0_grid() {
        let (_, mins) = h_with(eps, &|_, x| c0 * x.determinant().ln());
        if matches!(trend_of(&mins), Trend::Bounded | Trend::Increasing) {
            c0_found = Some(c0);
            break;
        }
    }
    // part C with c1 = 1
    let (_, c_mins) = h_with(0.0, &|oc, _| oc.v);
    let c_trend = trend_of(&c_mins);
    rep.detail("c1", 1.0);
    match c0_found {
        Some(c0) => rep.detail("c0", c0),
        None => {
            rep.notes.push("part B: no c0 on the grid keeps the ladder bounded".into());
            return rep;
        }
    }
    if c_trend != Trend::Increasing {
        if c_trend == Trend::Diverging {
            let last = c_mins.last().expect("levels");
            rep.fail(Witness::at("H_0(x; bbar) + c1 V(x) decreasing as det x -> 0", last.0, small.points.get(last.1)));
        } else {
            rep.notes.push("part C: ladder not increasing".into());
        }
        return rep;
    }
    if n0.is_some() {
        rep.verdict = Verdict::Pass;
    } else {
        rep.notes.push("no shell level satisfies the fitted inequalities with 10% margin".into());
    }
    rep
}

/// `R(x) = U'(x) / x^(p-1) -> 1`, and optionally bounds `0 < r_lo <= r(x) <= r_hi`.
pub fn check_turnpike_ratio(
    u_prime: &dyn Fn(f64) -> f64,
    p: f64,
    probe: &[f64],
    tol: f64,
    rate: Option<(&ModelSpec, &Mesh)>,
) -> CheckReport {
    let mut rep = CheckReport::new("turnpike_ratio");
    let Some(&x_max) = probe.last() else {
        rep.notes.push("empty probe grid".into());
        return rep;
    };
    let ratio = |x: f64| u_prime(x) / x.powf(p - 1.0);
    let r_end = ratio(x_max);
    rep.detail("R_at_max", r_end);
    rep.detail("x_max", x_max);
    if probe.len() >= 2 {
        let x_prev = probe[probe.len() - 2];
        let (a, b) = ((ratio(x_prev) - 1.0).abs(), (r_end - 1.0).abs());
        if a > 0.0 && b > 0.0 {
            rep.detail("tail_slope", (b.ln() - a.ln()) / (x_max.ln() - x_prev.ln()));
        } else {
            rep.detail("tail_slope", 0.0);
        }
    }
    let mut ok = (r_end - 1.0).abs() <= tol;
    if !ok {
        rep.fail(Witness::at("|R(x_max) - 1|", (r_end - 1.0).abs(), None));
    }
    if let Some((spec, mesh)) = rate {
        let rs: Vec<f64> = mesh.points.iter().map(|x| spec.rate(x)).collect();
        let lo = rs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bounded = spec.market.r1.amax() == 0.0;
        rep.detail("r_min", lo);
        rep.detail("r_max", hi);
        if !(lo > 0.0) || !bounded {
            ok = false;
            if rep.witness.is_none() {
                let q = if bounded { "inf r(x)" } else { "r(x) unbounded (r1 != 0)" };
                rep.fail(Witness::at(q, lo, None));
            }
        }
    }
    if ok {
        rep.verdict = Verdict::Pass;
    }
    rep
}

/// Geometric probe grid on `[1e-2, 1e6]`.
pub fn default_probe_grid() -> Vec<f64> {
    geometric(1e-2, 1e6, 41)
}
