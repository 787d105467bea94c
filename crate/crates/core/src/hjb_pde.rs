//! Finite differences for `v_t = F[v]`, `v(0, .) = 0`, on truncated grids of
//! the SPD cone, with ergodic extraction and large-time diagnostics.
//!
//! `d = 1` uses log-spaced nodes in `x` and Crank-Nicolson for the linear
//! part with second-order Adams-Bashforth for `1/2 grad Abar grad + V`.
//! `d = 2` parametrizes `X = [[x, c sqrt(xz)], [c sqrt(xz), z]]` on a box in
//! the computational coordinates `(sqrt x, sqrt z, c)` and steps with a
//! Douglas ADI scheme, mixed and quadratic terms explicit.
//!
//! Truncation faces carry "second derivative zero along the face normal in
//! the matrix chart", which every function affine in `X` satisfies exactly.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::assumptions::{check_master, Meshes};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, OperatorCoeffs};
use crate::simulate::{simulate_state, McEstimate, PhiFunction, RngStreamSpec};
use crate::spd::{SpdMatrix, SymMatrix};

pub const X_MIN_FLOOR: f64 = 1e-3;
pub const C_MARGIN: f64 = 1e-2;
pub const MAX_HALVINGS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    D1,
    D2,
}

/// Three-point stencil `sum w[k] v[start + k]`.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    start: usize,
    w: [f64; 3],
}

/// Lagrange weights of the first and second derivative at `x` through
/// the nodes `a, b, c`.
fn lagrange3(x: f64, a: f64, b: f64, c: f64) -> ([f64; 3], [f64; 3]) {
    let da = (a - b) * (a - c);
    let db = (b - a) * (b - c);
    let dc = (c - a) * (c - b);
    let first = [(2.0 * x - b - c) / da, (2.0 * x - a - c) / db, (2.0 * x - a - b) / dc];
    let second = [2.0 / da, 2.0 / db, 2.0 / dc];
    (first, second)
}

fn axis_stencils(u: &[f64]) -> (Vec<Stencil>, Vec<Stencil>) {
    let n = u.len();
    let mut f = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let start = if i == 0 { 0 } else if i == n - 1 { n - 3 } else { i - 1 };
        let (w1, w2) = lagrange3(u[i], u[start], u[start + 1], u[start + 2]);
        f.push(Stencil { start, w: w1 });
        s.push(Stencil { start, w: w2 });
    }
    (f, s)
}

#[derive(Clone, Debug, Serialize)]
pub struct Grid {
    pub mode: GridMode,
    /// Physical node coordinates: `x` (d1); `x`, `z`, `c` (d2).
    pub axes: Vec<Vec<f64>>,
    /// Nodes this close to a face are excluded from interior error metrics.
    pub boundary_layer: usize,
    #[serde(skip)]
    comp: Vec<Vec<f64>>,
    #[serde(skip)]
    first: Vec<Vec<Stencil>>,
    #[serde(skip)]
    second: Vec<Vec<Stencil>>,
    #[serde(skip)]
    sh: Vec<usize>,
    #[serde(skip)]
    st: Vec<usize>,
}

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

impl Grid {
    fn build(mode: GridMode, axes: Vec<Vec<f64>>, comp: Vec<Vec<f64>>, boundary_layer: usize) -> Grid {
        let (first, second): (Vec<_>, Vec<_>) = comp.iter().map(|u| axis_stencils(u)).unzip();
        let sh: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let mut st = vec![1; sh.len()];
        for a in (0..sh.len().saturating_sub(1)).rev() {
            st[a] = st[a + 1] * sh[a + 1];
        }
        Grid {
            mode,
            sh,
            st,
            axes,
            boundary_layer,
            comp,
            first,
            second,
        }
    }

    fn check_axis(name: &str, lo: f64, hi: f64, n: usize) -> Result<()> {
        if !(hi > lo) || n < 5 {
            return Err(Error::param(name, "need lo < hi and at least 5 nodes"));
        }
        Ok(())
    }

    /// Log-spaced nodes on `[lo, hi]`.
    pub fn d1(lo: f64, hi: f64, n: usize) -> Result<Grid> {
        Self::check_axis("pde.x", lo, hi, n)?;
        if lo < X_MIN_FLOOR {
            return Err(Error::param("pde.x", format!("lower bound below {X_MIN_FLOOR}")));
        }
        let x = geometric(lo, hi, n);
        Ok(Self::build(GridMode::D1, vec![x.clone()], vec![x], (n / 40).max(2)))
    }

    /// Uniform in `sqrt x`, `sqrt z` and `c`.
    pub fn d2(x: (f64, f64, usize), z: (f64, f64, usize), c: (f64, f64, usize)) -> Result<Grid> {
        Self::check_axis("pde.x", x.0, x.1, x.2)?;
        Self::check_axis("pde.z", z.0, z.1, z.2)?;
        Self::check_axis("pde.c", c.0, c.1, c.2)?;
        if x.0 < X_MIN_FLOOR || z.0 < X_MIN_FLOOR {
            return Err(Error::param("pde.x/pde.z", format!("lower bound below {X_MIN_FLOOR}")));
        }
        if c.0 < -1.0 + C_MARGIN || c.1 > 1.0 - C_MARGIN {
            return Err(Error::param("pde.c", format!("|c| must stay within 1 - {C_MARGIN}")));
        }
        let s = uniform(x.0.sqrt(), x.1.sqrt(), x.2);
        let t = uniform(z.0.sqrt(), z.1.sqrt(), z.2);
        let cc = uniform(c.0, c.1, c.2);
        let xs = s.iter().map(|v| v * v).collect();
        let zs = t.iter().map(|v| v * v).collect();
        Ok(Self::build(GridMode::D2, vec![xs, zs, cc.clone()], vec![s, t, cc], 2))
    }

    pub fn default_d1() -> Grid {
        Self::d1(1e-3, 20.0, 400).expect("valid default")
    }

    pub fn default_d2() -> Grid {
        Self::d2((0.05, 6.0, 48), (0.05, 6.0, 48), (-0.9, 0.9, 24)).expect("valid default")
    }

    pub fn with_boundary_layer(mut self, w: usize) -> Grid {
        self.boundary_layer = w;
        self
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            GridMode::D1 => 1,
            GridMode::D2 => 2,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.sh.to_vec()
    }

    pub fn len(&self) -> usize {
        self.sh.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn strides(&self) -> Vec<usize> {
        self.st.to_vec()
    }

    fn nd(&self) -> usize {
        self.sh.len()
    }

    pub fn multi(&self, idx: usize) -> Vec<usize> {
        let mut m = vec![0; self.nd()];
        for a in 0..self.nd() {
            m[a] = (idx / self.st[a]) % self.sh[a];
        }
        m
    }

    /// Multi-index padded to three axes.
    fn multi3(&self, idx: usize) -> [usize; 3] {
        let mut m = [0; 3];
        for a in 0..self.nd() {
            m[a] = (idx / self.st[a]) % self.sh[a];
        }
        m
    }

    pub fn flat(&self, m: &[usize]) -> usize {
        self.st.iter().zip(m).map(|(s, i)| s * i).sum()
    }

    /// Physical coordinates of a node.
    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let m = self.multi3(idx);
        (0..self.nd()).map(|a| self.axes[a][m[a]]).collect()
    }

    pub fn matrix_at(&self, idx: usize) -> DMatrix<f64> {
        let c = self.coords(idx);
        match self.mode {
            GridMode::D1 => DMatrix::from_element(1, 1, c[0]),
            GridMode::D2 => {
                let y = c[2] * (c[0] * c[1]).sqrt();
                DMatrix::from_row_slice(2, 2, &[c[0], y, y, c[1]])
            }
        }
    }

    pub fn point(&self, idx: usize) -> SpdMatrix {
        SpdMatrix::from_matrix(&self.matrix_at(idx)).expect("grid nodes are SPD")
    }

    /// Whether the node lies on a truncation face.
    pub fn on_face(&self, idx: usize) -> bool {
        let m = self.multi3(idx);
        (0..self.nd()).any(|a| m[a] == 0 || m[a] + 1 == self.sh[a])
    }

    /// Whether the node is at least `boundary_layer` nodes from every face.
    pub fn interior(&self, idx: usize) -> bool {
        let w = self.boundary_layer;
        let m = self.multi3(idx);
        (0..self.nd()).all(|a| m[a] >= w && m[a] + w < self.sh[a])
    }

    /// Node closest to the identity matrix.
    pub fn reference_index(&self) -> usize {
        let target = DMatrix::identity(self.dim(), self.dim());
        (0..self.len())
            .min_by(|a, b| {
                let da = (self.matrix_at(*a) - &target).norm();
                let db = (self.matrix_at(*b) - &target).norm();
                da.total_cmp(&db)
            })
            .expect("nonempty grid")
    }

    /// Nodes whose physical coordinates lie in `[lo, hi]` componentwise.
    pub fn box_nodes(&self, lo: &[f64], hi: &[f64]) -> Vec<usize> {
        (0..self.len())
            .filter(|i| {
                let c = self.coords(*i);
                c.iter().zip(lo).zip(hi).all(|((v, l), h)| *v >= *l - 1e-12 && *v <= *h + 1e-12)
            })
            .collect()
    }

    fn apply(&self, st: &Stencil, v: &[f64], idx: usize, axis: usize, i: usize) -> f64 {
        let stride = self.st[axis];
        let base = idx - i * stride + st.start * stride;
        st.w[0] * v[base] + st.w[1] * v[base + stride] + st.w[2] * v[base + 2 * stride]
    }

    /// Derivatives in computational coordinates at a node:
    /// `(first, pure second, mixed [01, 02, 12])`.
    fn comp_derivs(&self, v: &[f64], idx: usize) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let m = self.multi3(idx);
        let mut first = [0.0; 3];
        let mut second = [0.0; 3];
        for a in 0..self.nd() {
            first[a] = self.apply(&self.first[a][m[a]], v, idx, a, m[a]);
            second[a] = self.apply(&self.second[a][m[a]], v, idx, a, m[a]);
        }
        let mut mixed = [0.0; 3];
        if self.mode == GridMode::D2 {
            let st = &self.st;
            for (slot, (a, b)) in [(0usize, 1usize), (0, 2), (1, 2)].into_iter().enumerate() {
                let sa = self.first[a][m[a]];
                let sb = self.first[b][m[b]];
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        let mut mm = m;
                        mm[a] = sa.start + p;
                        mm[b] = sb.start + q;
                        let j = mm[0] * st[0] + mm[1] * st[1] + mm[2] * st[2];
                        acc += sa.w[p] * sb.w[q] * v[j];
                    }
                }
                mixed[slot] = acc;
            }
        }
        (first, second, mixed)
    }

    /// Chain rule from computational derivatives to `(d/dx, d/dy, d/dz)` with
    /// `y` the off-diagonal entry.
    fn chart_gradient(&self, idx: usize, du: &[f64; 3]) -> [f64; 3] {
        match self.mode {
            GridMode::D1 => [du[0], 0.0, 0.0],
            GridMode::D2 => {
                let m = self.multi3(idx);
                let (s, t, c) = (self.comp[0][m[0]], self.comp[1][m[1]], self.comp[2][m[2]]);
                let gy = du[2] / (s * t);
                let gx = (du[0] - c * t * gy) / (2.0 * s);
                let gz = (du[1] - c * s * gy) / (2.0 * t);
                [gx, gy, gz]
            }
        }
    }

    /// Symmetric matrix gradient `D_(ij) v` at a node.
    pub fn gradient_at(&self, v: &[f64], idx: usize) -> DMatrix<f64> {
        let (du, _, _) = self.comp_derivs(v, idx);
        let g = self.chart_gradient(idx, &du);
        match self.mode {
            GridMode::D1 => DMatrix::from_element(1, 1, g[0]),
            GridMode::D2 => DMatrix::from_row_slice(2, 2, &[g[0], 0.5 * g[1], 0.5 * g[1], g[2]]),
        }
    }

    /// Gradients at every node, packed as `[g11]` or `[g11, g12, g22]`.
    pub fn gradients(&self, v: &[f64]) -> Vec<f64> {
        let k = self.dim() * (self.dim() + 1) / 2;
        let mut out = vec![0.0; self.len() * k];
        out.par_chunks_mut(k).enumerate().for_each(|(i, slot)| {
            let g = self.gradient_at(v, i);
            if k == 1 {
                slot[0] = g[(0, 0)];
            } else {
                slot[0] = g[(0, 0)];
                slot[1] = g[(0, 1)];
                slot[2] = g[(1, 1)];
            }
        });
        out
    }

    /// Fractional computational index of a matrix, clamped to the grid; the
    /// flag reports clamping.
    fn locate(&self, x: &SpdMatrix) -> (Vec<f64>, bool) {
        let m = x.as_matrix();
        let phys: Vec<f64> = match self.mode {
            GridMode::D1 => vec![m[(0, 0)]],
            GridMode::D2 => {
                let (a, b) = (m[(0, 0)], m[(1, 1)]);
                vec![a.sqrt(), b.sqrt(), m[(0, 1)] / (a * b).sqrt()]
            }
        };
        let mut out = Vec::with_capacity(phys.len());
        let mut clamped = false;
        for (a, u) in phys.iter().enumerate() {
            let nodes = &self.comp[a];
            let n = nodes.len();
            if *u <= nodes[0] {
                clamped |= *u < nodes[0];
                out.push(0.0);
            } else if *u >= nodes[n - 1] {
                clamped |= *u > nodes[n - 1];
                out.push((n - 1) as f64);
            } else {
                let k = nodes.partition_point(|v| v <= u).saturating_sub(1).min(n - 2);
                out.push(k as f64 + (u - nodes[k]) / (nodes[k + 1] - nodes[k]));
            }
        }
        (out, clamped)
    }

    /// Multilinear weights of the cell containing a fractional index.
    fn cell_weights(&self, f: &[f64]) -> Vec<(usize, f64)> {
        let sh = self.shape();
        let mut lo = Vec::new();
        let mut fr = Vec::new();
        for (a, v) in f.iter().enumerate() {
            let k = (v.floor() as usize).min(sh[a] - 2);
            lo.push(k);
            fr.push(v - k as f64);
        }
        let nd = f.len();
        let mut out = Vec::with_capacity(1 << nd);
        for corner in 0..(1usize << nd) {
            let mut m = lo.clone();
            let mut w = 1.0;
            for a in 0..nd {
                if corner >> a & 1 == 1 {
                    m[a] += 1;
                    w *= fr[a];
                } else {
                    w *= 1.0 - fr[a];
                }
            }
            if w != 0.0 {
                out.push((self.flat(&m), w));
            }
        }
        out
    }
}

/// Per-node coefficients of the operator in computational coordinates:
/// `sum_a (diff_a v_aa + drift_a v_a) + sum_{a<b} mixed_ab v_ab
///  + 1/2 v_u' quad v_u + pot`.
#[derive(Clone, Debug, Default)]
struct NodeCoeffs {
    diff: Vec<[f64; 3]>,
    drift: Vec<[f64; 3]>,
    mixed: Vec<[f64; 3]>,
    quad: Vec<[f64; 6]>,
    pot: Vec<f64>,
}

fn sym3(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

fn quad_form(q: &[f64; 6], g: &[f64; 3]) -> f64 {
    q[0] * g[0] * g[0] + q[3] * g[1] * g[1] + q[5] * g[2] * g[2]
        + 2.0 * (q[1] * g[0] * g[1] + q[2] * g[0] * g[2] + q[4] * g[1] * g[2])
}

fn node_coeffs(spec: &ModelSpec, grid: &Grid) -> Result<NodeCoeffs> {
    let n = grid.len();
    let per: Vec<Result<([f64; 3], [f64; 3], [f64; 3], [f64; 6], f64)>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let x = grid.point(idx);
            let oc = spec.operator_coeffs(&x)?;
            Ok(match grid.mode {
                GridMode::D1 => (
                    [0.5 * oc.big_a[(0, 0)], 0.0, 0.0],
                    [oc.bbar[(0, 0)], 0.0, 0.0],
                    [0.0; 3],
                    [oc.abar[(0, 0)], 0.0, 0.0, 0.0, 0.0, 0.0],
                    oc.v,
                ),
                GridMode::D2 => d2_coeffs(grid, idx, &oc),
            })
        })
        .collect();
    let mut c = NodeCoeffs::default();
    for r in per {
        let (d, b, m, q, v) = r?;
        c.diff.push(d);
        c.drift.push(b);
        c.mixed.push(m);
        c.quad.push(q);
        c.pot.push(v);
    }
    Ok(c)
}

/// Restriction of a full-layout form to the entries `(11), (12), (22)`.
fn chart_form(full: &DMatrix<f64>) -> Matrix3<f64> {
    let ix = [0usize, 1, 3];
    Matrix3::from_fn(|a, b| full[(ix[a], ix[b])])
}

fn d2_coeffs(grid: &Grid, idx: usize, oc: &OperatorCoeffs) -> ([f64; 3], [f64; 3], [f64; 3], [f64; 6], f64) {
    let m = grid.multi(idx);
    let (s, t, c) = (grid.comp[0][m[0]], grid.comp[1][m[1]], grid.comp[2][m[2]]);
    // w = (s^2, c s t, t^2)
    let j = Matrix3::new(2.0 * s, 0.0, 0.0, c * t, c * s, s * t, 0.0, 2.0 * t, 0.0);
    let ji = j.try_inverse().expect("chart is regular inside the box");
    let a_w = chart_form(&oc.big_a);
    let abar_w = chart_form(&oc.abar);
    let b_w = Vector3::new(oc.bbar[(0, 0)], oc.bbar[(0, 1)], oc.bbar[(1, 1)]);
    let a_u = ji * a_w * ji.transpose();
    let h_y = Matrix3::new(0.0, c, t, c, 0.0, s, t, s, 0.0);
    let tau = Vector3::new(2.0 * a_u[(0, 0)], (a_u * h_y).trace(), 2.0 * a_u[(1, 1)]);
    let b_u = ji * (b_w - tau * 0.5);
    let q_u = ji * abar_w * ji.transpose();
    (
        [0.5 * a_u[(0, 0)], 0.5 * a_u[(1, 1)], 0.5 * a_u[(2, 2)]],
        [b_u[0], b_u[1], b_u[2]],
        [a_u[(0, 1)], a_u[(0, 2)], a_u[(1, 2)]],
        sym3(&q_u),
        oc.v,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct ValueSurface {
    #[serde(skip)]
    pub grid: Arc<Grid>,
    /// Elapsed horizon.
    pub t: f64,
    pub values: Vec<f64>,
    /// Packed matrix gradients, see [`Grid::gradients`].
    pub grads: Vec<f64>,
}

impl ValueSurface {
    pub fn new(grid: Arc<Grid>, t: f64, values: Vec<f64>) -> Self {
        let grads = grid.gradients(&values);
        ValueSurface { grid, t, values, grads }
    }

    pub fn grad_matrix(&self, idx: usize) -> DMatrix<f64> {
        unpack_grad(self.grid.dim(), &self.grads, idx)
    }
}

fn unpack_grad(d: usize, g: &[f64], idx: usize) -> DMatrix<f64> {
    if d == 1 {
        DMatrix::from_element(1, 1, g[idx])
    } else {
        let s = &g[3 * idx..3 * idx + 3];
        DMatrix::from_row_slice(2, 2, &[s[0], s[1], s[1], s[2]])
    }
}

#[derive(Clone, Debug)]
pub struct CauchyOptions {
    /// Horizons at which to keep a surface, besides the final one.
    pub snapshots: Vec<f64>,
    /// Constant subtracted from `V`.
    pub v_shift: f64,
    /// Refuse to run when the master assumption fails.
    pub enforce_master: bool,
    /// Implicitness of the linear part; defaults to 1/2 (d1) and 1 (d2).
    pub theta: Option<f64>,
}

impl Default for CauchyOptions {
    fn default() -> Self {
        CauchyOptions {
            snapshots: Vec::new(),
            v_shift: 0.0,
            enforce_master: true,
            theta: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CauchyRun {
    /// Requested snapshots followed by the final surface, by increasing `t`.
    pub surfaces: Vec<ValueSurface>,
    pub dt: f64,
    pub halvings: usize,
    /// Explicit stability bound of the linear part, for reference.
    pub preflight_dt: f64,
    pub warnings: Vec<String>,
}

impl CauchyRun {
    pub fn last(&self) -> &ValueSurface {
        self.surfaces.last().expect("at least one surface")
    }

    pub fn at(&self, t: f64) -> Option<&ValueSurface> {
        self.surfaces.iter().find(|s| (s.t - t).abs() <= 1e-9 * (1.0 + t))
    }

    /// Snapshot closest to `t`; snapshots sit on multiples of the step.
    pub fn nearest(&self, t: f64) -> &ValueSurface {
        self.surfaces
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("at least one surface")
    }
}

fn preflight(grid: &Grid, c: &NodeCoeffs) -> f64 {
    let mut rate: f64 = 0.0;
    for idx in 0..grid.len() {
        if grid.on_face(idx) {
            continue;
        }
        let m = grid.multi(idx);
        let mut r = 0.0;
        for a in 0..m.len() {
            let u = &grid.comp[a];
            let h = (u[m[a] + 1] - u[m[a] - 1]) * 0.5;
            r += 2.0 * c.diff[idx][a].abs() / (h * h) + c.drift[idx][a].abs() / h;
        }
        rate = rate.max(r);
    }
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// Solves `v_t = F[v] - v_shift`, `v(0) = 0` up to `horizon`.
pub fn solve_cauchy(spec: &ModelSpec, grid: Arc<Grid>, horizon: f64, dt: f64, opts: &CauchyOptions) -> Result<CauchyRun> {
    if spec.d() != grid.dim() {
        return Err(Error::dim("pde grid", spec.d(), grid.dim()));
    }
    if !(horizon >= 0.0) || !(dt > 0.0) {
        return Err(Error::param("pde.T/pde.dt", "need T >= 0 and dt > 0"));
    }
    let mut warnings = Vec::new();
    let rep = check_master(spec, &Meshes::standard(spec.d(), 0));
    if !rep.passed() {
        let msg = format!("master assumption: {:?}", rep.verdict);
        if opts.enforce_master {
            return Err(Error::Hypothesis {
                check: "master".into(),
                detail: msg,
            });
        }
        warnings.push(msg);
    }
    let coeffs = node_coeffs(spec, &grid)?;
    let preflight_dt = preflight(&grid, &coeffs);
    let theta = opts.theta.unwrap_or(match grid.mode {
        GridMode::D1 => 0.5,
        GridMode::D2 => 1.0,
    });
    let mut dt_try = dt;
    for halving in 0..=MAX_HALVINGS {
        match march(&grid, &coeffs, horizon, dt_try, theta, opts) {
            Ok((surfaces, dt_used)) => {
                return Ok(CauchyRun {
                    surfaces,
                    dt: dt_used,
                    halvings: halving,
                    preflight_dt,
                    warnings,
                })
            }
            Err(Error::NumericalAbort(msg)) => {
                warnings.push(format!("dt = {dt_try:e}: {msg}; halving"));
                dt_try *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NumericalAbort(format!(
        "non-finite values after {MAX_HALVINGS} step halvings (last dt = {:e})",
        dt_try * 2.0
    )))
}

fn march(grid: &Arc<Grid>, c: &NodeCoeffs, horizon: f64, dt: f64, theta: f64, opts: &CauchyOptions) -> Result<(Vec<ValueSurface>, f64)> {
    let n_steps = (horizon / dt).round() as usize;
    let dt = if n_steps > 0 { horizon / n_steps as f64 } else { dt };
    let mut snaps: Vec<(usize, f64)> = opts
        .snapshots
        .iter()
        .filter(|s| **s >= 0.0 && **s < horizon - 1e-12)
        .map(|s| ((s / dt).round() as usize, *s))
        .collect();
    snaps.sort_by_key(|s| s.0);
    snaps.dedup_by_key(|s| s.0);
    let mut out = Vec::new();
    let mut v = vec![0.0; grid.len()];
    let mut prev_n: Option<Vec<f64>> = None;
    let mut si = 0;
    let stepper = Stepper::new(grid, c, dt, theta, opts.v_shift);
    for k in 0..=n_steps {
        while si < snaps.len() && snaps[si].0 == k {
            out.push(ValueSurface::new(grid.clone(), k as f64 * dt, v.clone()));
            si += 1;
        }
        if k == n_steps {
            break;
        }
        v = match grid.mode {
            GridMode::D1 => {
                let nl = stepper.nonlinear(&v);
                let out = stepper.step_d1(&v, &nl, prev_n.as_deref());
                prev_n = Some(nl);
                out
            }
            GridMode::D2 => stepper.step_d2(&v),
        };
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalAbort(format!("non-finite value at step {}", k + 1)));
        }
    }
    out.push(ValueSurface::new(grid.clone(), n_steps as f64 * dt, v));
    Ok((out, dt))
}

struct Stepper<'a> {
    grid: &'a Grid,
    c: &'a NodeCoeffs,
    dt: f64,
    theta: f64,
    shift: f64,
    strides: Vec<usize>,
    shape: Vec<usize>,
    interior: Vec<usize>,
    /// line weights per node and axis, see `line_weights`
    lw: Vec<[[f64; 3]; 3]>,
    /// uniform computational steps (d2)
    h: [f64; 3],
    lines: Vec<Vec<usize>>,
    faces: Vec<Vec<usize>>,
}

/// Thomas algorithm; `a` sub-, `b` main, `c` super-diagonal.
fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &mut [f64], scratch: &mut Vec<f64>) {
    let n = b.len();
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut beta = b[0];
    r[0] /= beta;
    for i in 1..n {
        scratch[i] = c[i - 1] / beta;
        beta = b[i] - a[i] * scratch[i];
        r[i] = (r[i] - a[i] * r[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        r[i] -= scratch[i + 1] * r[i + 1];
    }
}

impl<'a> Stepper<'a> {
    fn new(grid: &'a Grid, c: &'a NodeCoeffs, dt: f64, theta: f64, shift: f64) -> Self {
        Stepper {
            grid,
            c,
            dt,
            theta,
            shift,
            strides: grid.strides(),
            shape: grid.shape(),
            interior: Vec::new(),
            lw: Vec::new(),
            h: [0.0; 3],
            lines: Vec::new(),
            faces: Vec::new(),
        }
        .with_index_sets()
    }

    fn with_index_sets(mut self) -> Self {
        if self.grid.mode == GridMode::D2 {
            self.interior = (0..self.grid.len()).filter(|i| !self.grid.on_face(*i)).collect();
            for a in 0..3 {
                self.h[a] = self.grid.comp[a][1] - self.grid.comp[a][0];
            }
            let mut lw = vec![[[0.0; 3]; 3]; self.grid.len()];
            for &i in &self.interior {
                let m = self.grid.multi3(i);
                for a in 0..3 {
                    lw[i][a] = self.line_weights(i, a, m[a]);
                }
            }
            self.lw = lw;
            self.lines = (0..3).map(|a| self.line_starts(a)).collect();
            self.faces = (0..3)
                .map(|a| (0..self.grid.len()).filter(|i| self.grid.multi3(*i)[a] == 0).collect())
                .collect();
        }
        self
    }

    /// `1/2 v_u' quad v_u + V - shift` at every node.
    fn nonlinear(&self, v: &[f64]) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let (du, _, _) = self.grid.comp_derivs(v, i);
                0.5 * quad_form(&self.c.quad[i], &du) + self.c.pot[i] - self.shift
            })
            .collect()
    }

    /// Line operator along `axis` at an interior position: weights on
    /// `(i-1, i, i+1)`.
    fn line_weights(&self, idx: usize, axis: usize, i: usize) -> [f64; 3] {
        let f = self.grid.first[axis][i];
        let s = self.grid.second[axis][i];
        debug_assert_eq!(f.start + 1, i);
        let (d, b) = (self.c.diff[idx][axis], self.c.drift[idx][axis]);
        [d * s.w[0] + b * f.w[0], d * s.w[1] + b * f.w[1], d * s.w[2] + b * f.w[2]]
    }

    /// Face closure `v_end = alpha v_next + beta v_next2 + gamma` for the
    /// line through `idx` along `axis`; `top` selects the upper face.
    fn closure(&self, v: &[f64], idx: usize, axis: usize, top: bool) -> (f64, f64, f64) {
        let n = self.shape[axis];
        let i = if top { n - 1 } else { 0 };
        let s2 = self.grid.second[axis][i];
        let f1 = self.grid.first[axis][i];
        // weights ordered from the face inwards
        let order: [usize; 3] = if top { [2, 1, 0] } else { [0, 1, 2] };
        let mut w = [s2.w[order[0]], s2.w[order[1]], s2.w[order[2]]];
        let mut rhs = 0.0;
        if self.grid.mode == GridMode::D2 && axis < 2 {
            // v_uu - v_u / u = -c v_c / u^2
            let m = self.grid.multi3(idx);
            let u = self.grid.comp[axis][i];
            let fw = [f1.w[order[0]], f1.w[order[1]], f1.w[order[2]]];
            for k in 0..3 {
                w[k] -= fw[k] / u;
            }
            let c = self.grid.comp[2][m[2]];
            let sc = self.grid.first[2][m[2]];
            let st = self.strides[2];
            let base = idx - m[2] * st + sc.start * st;
            let vc = sc.w[0] * v[base] + sc.w[1] * v[base + st] + sc.w[2] * v[base + 2 * st];
            rhs = -c * vc / (u * u);
        }
        (-w[1] / w[0], -w[2] / w[0], rhs / w[0])
    }

    fn op_d1(&self, v: &[f64], i: usize) -> f64 {
        let w = self.line_weights(i, 0, i);
        w[0] * v[i - 1] + w[1] * v[i] + w[2] * v[i + 1]
    }

    fn close_d1(&self, v: &mut [f64]) {
        let n = v.len();
        let (a, b, g) = self.closure(v, 0, 0, false);
        v[0] = a * v[1] + b * v[2] + g;
        let (a, b, g) = self.closure(v, n - 1, 0, true);
        v[n - 1] = a * v[n - 2] + b * v[n - 3] + g;
    }

    /// Crank-Nicolson (theta) for the linear part, AB2 for the rest.
    fn step_d1(&self, v: &[f64], nl: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        let n = v.len();
        let (th, dt) = (self.theta, self.dt);
        let m = n - 2;
        let (mut a, mut b, mut c, mut r) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for i in 1..n - 1 {
            let w = self.line_weights(i, 0, i);
            let ex = match prev {
                Some(p) => 1.5 * nl[i] - 0.5 * p[i],
                None => nl[i],
            };
            r[i - 1] = v[i] + (1.0 - th) * dt * self.op_d1(v, i) + dt * ex;
            a[i - 1] = -th * dt * w[0];
            b[i - 1] = 1.0 - th * dt * w[1];
            c[i - 1] = -th * dt * w[2];
        }
        let (al, be, _) = self.closure(v, 0, 0, false);
        b[0] += a[0] * al;
        c[0] += a[0] * be;
        a[0] = 0.0;
        let (al, be, _) = self.closure(v, n - 1, 0, true);
        b[m - 1] += c[m - 1] * al;
        a[m - 1] += c[m - 1] * be;
        c[m - 1] = 0.0;
        let mut scratch = Vec::new();
        thomas(&a, &b, &c, &mut r, &mut scratch);
        let mut out = vec![0.0; n];
        out[1..n - 1].copy_from_slice(&r);
        self.close_d1(&mut out);
        out
    }

    /// Full operator at an interior d2 node, centered uniform stencils.
    fn full_op(&self, v: &[f64], idx: usize) -> f64 {
        let st = &self.strides;
        let h = &self.h;
        let v0 = v[idx];
        let mut du = [0.0; 3];
        let mut acc = self.c.pot[idx] - self.shift;
        for a in 0..3 {
            let (p, m) = (v[idx + st[a]], v[idx - st[a]]);
            du[a] = (p - m) / (2.0 * h[a]);
            acc += self.c.diff[idx][a] * (p - 2.0 * v0 + m) / (h[a] * h[a]) + self.c.drift[idx][a] * du[a];
        }
        for (k, (a, b)) in [(0usize, 1usize), (0, 2), (1, 2)].into_iter().enumerate() {
            let (sa, sb) = (st[a], st[b]);
            let mix = (v[idx + sa + sb] - v[idx + sa - sb] - v[idx - sa + sb] + v[idx - sa - sb]) / (4.0 * h[a] * h[b]);
            acc += self.c.mixed[idx][k] * mix;
        }
        acc + 0.5 * quad_form(&self.c.quad[idx], &du)
    }

    fn line_op(&self, v: &[f64], idx: usize, axis: usize) -> f64 {
        let w = self.lw[idx][axis];
        let st = self.strides[axis];
        w[0] * v[idx - st] + w[1] * v[idx] + w[2] * v[idx + st]
    }

    /// Lines along `axis` through nodes interior in the other axes.
    fn line_starts(&self, axis: usize) -> Vec<usize> {
        let mut starts = Vec::new();
        for idx in 0..self.grid.len() {
            let m = self.grid.multi3(idx);
            if m[axis] != 0 {
                continue;
            }
            let ok = (0..3).all(|b| b == axis || (m[b] > 0 && m[b] + 1 < self.shape[b]));
            if ok {
                starts.push(idx);
            }
        }
        starts
    }

    /// Douglas scheme.
    fn step_d2(&self, u: &[f64]) -> Vec<f64> {
        let (th, dt) = (self.theta, self.dt);
        let mut y = u.to_vec();
        let upd: Vec<(usize, f64)> = self
            .interior
            .par_iter()
            .map(|&i| (i, u[i] + dt * self.full_op(u, i)))
            .collect();
        for (i, val) in upd {
            y[i] = val;
        }
        for axis in 0..3 {
            let n = self.shape[axis];
            let st = self.strides[axis];
            let solved: Vec<(usize, Vec<f64>)> = self.lines[axis]
                .par_iter()
                .map(|&s0| {
                    let m = n - 2;
                    let (mut a, mut b, mut c, mut r) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
                    for i in 1..n - 1 {
                        let idx = s0 + i * st;
                        let w = self.lw[idx][axis];
                        r[i - 1] = y[idx] - th * dt * self.line_op(u, idx, axis);
                        a[i - 1] = -th * dt * w[0];
                        b[i - 1] = 1.0 - th * dt * w[1];
                        c[i - 1] = -th * dt * w[2];
                    }
                    let lo = s0;
                    let hi = s0 + (n - 1) * st;
                    let (al, be, ga) = self.closure(u, lo, axis, false);
                    r[0] -= a[0] * ga;
                    b[0] += a[0] * al;
                    c[0] += a[0] * be;
                    a[0] = 0.0;
                    let (al2, be2, ga2) = self.closure(u, hi, axis, true);
                    r[m - 1] -= c[m - 1] * ga2;
                    b[m - 1] += c[m - 1] * al2;
                    a[m - 1] += c[m - 1] * be2;
                    c[m - 1] = 0.0;
                    let mut scratch = Vec::new();
                    thomas(&a, &b, &c, &mut r, &mut scratch);
                    let mut line = Vec::with_capacity(n);
                    line.push(al * r[0] + be * r[1] + ga);
                    line.extend_from_slice(&r);
                    line.push(al2 * r[m - 1] + be2 * r[m - 2] + ga2);
                    (s0, line)
                })
                .collect();
            for (s0, line) in solved {
                for (i, val) in line.into_iter().enumerate() {
                    y[s0 + i * st] = val;
                }
            }
        }
        self.close_faces(&mut y);
        y
    }

    /// Imposes every face closure, axis by axis.
    fn close_faces(&self, v: &mut [f64]) {
        for axis in (0..3).rev() {
            let n = self.shape[axis];
            let st = self.strides[axis];
            for &s0 in &self.faces[axis] {
                let hi = s0 + (n - 1) * st;
                let (a, b, g) = self.closure(v, s0, axis, false);
                v[s0] = a * v[s0 + st] + b * v[s0 + 2 * st] + g;
                let (a, b, g) = self.closure(v, hi, axis, true);
                v[hi] = a * v[hi - st] + b * v[hi - 2 * st] + g;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ErgodicPairEstimate {
    pub lambda: f64,
    /// `v(T, x) - v(T, x_ref)`
    pub vhat: Vec<f64>,
    pub ref_index: usize,
    pub ref_point: Vec<f64>,
    #[serde(skip)]
    pub grid: Option<Arc<Grid>>,
}

/// `lambda = (v(T, x_ref) - v(T - Delta, x_ref)) / Delta` and the normalized
/// spatial profile at `T`.
pub fn extract_ergodic(earlier: &ValueSurface, later: &ValueSurface, ref_index: usize) -> Result<ErgodicPairEstimate> {
    let delta = later.t - earlier.t;
    if !(delta > 0.0) {
        return Err(Error::param("extract_ergodic", "snapshots must be increasing in time"));
    }
    if earlier.values.len() != later.values.len() || ref_index >= later.values.len() {
        return Err(Error::dim("extract_ergodic", later.values.len(), earlier.values.len()));
    }
    let r = later.values[ref_index];
    Ok(ErgodicPairEstimate {
        lambda: (r - earlier.values[ref_index]) / delta,
        vhat: later.values.iter().map(|v| v - r).collect(),
        ref_index,
        ref_point: later.grid.coords(ref_index),
        grid: Some(later.grid.clone()),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HDiagnostics {
    pub t: f64,
    /// `sup |h(T, x) - h(T, x_ref)|` over the box
    pub oscillation: f64,
    /// `sup |grad h(T, x)|`
    pub grad_sup: f64,
    /// `sup |pi(T, x; v) - pi_hat(x)|`
    pub policy_sup: f64,
    /// mesh max of the norm of the linear map from gradients to portfolios
    pub kappa: f64,
}

/// Operator norm of `grad -> pi` (Frobenius to Euclidean) on symmetric
/// matrices.
fn policy_gain(oc: &OperatorCoeffs, p: f64) -> Result<f64> {
    let d = oc.d;
    let base = oc.pi(&DMatrix::zeros(d, d), p)?;
    let mut cols = Vec::new();
    for i in 0..d {
        for j in i..d {
            let mut e = DMatrix::zeros(d, d);
            if i == j {
                e[(i, i)] = 1.0;
            } else {
                e[(i, j)] = std::f64::consts::FRAC_1_SQRT_2;
                e[(j, i)] = std::f64::consts::FRAC_1_SQRT_2;
            }
            cols.push(oc.pi(&e, p)? - &base);
        }
    }
    let m = DMatrix::from_columns(&cols);
    Ok(m.singular_values().max())
}

/// Diagnostics of `h(T, x) = v(T, x) - lambda T - vhat(x)` over the box
/// `[lo, hi]` (physical coordinates).
pub fn compute_h(
    spec: &ModelSpec,
    surfaces: &[&ValueSurface],
    erg: &ErgodicPairEstimate,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<HDiagnostics>> {
    let Some(first) = surfaces.first() else {
        return Ok(Vec::new());
    };
    let grid = first.grid.clone();
    if erg.vhat.len() != grid.len() {
        return Err(Error::dim("ergodic estimate", grid.len(), erg.vhat.len()));
    }
    let nodes = grid.box_nodes(lo, hi);
    if nodes.is_empty() {
        return Err(Error::param("box", "no grid node inside the diagnostic box"));
    }
    let vhat_grads = grid.gradients(&erg.vhat);
    let d = grid.dim();
    let ops: Vec<OperatorCoeffs> = nodes
        .par_iter()
        .map(|i| spec.operator_coeffs(&grid.point(*i)))
        .collect::<Result<_>>()?;
    let mut kappa: f64 = 0.0;
    let mut pi_hat = Vec::with_capacity(nodes.len());
    for (k, i) in nodes.iter().enumerate() {
        kappa = kappa.max(policy_gain(&ops[k], spec.p)?);
        pi_hat.push(ops[k].pi(&unpack_grad(d, &vhat_grads, *i), spec.p)?);
    }
    let mut out = Vec::new();
    for s in surfaces {
        if s.values.len() != grid.len() {
            return Err(Error::dim("surface", grid.len(), s.values.len()));
        }
        let vref = s.values[erg.ref_index];
        let h: Vec<f64> = s.values.iter().zip(&erg.vhat).map(|(v, w)| v - vref - w).collect();
        let (mut osc, mut gs, mut ps): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for (k, i) in nodes.iter().enumerate() {
            osc = osc.max(h[*i].abs());
            let g = s.grad_matrix(*i);
            gs = gs.max(grid.gradient_at(&h, *i).norm());
            ps = ps.max((ops[k].pi(&g, spec.p)? - &pi_hat[k]).norm());
        }
        out.push(HDiagnostics {
            t: s.t,
            oscillation: osc,
            grad_sup: gs,
            policy_sup: ps,
            kappa,
        });
    }
    Ok(out)
}

/// Largest centered second difference in `c` of a d2 profile over the box.
pub fn max_c_curvature(grid: &Grid, values: &[f64], lo: &[f64], hi: &[f64]) -> Result<f64> {
    if grid.mode != GridMode::D2 {
        return Err(Error::Unsupported("c-curvature needs a d2 grid".into()));
    }
    let sh = grid.shape();
    let mut best: f64 = 0.0;
    for i in grid.box_nodes(lo, hi) {
        let m = grid.multi(i);
        if m[2] == 0 || m[2] + 1 == sh[2] {
            continue;
        }
        let (_, d2, _) = grid.comp_derivs(values, i);
        best = best.max(d2[2].abs());
    }
    Ok(best)
}

/// Surfaces at increasing horizons used as a value function `phi(tau, x)`:
/// linear in `tau` between snapshots, multilinear in grid coordinates, held
/// constant outside the grid. Off-grid evaluations are counted.
pub struct SurfaceSeries {
    pub surfaces: Vec<ValueSurface>,
    excursions: AtomicUsize,
}

impl SurfaceSeries {
    pub fn new(mut surfaces: Vec<ValueSurface>) -> Result<Self> {
        if surfaces.is_empty() {
            return Err(Error::param("surfaces", "empty"));
        }
        surfaces.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(SurfaceSeries {
            surfaces,
            excursions: AtomicUsize::new(0),
        })
    }

    pub fn excursions(&self) -> usize {
        self.excursions.load(Ordering::Relaxed)
    }

    fn bracket(&self, tau: f64) -> (usize, usize, f64) {
        let s = &self.surfaces;
        if tau <= s[0].t || s.len() == 1 {
            return (0, 0, 0.0);
        }
        let n = s.len();
        if tau >= s[n - 1].t {
            return (n - 1, n - 1, 0.0);
        }
        let k = s.partition_point(|x| x.t <= tau) - 1;
        (k, k + 1, (tau - s[k].t) / (s[k + 1].t - s[k].t))
    }

    fn weights(&self, x: &SpdMatrix) -> Vec<(usize, f64)> {
        let grid = &self.surfaces[0].grid;
        let (f, clamped) = grid.locate(x);
        if clamped {
            self.excursions.fetch_add(1, Ordering::Relaxed);
        }
        grid.cell_weights(&f)
    }
}

impl PhiFunction for SurfaceSeries {
    fn value(&self, tau: f64, x: &SpdMatrix) -> f64 {
        let w = self.weights(x);
        let (a, b, s) = self.bracket(tau);
        let at = |k: usize| w.iter().map(|(i, c)| c * self.surfaces[k].values[*i]).sum::<f64>();
        (1.0 - s) * at(a) + s * at(b)
    }

    fn grad(&self, tau: f64, x: &SpdMatrix) -> DMatrix<f64> {
        let w = self.weights(x);
        let (a, b, s) = self.bracket(tau);
        let d = self.surfaces[0].grid.dim();
        let at = |k: usize| {
            let mut g = DMatrix::zeros(d, d);
            for (i, c) in &w {
                g += self.surfaces[k].grad_matrix(*i) * *c;
            }
            g
        };
        at(a) * (1.0 - s) + at(b) * s
    }
}

/// `phi(X) = c + <m, X> + 1/2 vec(X)' H vec(X)` in the full `d^2` layout.
#[derive(Clone, Debug)]
pub struct QuadraticTest {
    pub c: f64,
    pub m: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

fn vec_full(x: &DMatrix<f64>) -> DVector<f64> {
    let d = x.nrows();
    DVector::from_fn(d * d, |k, _| x[(k / d, k % d)])
}

impl QuadraticTest {
    pub fn trace(d: usize) -> Self {
        QuadraticTest {
            c: 0.0,
            m: DMatrix::identity(d, d),
            h: DMatrix::zeros(d * d, d * d),
        }
    }

    /// `Tr(X)^2`.
    pub fn trace_squared(d: usize) -> Self {
        let mut h = DMatrix::zeros(d * d, d * d);
        for i in 0..d {
            for j in 0..d {
                h[(i * d + i, j * d + j)] = 2.0;
            }
        }
        QuadraticTest {
            c: 0.0,
            m: DMatrix::zeros(d, d),
            h,
        }
    }

    pub fn constant(d: usize, c: f64) -> Self {
        QuadraticTest {
            c,
            m: DMatrix::zeros(d, d),
            h: DMatrix::zeros(d * d, d * d),
        }
    }

    pub fn value(&self, x: &SpdMatrix) -> f64 {
        let v = vec_full(x.as_matrix());
        self.c + vec_full(&self.m).dot(&v) + 0.5 * v.dot(&(&self.h * &v))
    }

    /// `L phi = b : D phi + 1/2 A : D^2 phi`.
    pub fn generator(&self, spec: &ModelSpec, x: &SpdMatrix) -> Result<f64> {
        let oc = spec.operator_coeffs(x)?;
        let v = vec_full(x.as_matrix());
        let grad = vec_full(&self.m) + &self.h * v;
        let hs = SymMatrix::symmetrize(&self.h)?.into_matrix();
        Ok(vec_full(&oc.state.b).dot(&grad) + 0.5 * oc.big_a.component_mul(&hs).sum())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratorReport {
    pub h: f64,
    /// MC estimate of `(E[phi(X_h)] - phi(x)) / h`
    pub mc: McEstimate,
    pub exact: f64,
    pub band: f64,
    pub within_band: bool,
}

/// Compares the simulated difference quotient with `L phi(x)` inside
/// `3 s.e. + c_h h`.
#[allow(clippy::too_many_arguments)]
pub fn generator_check(
    spec: &ModelSpec,
    x: &SpdMatrix,
    phi: &QuadraticTest,
    h: f64,
    substeps: usize,
    n_paths: usize,
    seed: u64,
    c_h: f64,
) -> Result<GeneratorReport> {
    let exact = phi.generator(spec, x)?;
    let phi0 = phi.value(x);
    let dt = h / substeps.max(1) as f64;
    let vals: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let b = simulate_state(spec, x, h, dt, RngStreamSpec::new(seed, i))?;
            Ok((phi.value(b.x.last().expect("nonempty")) - phi0) / h)
        })
        .collect::<Result<_>>()?;
    let mc = McEstimate::from_samples(&vals, dt);
    let band = 3.0 * mc.standard_error + c_h * h;
    Ok(GeneratorReport {
        h,
        within_band: (mc.mean - exact).abs() <= band,
        mc,
        exact,
        band,
    })
}
