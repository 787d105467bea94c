//! Dense linear algebra on symmetric and symmetric positive definite matrices.
//!
//! `SymMatrix` stores a full `d x d` array whose lower triangle is always a
//! mirror of the upper triangle, so symmetry holds bit-for-bit. `SpdMatrix`
//! additionally guarantees a strictly positive computed spectrum.
//!
//! Quadratic forms over the space of symmetric matrices are handled in two
//! layouts: the "full" layout indexes pairs `(i, j)` as `i * d + j` (a
//! `d^2 x d^2` array), while the `svec` layout uses the `d(d+1)/2` upper
//! triangle coordinates with off-diagonal entries scaled by `sqrt(2)`, which
//! makes `svec` an isometry for the Frobenius inner product.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from the upper triangle of `m`; the lower
    /// triangle of the input is ignored.
    pub fn from_upper(mut m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                m[(j, i)] = m[(i, j)];
            }
        }
        Ok(SymMatrix { m })
    }

    /// Symmetric part `(m + m') / 2`.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        check_square(m)?;
        let d = m.nrows();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            out[(i, i)] = m[(i, i)];
            for j in (i + 1)..d {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(SymMatrix { m: out })
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix { m: DMatrix::zeros(d, d) }
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix { m: DMatrix::identity(d, d) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix {
            m: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix { m: &self.m * s }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix { m: &self.m + &other.m }
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix { m: &self.m - &other.m }
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    /// Eigen-decomposition, polished by cyclic Jacobi sweeps on `Q'XQ`.
    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        let eig = SymmetricEigen::new(self.m.clone());
        let mut q = eig.eigenvectors;
        let mut b = q.transpose() * &self.m * &q;
        jacobi_polish(&mut b, &mut q);
        SymmetricEigen {
            eigenvalues: b.diagonal(),
            eigenvectors: q,
        }
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        match self.dim() {
            1 => DVector::from_element(1, self.m[(0, 0)]),
            2 => {
                let (lo, hi) = eig2(self.m[(0, 0)], self.m[(0, 1)], self.m[(1, 1)]);
                DVector::from_column_slice(&[lo, hi])
            }
            _ => self.eigen().eigenvalues,
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    /// Upper-triangle coordinates, off-diagonals scaled by `sqrt(2)`.
    pub fn svec(&self) -> DVector<f64> {
        let d = self.dim();
        let mut v = DVector::zeros(svec_dim(d));
        let mut p = 0;
        for i in 0..d {
            for j in i..d {
                v[p] = if i == j {
                    self.m[(i, i)]
                } else {
                    std::f64::consts::SQRT_2 * self.m[(i, j)]
                };
                p += 1;
            }
        }
        v
    }

    pub fn from_svec(d: usize, v: &DVector<f64>) -> Result<Self> {
        if v.len() != svec_dim(d) {
            return Err(Error::dim("svec length", svec_dim(d), v.len()));
        }
        let mut m = DMatrix::zeros(d, d);
        let mut p = 0;
        for i in 0..d {
            for j in i..d {
                if i == j {
                    m[(i, i)] = v[p];
                } else {
                    let x = v[p] / std::f64::consts::SQRT_2;
                    m[(i, j)] = x;
                    m[(j, i)] = x;
                }
                p += 1;
            }
        }
        Ok(SymMatrix { m })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpdMatrix {
    base: SymMatrix,
}

impl SpdMatrix {
    /// Fails unless the computed smallest eigenvalue is strictly positive.
    pub fn new(base: SymMatrix) -> Result<Self> {
        let min_eig = base.min_eigenvalue();
        if !(min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eig });
        }
        Ok(SpdMatrix { base })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(SymMatrix::symmetrize(m)?)
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix {
            base: SymMatrix::identity(d),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(SymMatrix::from_diagonal(diag))
    }

    pub(crate) fn new_unchecked(base: SymMatrix) -> Self {
        SpdMatrix { base }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.base
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.base.as_matrix()
    }

    pub fn into_sym(self) -> SymMatrix {
        self.base
    }

    pub fn scale(&self, s: f64) -> Result<SpdMatrix> {
        if !(s > 0.0) {
            return Err(Error::param("scale", "must be positive"));
        }
        Ok(SpdMatrix {
            base: self.base.scale(s),
        })
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match self.dim() {
            1 => DMatrix::from_element(1, 1, 1.0 / self.as_matrix()[(0, 0)]),
            _ => {
                let chol = self
                    .as_matrix()
                    .clone()
                    .cholesky()
                    .expect("positive definite matrix admits a Cholesky factor");
                let inv = chol.inverse();
                SymMatrix::symmetrize(&inv).expect("square").into_matrix()
            }
        }
    }

    pub fn determinant(&self) -> f64 {
        self.as_matrix().determinant()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.base.frobenius_norm()
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Eigenvalues (ascending) of the symmetric 2x2 matrix `[[a, b], [b, c]]`.
fn eig2(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let r = (0.5 * (a - c)).hypot(b);
    let hi = mean + r;
    // the product form avoids cancellation in the small eigenvalue
    let det = a * c - b * b;
    let lo = if hi != 0.0 { det / hi } else { mean - r };
    if mean >= 0.0 {
        (lo, hi)
    } else {
        (mean - r, mean + r)
    }
}

pub fn svec_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Cyclic Jacobi on a nearly diagonal `b`, rotations accumulated into `q`.
fn jacobi_polish(b: &mut DMatrix<f64>, q: &mut DMatrix<f64>) {
    let d = b.nrows();
    for _ in 0..10 {
        let off: f64 = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).map(|(i, j)| b[(i, j)].powi(2)).sum();
        if off.sqrt() <= f64::EPSILON * 1e-3 * b.norm() {
            break;
        }
        for i in 0..d {
            for j in i + 1..d {
                let bij = b[(i, j)];
                if bij == 0.0 {
                    continue;
                }
                let tau = (b[(j, j)] - b[(i, i)]) / (2.0 * bij);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..d {
                    let (bki, bkj) = (b[(k, i)], b[(k, j)]);
                    b[(k, i)] = c * bki - sn * bkj;
                    b[(k, j)] = sn * bki + c * bkj;
                }
                for k in 0..d {
                    let (bik, bjk) = (b[(i, k)], b[(j, k)]);
                    b[(i, k)] = c * bik - sn * bjk;
                    b[(j, k)] = sn * bik + c * bjk;
                }
                for k in 0..d {
                    let (qki, qkj) = (q[(k, i)], q[(k, j)]);
                    q[(k, i)] = c * qki - sn * qkj;
                    q[(k, j)] = sn * qki + c * qkj;
                }
            }
        }
    }
}

/// The unique symmetric positive definite square root.
pub fn sqrt_spd(x: &SpdMatrix) -> SpdMatrix {
    let m = x.as_matrix();
    match x.dim() {
        1 => SpdMatrix::new_unchecked(SymMatrix {
            m: DMatrix::from_element(1, 1, m[(0, 0)].sqrt()),
        }),
        2 => {
            // sqrt(X) = (X + sqrt(det X) I) / sqrt(tr X + 2 sqrt(det X))
            let (lo, hi) = eig2(m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let s = (lo * hi).sqrt();
            let t = (m[(0, 0)] + m[(1, 1)] + 2.0 * s).sqrt();
            let mut r = m.clone();
            r[(0, 0)] += s;
            r[(1, 1)] += s;
            r /= t;
            SpdMatrix::new_unchecked(SymMatrix::from_upper(r).expect("square"))
        }
        _ => {
            let eig = x.as_sym().eigen();
            let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            let r = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            SpdMatrix::new_unchecked(SymMatrix::symmetrize(&r).expect("square"))
        }
    }
}

/// Square root of a positive semidefinite matrix, with negative rounding
/// noise in the spectrum clipped to zero.
pub fn sqrt_psd(x: &SymMatrix) -> SymMatrix {
    if x.dim() == 1 {
        return SymMatrix {
            m: DMatrix::from_element(1, 1, x.as_matrix()[(0, 0)].max(0.0).sqrt()),
        };
    }
    let eig = x.eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    SymMatrix::symmetrize(&r).expect("square")
}

/// Clips the spectrum of `x` from below at `floor`. Returns `x` itself when
/// its smallest eigenvalue is already at least `floor`.
pub fn project_to_spd(x: &SymMatrix, floor: f64) -> Result<SpdMatrix> {
    if !(floor > 0.0) {
        return Err(Error::param("floor", "must be positive"));
    }
    if x.min_eigenvalue() >= floor {
        return Ok(SpdMatrix::new_unchecked(x.clone()));
    }
    if x.dim() == 1 {
        return Ok(SpdMatrix::new_unchecked(SymMatrix::from_diagonal(&[floor])));
    }
    let eig = x.eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok(SpdMatrix::new_unchecked(SymMatrix::symmetrize(&r)?))
}

/// `Tr(m_1 m_2 ... m_k)`.
pub fn trace_product(ms: &[&DMatrix<f64>]) -> Result<f64> {
    let (first, rest) = ms
        .split_first()
        .ok_or_else(|| Error::param("ms", "empty product"))?;
    let mut acc = (*first).clone();
    for (idx, m) in rest.iter().enumerate() {
        if acc.ncols() != m.nrows() {
            return Err(Error::dim(
                format!("trace_product factor {}", idx + 1),
                format!("{} rows", acc.ncols()),
                format!("{} rows", m.nrows()),
            ));
        }
        acc = acc * *m;
    }
    if acc.nrows() != acc.ncols() {
        return Err(Error::NotSquare {
            rows: acc.nrows(),
            cols: acc.ncols(),
        });
    }
    Ok(acc.trace())
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Converts a quadratic form over symmetric matrices from the full
/// `d^2 x d^2` layout to the `svec` layout, preserving form values.
pub fn full_form_to_svec(form: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    if form.nrows() != d * d || form.ncols() != d * d {
        return Err(Error::dim(
            "full quadratic form",
            format!("{}x{}", d * d, d * d),
            format!("{}x{}", form.nrows(), form.ncols()),
        ));
    }
    let classes = svec_classes(d);
    let n = classes.len();
    let mut out = DMatrix::zeros(n, n);
    for (p, (cp, wp)) in classes.iter().enumerate() {
        for (q, (cq, wq)) in classes.iter().enumerate() {
            let mut s = 0.0;
            for &a in cp {
                for &b in cq {
                    s += form[(a, b)];
                }
            }
            out[(p, q)] = s / (wp * wq);
        }
    }
    Ok(out)
}

/// For each svec coordinate: the full-layout indices it aggregates and its
/// scaling weight.
fn svec_classes(d: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::with_capacity(svec_dim(d));
    for i in 0..d {
        for j in i..d {
            if i == j {
                out.push((vec![i * d + i], 1.0));
            } else {
                out.push((vec![i * d + j, j * d + i], std::f64::consts::SQRT_2));
            }
        }
    }
    out
}

/// Evaluates `sum theta_ij F_(ij),(kl) theta_kl` with `F` in full layout.
pub fn full_form_value(form: &DMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
    let d = theta.nrows();
    let mut s = 0.0;
    for a in 0..d * d {
        let ta = theta[(a / d, a % d)];
        if ta == 0.0 {
            continue;
        }
        for b in 0..d * d {
            s += ta * form[(a, b)] * theta[(b / d, b % d)];
        }
    }
    s
}
