//! Cubic B-spline basis systems with exact Gram and roughness-penalty
//! matrices.
//!
//! The Gram matrix holds the pairwise L2 inner products of the basis
//! functions and the penalty matrix the inner products of their second
//! derivatives. Both are assembled by per-knot-interval Gauss-Legendre
//! quadrature with enough nodes to integrate the piecewise-polynomial
//! integrands exactly, so no quadrature tolerance leaks into the
//! eigenproblems built on top of them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spline order used throughout (4 = cubic).
pub const SPLINE_ORDER: usize = 4;

/// Derivative order of the roughness penalty (curvature).
pub const PENALTY_DERIV: usize = 2;

// 4-point Gauss-Legendre rule on [-1, 1]; exact for polynomials up to
// degree 7, which covers the degree-6 product of two cubics.
const GL_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_86,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_86,
];

/// A cubic B-spline basis on a closed interval with equally spaced interior
/// knots, together with its Gram and curvature-penalty matrices.
///
/// Immutable after construction; all evaluations are pure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisSystem {
    pub domain_lo: f64,
    pub domain_hi: f64,
    pub order: usize,
    pub n_basis: usize,
    /// Interior knots, strictly increasing inside (domain_lo, domain_hi).
    pub knots: Vec<f64>,
    /// Pairwise inner products of the basis functions (symmetric positive
    /// definite).
    pub gram: DMatrix<f64>,
    /// Pairwise inner products of the second derivatives (symmetric positive
    /// semidefinite, null space spanned by straight lines).
    pub penalty: DMatrix<f64>,
    /// Clamped knot vector: `order` copies of each endpoint around the
    /// interior knots.
    ext_knots: Vec<f64>,
    /// Orthogonal coordinate change `[Q1 | Q2]` whose first two columns span
    /// the coefficient vectors of straight lines (the penalty null space).
    /// Penalized solves work in these coordinates so that even an enormous
    /// smoothing parameter cannot leak rounding error into the line block.
    transform: DMatrix<f64>,
    /// `Q2' * penalty * Q2`, the penalty restricted to its positive subspace.
    penalty_reduced: DMatrix<f64>,
}

/// Build a cubic B-spline system with `n_basis` functions and equally spaced
/// interior knots on `[domain_lo, domain_hi]`.
pub fn make_basis(domain_lo: f64, domain_hi: f64, n_basis: usize) -> Result<BasisSystem> {
    if !domain_lo.is_finite() || !domain_hi.is_finite() || !(domain_lo < domain_hi) {
        return Err(Error::InvalidDomain {
            lo: domain_lo,
            hi: domain_hi,
        });
    }
    if n_basis < 5 {
        return Err(Error::TooFewBasisFunctions(n_basis));
    }

    let n_interior = n_basis - SPLINE_ORDER;
    let span = domain_hi - domain_lo;
    let knots: Vec<f64> = (1..=n_interior)
        .map(|i| domain_lo + span * i as f64 / (n_interior + 1) as f64)
        .collect();

    let mut ext_knots = Vec::with_capacity(n_basis + SPLINE_ORDER);
    ext_knots.extend(std::iter::repeat(domain_lo).take(SPLINE_ORDER));
    ext_knots.extend_from_slice(&knots);
    ext_knots.extend(std::iter::repeat(domain_hi).take(SPLINE_ORDER));

    let mut basis = BasisSystem {
        domain_lo,
        domain_hi,
        order: SPLINE_ORDER,
        n_basis,
        knots,
        gram: DMatrix::zeros(n_basis, n_basis),
        penalty: DMatrix::zeros(n_basis, n_basis),
        ext_knots,
        transform: DMatrix::zeros(n_basis, n_basis),
        penalty_reduced: DMatrix::zeros(0, 0),
    };

    basis.gram = basis.assemble_product_matrix(0);
    basis.penalty = basis.assemble_product_matrix(PENALTY_DERIV);
    basis.build_line_split()?;
    basis.validate()?;
    Ok(basis)
}

impl BasisSystem {
    /// Knot-interval boundaries: `[domain_lo, interior..., domain_hi]`.
    fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.knots.len() + 2);
        b.push(self.domain_lo);
        b.extend_from_slice(&self.knots);
        b.push(self.domain_hi);
        b
    }

    /// Assemble the matrix of inner products of the `deriv`-th derivatives by
    /// Gauss-Legendre quadrature on every knot interval, then symmetrize.
    fn assemble_product_matrix(&self, deriv: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_basis, self.n_basis);
        let breaks = self.breakpoints();
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
                let t = mid + half * node;
                let span = self.find_span(t);
                let vals = self.derivs_at(span, t, self.order - 1, deriv);
                let first = span + 1 - self.order;
                let scale = weight * half;
                for (r, vr) in vals.iter().enumerate() {
                    for (c, vc) in vals.iter().enumerate() {
                        m[(first + r, first + c)] += scale * vr * vc;
                    }
                }
            }
        }
        // Quadrature fills both triangles; symmetrize to kill rounding skew.
        let mt = m.transpose();
        (m + mt) * 0.5
    }

    /// Greville abscissae: a straight line `a + b*t` has spline coefficients
    /// exactly `a + b*xi_j`.
    fn greville(&self) -> Vec<f64> {
        let p = self.order - 1;
        (0..self.n_basis)
            .map(|j| self.ext_knots[j + 1..j + 1 + p].iter().sum::<f64>() / p as f64)
            .collect()
    }

    fn build_line_split(&mut self) -> Result<()> {
        let k = self.n_basis;
        let xi = self.greville();
        let lines = DMatrix::from_fn(k, 2, |r, c| if c == 0 { 1.0 } else { xi[r] });
        let q1 = lines.qr().q();
        let projector = DMatrix::identity(k, k) - &q1 * q1.transpose();
        let eig = SymmetricEigen::new(projector);
        let mut cols: Vec<(f64, DVector<f64>)> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&v, c)| (v, c.into_owned()))
            .collect();
        cols.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let complement: Vec<DVector<f64>> = cols
            .into_iter()
            .take(k - 2)
            .map(|(v, mut c)| {
                if !(v > 0.5) {
                    return Err(Error::Numeric(
                        "line-complement construction lost rank".into(),
                    ));
                }
                // Deterministic sign convention.
                if let Some(first) = c.iter().find(|x| x.abs() > 1e-12) {
                    if *first < 0.0 {
                        c.neg_mut();
                    }
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;

        let mut transform = DMatrix::zeros(k, k);
        transform.columns_mut(0, 2).copy_from(&q1);
        for (i, c) in complement.iter().enumerate() {
            transform.column_mut(2 + i).copy_from(c);
        }
        let q2 = transform.columns(2, k - 2);
        let reduced = q2.transpose() * &self.penalty * q2;
        let reduced_t = reduced.transpose();
        self.penalty_reduced = (reduced + reduced_t) * 0.5;
        self.transform = transform;
        Ok(())
    }

    /// Orthogonal change of coordinates whose leading two columns span line
    /// coefficients; see `penalty_reduced`.
    pub(crate) fn line_transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Penalty restricted to the complement of the line block (positive
    /// definite).
    pub(crate) fn reduced_penalty(&self) -> &DMatrix<f64> {
        &self.penalty_reduced
    }

    fn validate(&self) -> Result<()> {
        let gram_eig = SymmetricEigen::new(self.gram.clone());
        let min_eig = gram_eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::Numeric(format!(
                "gram matrix not positive definite (min eigenvalue {min_eig:.3e})"
            )));
        }
        let pen_eig = SymmetricEigen::new(self.penalty.clone());
        let max_eig = pen_eig.eigenvalues.max();
        let null_dim = pen_eig
            .eigenvalues
            .iter()
            .filter(|&&e| e < 1e-10 * max_eig)
            .count();
        if null_dim != PENALTY_DERIV {
            return Err(Error::Numeric(format!(
                "penalty null space has dimension {null_dim}, expected {PENALTY_DERIV}"
            )));
        }
        Ok(())
    }

    /// Index of the knot span containing `t`, clamped so the last span covers
    /// the right endpoint.
    fn find_span(&self, t: f64) -> usize {
        let p = self.order - 1;
        let n = self.n_basis - 1;
        let u = &self.ext_knots;
        if t >= u[n + 1] {
            return n;
        }
        if t <= u[p] {
            return p;
        }
        let (mut low, mut high) = (p, n + 1);
        let mut mid = (low + high) / 2;
        while t < u[mid] || t >= u[mid + 1] {
            if t < u[mid] {
                high = mid;
            } else {
                low = mid;
            }
            mid = (low + high) / 2;
        }
        mid
    }

    /// Values of the `deg + 1` basis functions of degree `deg` that are
    /// nonzero on `span`, by the triangular recurrence.
    fn funs_at(&self, span: usize, t: f64, deg: usize) -> Vec<f64> {
        let u = &self.ext_knots;
        let mut vals = vec![0.0; deg + 1];
        let mut left = vec![0.0; deg + 1];
        let mut right = vec![0.0; deg + 1];
        vals[0] = 1.0;
        for j in 1..=deg {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// `k`-th derivative values of the `deg + 1` nonzero degree-`deg` basis
    /// functions at `t`, by recursing on the lower-degree derivative formula.
    fn derivs_at(&self, span: usize, t: f64, deg: usize, k: usize) -> Vec<f64> {
        if k == 0 {
            return self.funs_at(span, t, deg);
        }
        if k > deg {
            return vec![0.0; deg + 1];
        }
        let lower = self.derivs_at(span, t, deg - 1, k - 1);
        let u = &self.ext_knots;
        let first = span - deg;
        (0..=deg)
            .map(|r| {
                let j = first + r;
                let left = if r >= 1 {
                    let d = u[j + deg] - u[j];
                    if d > 0.0 {
                        lower[r - 1] / d
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                let right = if r < deg {
                    let d = u[j + deg + 1] - u[j + 1];
                    if d > 0.0 {
                        lower[r] / d
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                deg as f64 * (left - right)
            })
            .collect()
    }

    fn check_point(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * (self.domain_hi - self.domain_lo);
        if t < self.domain_lo - tol || t > self.domain_hi + tol || !t.is_finite() {
            return Err(Error::PointOutsideDomain {
                point: t,
                lo: self.domain_lo,
                hi: self.domain_hi,
            });
        }
        Ok(t.clamp(self.domain_lo, self.domain_hi))
    }

    /// Quadratic form `c' * penalty * c`, the integrated squared curvature of
    /// the expansion with coefficients `c`.
    pub fn roughness(&self, coeffs: &DVector<f64>) -> f64 {
        (coeffs.transpose() * &self.penalty * coeffs)[(0, 0)]
    }
}

/// Evaluate every basis function at every point; column `j` holds the
/// `n_basis` values at `points[j]` and sums to one.
pub fn eval_basis(basis: &BasisSystem, points: &[f64]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(basis.n_basis, points.len());
    for (j, &raw) in points.iter().enumerate() {
        let t = basis.check_point(raw)?;
        let span = basis.find_span(t);
        let vals = basis.funs_at(span, t, basis.order - 1);
        let first = span + 1 - basis.order;
        for (r, v) in vals.iter().enumerate() {
            m[(first + r, j)] = *v;
        }
    }
    Ok(m)
}

/// Evaluate the `deriv`-th derivative of every basis function at every point.
pub fn eval_basis_derivative(
    basis: &BasisSystem,
    points: &[f64],
    deriv: usize,
) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(basis.n_basis, points.len());
    for (j, &raw) in points.iter().enumerate() {
        let t = basis.check_point(raw)?;
        let span = basis.find_span(t);
        let vals = basis.derivs_at(span, t, basis.order - 1, deriv);
        let first = span + 1 - basis.order;
        for (r, v) in vals.iter().enumerate() {
            m[(first + r, j)] = *v;
        }
    }
    Ok(m)
}

/// Evaluate the expansion `sum_m coeffs[m] * phi_m(t)` at each point.
pub fn eval_expansion(basis: &BasisSystem, coeffs: &DVector<f64>, points: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != basis.n_basis {
        return Err(Error::DimensionMismatch {
            expected: basis.n_basis,
            got: coeffs.len(),
            context: "expansion coefficients",
        });
    }
    let mut out = Vec::with_capacity(points.len());
    for &raw in points {
        let t = basis.check_point(raw)?;
        let span = basis.find_span(t);
        let vals = basis.funs_at(span, t, basis.order - 1);
        let first = span + 1 - basis.order;
        let mut acc = 0.0;
        for (r, v) in vals.iter().enumerate() {
            acc += coeffs[first + r] * v;
        }
        out.push(acc);
    }
    Ok(out)
}
