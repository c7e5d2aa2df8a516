//! Clamped B-spline bases, design matrices, and the linear shape constraints
//! and derivative priors used for dose-response curves.
//!
//! Index convention: with clamped knot vector `t` (each boundary repeated
//! `degree + 1` times), basis function `j` is supported on `[t[j], t[j+degree+1]]`.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{GaussianPrior, LinearConstraintSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    breakpoints: Vec<f64>,
    degree: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// `breakpoints` are the boundary knots with the interior knots between
    /// them, strictly increasing.
    pub fn new(breakpoints: Vec<f64>, degree: usize) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::Spec("a spline needs at least two boundary knots".into()));
        }
        if breakpoints.iter().any(|x| !x.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Spec("knots must be finite and strictly increasing".into()));
        }
        let lo = breakpoints[0];
        let hi = *breakpoints.last().unwrap();
        let mut knots = vec![lo; degree + 1];
        knots.extend_from_slice(&breakpoints[1..breakpoints.len() - 1]);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self {
            breakpoints,
            degree,
            knots,
        })
    }

    pub fn with_interior(lo: f64, hi: f64, interior: &[f64], degree: usize) -> Result<Self> {
        let mut b = Vec::with_capacity(interior.len() + 2);
        b.push(lo);
        b.extend_from_slice(interior);
        b.push(hi);
        Self::new(b, degree)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_interior(&self) -> usize {
        self.breakpoints.len() - 2
    }

    pub fn n_segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    /// Number of coefficients: interior knots + degree + 1.
    pub fn dim(&self) -> usize {
        self.n_interior() + self.degree + 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.breakpoints[0], *self.breakpoints.last().unwrap())
    }

    fn check(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfDomain { t, lo, hi });
        }
        Ok(())
    }

    /// Knot span `s` with `knots[s] <= t < knots[s+1]`; the right boundary
    /// belongs to the last span.
    fn span(&self, t: f64) -> usize {
        let last = self.dim() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        let mut lo = self.degree;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Cox-de Boor values of the `degree + 1` nonzero functions at `t`,
    /// returned with the index of the first one.
    fn nonzero(&self, t: f64) -> (usize, Vec<f64>) {
        let d = self.degree;
        let s = self.span(t);
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = t - self.knots[s + 1 - j];
            right[j] = self.knots[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (s - d, n)
    }

    /// All `dim` basis values at `t`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check(t)?;
        let (first, vals) = self.nonzero(t);
        let mut out = DVector::zeros(self.dim());
        for (k, v) in vals.into_iter().enumerate() {
            out[first + k] = v;
        }
        Ok(out)
    }

    /// Design matrix with row `r` equal to the basis at `exposures[r]`.
    pub fn design(&self, exposures: &[f64]) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(exposures.len(), self.dim());
        for (r, &t) in exposures.iter().enumerate() {
            let row = self.eval(t).map_err(|e| match e {
                Error::OutOfDomain { t, lo, hi } => {
                    Error::Spec(format!("exposure {t} in row {r} outside spline domain [{lo}, {hi}]"))
                }
                other => other,
            })?;
            x.row_mut(r).copy_from(&row.transpose());
        }
        Ok(x)
    }

    pub fn curve(&self, beta: &DVector<f64>, t: f64) -> Result<f64> {
        Ok(self.eval(t)?.dot(beta))
    }

    /// Linear map from coefficients to the coefficients of the `order`-th
    /// derivative, together with the basis those coefficients live in.
    pub fn derivative_matrix(&self, order: usize) -> Result<(DMatrix<f64>, SplineBasis)> {
        if order > self.degree {
            return Err(Error::Spec(format!(
                "derivative of order {order} of a degree-{} spline",
                self.degree
            )));
        }
        let mut map = DMatrix::identity(self.dim(), self.dim());
        let mut basis = self.clone();
        for _ in 0..order {
            let d = basis.degree;
            let n = basis.dim();
            let mut step = DMatrix::zeros(n - 1, n);
            for j in 0..n - 1 {
                let scale = d as f64 / (basis.knots[j + d + 1] - basis.knots[j + 1]);
                step[(j, j)] = -scale;
                step[(j, j + 1)] = scale;
            }
            map = step * map;
            basis = SplineBasis::new(basis.breakpoints.clone(), d - 1)?;
        }
        Ok((map, basis))
    }

    pub fn derivative(&self, beta: &DVector<f64>, t: f64, order: usize) -> Result<f64> {
        let (map, reduced) = self.derivative_matrix(order)?;
        reduced.curve(&(map * beta), t)
    }

    /// Row `a` with `a . beta = integral from the left boundary to t of the
    /// spline`, from the antiderivative identity
    /// `int B_{j,d} = (t_{j+d+1} - t_j)/(d+1) * sum_{i>j} B_{i,d+1}`.
    pub fn antiderivative_row(&self, t: f64) -> Result<DVector<f64>> {
        self.check(t)?;
        let up = SplineBasis::new(self.breakpoints.clone(), self.degree + 1)?;
        let b = up.eval(t)?;
        let d = self.degree;
        let n = self.dim();
        // tail[j] = sum_{i >= j} b[i]
        let mut tail = vec![0.0; n + 2];
        for i in (0..=n).rev() {
            tail[i] = tail[i + 1] + b[i];
        }
        Ok(DVector::from_fn(n, |j, _| {
            (self.knots[j + d + 1] - self.knots[j]) / (d as f64 + 1.0) * tail[j + 1]
        }))
    }
}

/// Knots at the given quantiles (type-7 interpolation) of `values`.
pub fn quantile_knots(values: &[f64], quantiles: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantiles
        .iter()
        .map(|&q| crate::bootstrap::quantile_sorted(&v, q))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeConstraint {
    MonotoneIncreasing,
    MonotoneDecreasing,
    Convex,
    Concave,
    /// Zero curvature on the boundary segment at the given side.
    LinearTail(Side),
}

/// Linear inequalities `C beta <= 0` (columns index spline coefficients).
pub fn shape_constraints(basis: &SplineBasis, cons: &[ShapeConstraint]) -> Result<LinearConstraintSet> {
    let n = basis.dim();
    let mut set = LinearConstraintSet::empty(n);
    for &con in cons {
        let need = match con {
            ShapeConstraint::MonotoneIncreasing | ShapeConstraint::MonotoneDecreasing => 1,
            _ => 2,
        };
        if basis.degree() < need {
            return Err(Error::Spec(format!(
                "{con:?} needs a spline of degree >= {need}, got {}",
                basis.degree()
            )));
        }
        let (rows, labels): (DMatrix<f64>, Vec<String>) = match con {
            ShapeConstraint::MonotoneIncreasing | ShapeConstraint::MonotoneDecreasing => {
                let sign = if con == ShapeConstraint::MonotoneIncreasing {
                    1.0
                } else {
                    -1.0
                };
                let mut m = DMatrix::zeros(n - 1, n);
                for j in 0..n - 1 {
                    m[(j, j)] = sign;
                    m[(j, j + 1)] = -sign;
                }
                let tag = if sign > 0.0 { "increasing" } else { "decreasing" };
                (m, (0..n - 1).map(|j| format!("{tag} {j}")).collect())
            }
            ShapeConstraint::Convex | ShapeConstraint::Concave => {
                let (d2, _) = basis.derivative_matrix(2)?;
                let (m, tag) = if con == ShapeConstraint::Concave {
                    (d2, "concave")
                } else {
                    (-d2, "convex")
                };
                let labels = (0..m.nrows()).map(|j| format!("{tag} {j}")).collect();
                (m, labels)
            }
            ShapeConstraint::LinearTail(side) => {
                let (d2, _) = basis.derivative_matrix(2)?;
                // degree-(d-2) functions active on the boundary segment
                let k = basis.degree() - 1;
                let first = match side {
                    Side::Left => 0,
                    Side::Right => d2.nrows() - k,
                };
                let mut m = DMatrix::zeros(2 * k, n);
                let mut labels = Vec::with_capacity(2 * k);
                for i in 0..k {
                    let row = d2.row(first + i);
                    m.row_mut(2 * i).copy_from(&row);
                    m.row_mut(2 * i + 1).copy_from(&(-row));
                    labels.push(format!("linear tail {side:?} {i} (<=)"));
                    labels.push(format!("linear tail {side:?} {i} (>=)"));
                }
                (m, labels)
            }
        };
        let q = rows.nrows();
        let block = LinearConstraintSet::new(rows, DVector::zeros(q), labels)?;
        set = set.stack(&block)?;
    }
    Ok(set)
}

/// Zero-mean Gaussian prior on the constant highest-order derivative of
/// each segment.
pub fn highest_derivative_prior(basis: &SplineBasis, sd: f64) -> Result<GaussianPrior> {
    if !(sd > 0.0) {
        return Err(Error::Spec("prior sd must be strictly positive".into()));
    }
    let (a, _) = basis.derivative_matrix(basis.degree())?;
    let r = a.nrows();
    GaussianPrior::new(a, DVector::zeros(r), DVector::from_element(r, sd))
}
