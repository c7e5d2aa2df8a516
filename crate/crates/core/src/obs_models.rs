//! Fixed-effect observation models `f_i(beta)` and their Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{MEDataset, INTERCEPT};
use crate::error::{Error, Result};
use crate::splines::SplineBasis;

/// Inner products at or below this are outside the log model's domain.
pub const DOMAIN_GUARD: f64 = 1e-10;

/// Per-group design rows binding covariates to `beta`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationModel {
    /// `f_i = X_i beta`.
    Linear { designs: Vec<DMatrix<f64>> },
    /// `f_ij = ln <x_ij, beta>`.
    LogSpline { designs: Vec<DMatrix<f64>> },
    /// `f_ij = ln <x1_ij, beta> - ln <x0_ij, beta>`.
    LogRatio {
        alt: Vec<DMatrix<f64>>,
        reference: Vec<DMatrix<f64>>,
    },
}

fn inner(row: nalgebra::DVectorView<'_, f64>, beta: &DVector<f64>, group: usize, r: usize) -> Result<f64> {
    let v = row.dot(beta);
    if !(v > DOMAIN_GUARD) {
        return Err(Error::Domain {
            group,
            row: r,
            msg: format!("log of nonpositive risk <x, beta> = {v:.3e}"),
        });
    }
    Ok(v)
}

impl ObservationModel {
    /// Linear model from named covariate columns; [`INTERCEPT`] is a column of ones.
    pub fn linear_from_columns(data: &MEDataset, columns: &[String]) -> Result<Self> {
        let mut idx = Vec::with_capacity(columns.len());
        for c in columns {
            if c == INTERCEPT {
                idx.push(None);
            } else {
                idx.push(Some(data.covariate(c).ok_or_else(|| {
                    Error::Schema(format!("unknown fixed-effect column '{c}'"))
                })?));
            }
        }
        let designs = data
            .groups
            .iter()
            .map(|g| {
                DMatrix::from_fn(g.len(), idx.len(), |r, k| match idx[k] {
                    None => 1.0,
                    Some(j) => g.covariates[(r, j)],
                })
            })
            .collect();
        Ok(ObservationModel::Linear { designs })
    }

    /// Direct log-risk spline model from per-group exposures.
    pub fn log_spline(basis: &SplineBasis, exposures: &[Vec<f64>]) -> Result<Self> {
        let designs = exposures.iter().map(|e| basis.design(e)).collect::<Result<Vec<_>>>()?;
        Ok(ObservationModel::LogSpline { designs })
    }

    /// Log ratio of interval-averaged risks. Each entry of `alt` and
    /// `reference` is an `(a0, a1)` exposure interval.
    pub fn log_ratio(basis: &SplineBasis, alt: &[Vec<(f64, f64)>], reference: &[Vec<(f64, f64)>]) -> Result<Self> {
        let build = |groups: &[Vec<(f64, f64)>]| -> Result<Vec<DMatrix<f64>>> {
            groups
                .iter()
                .map(|rows| {
                    let mut m = DMatrix::zeros(rows.len(), basis.dim());
                    for (r, &(a0, a1)) in rows.iter().enumerate() {
                        let x = average_integral_design(basis, a0, a1)?;
                        m.row_mut(r).copy_from(&x.transpose());
                    }
                    Ok(m)
                })
                .collect()
        };
        Ok(ObservationModel::LogRatio {
            alt: build(alt)?,
            reference: build(reference)?,
        })
    }

    pub fn k_beta(&self) -> usize {
        match self {
            ObservationModel::Linear { designs } | ObservationModel::LogSpline { designs } => {
                designs.first().map_or(0, |d| d.ncols())
            }
            ObservationModel::LogRatio { alt, .. } => alt.first().map_or(0, |d| d.ncols()),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, ObservationModel::Linear { .. })
    }

    fn row_counts(&self) -> Vec<(usize, usize)> {
        match self {
            ObservationModel::Linear { designs } | ObservationModel::LogSpline { designs } => {
                designs.iter().map(|d| (d.nrows(), d.ncols())).collect()
            }
            ObservationModel::LogRatio { alt, reference } => alt
                .iter()
                .zip(reference)
                .map(|(a, r)| {
                    if a.shape() == r.shape() {
                        (a.nrows(), a.ncols())
                    } else {
                        (usize::MAX, usize::MAX)
                    }
                })
                .collect(),
        }
    }

    /// Shape mismatches against a dataset, as diagnostics.
    pub fn check_against(&self, data: &MEDataset) -> Vec<String> {
        let mut out = Vec::new();
        let shapes = self.row_counts();
        if let ObservationModel::LogRatio { alt, reference } = self {
            if alt.len() != reference.len() {
                out.push("log-ratio model has different group counts for alt and reference".into());
            }
        }
        if shapes.len() != data.n_groups() {
            out.push(format!(
                "observation model binds {} groups, dataset has {}",
                shapes.len(),
                data.n_groups()
            ));
            return out;
        }
        let k = self.k_beta();
        for (g, &(rows, cols)) in data.groups.iter().zip(&shapes) {
            if rows == usize::MAX {
                out.push(format!("group '{}': alt and reference designs differ in shape", g.id));
            } else if rows != g.len() || cols != k {
                out.push(format!(
                    "group '{}': design is {rows}x{cols}, expected {}x{k}",
                    g.id,
                    g.len()
                ));
            }
        }
        out
    }

    /// `f_i(beta)` for group `gi`.
    pub fn f_eval(&self, beta: &DVector<f64>, gi: usize) -> Result<DVector<f64>> {
        match self {
            ObservationModel::Linear { designs } => Ok(&designs[gi] * beta),
            ObservationModel::LogSpline { designs } => {
                let x = &designs[gi];
                let mut f = DVector::zeros(x.nrows());
                for r in 0..x.nrows() {
                    f[r] = inner(x.row(r).transpose().as_view(), beta, gi, r)?.ln();
                }
                Ok(f)
            }
            ObservationModel::LogRatio { alt, reference } => {
                let (x1, x0) = (&alt[gi], &reference[gi]);
                let mut f = DVector::zeros(x1.nrows());
                for r in 0..x1.nrows() {
                    let a = inner(x1.row(r).transpose().as_view(), beta, gi, r)?;
                    let b = inner(x0.row(r).transpose().as_view(), beta, gi, r)?;
                    f[r] = a.ln() - b.ln();
                }
                Ok(f)
            }
        }
    }

    /// Jacobian of `f_i` with respect to `beta`, `n_i x k_beta`.
    pub fn f_jacobian(&self, beta: &DVector<f64>, gi: usize) -> Result<DMatrix<f64>> {
        match self {
            ObservationModel::Linear { designs } => Ok(designs[gi].clone()),
            ObservationModel::LogSpline { designs } => {
                let x = &designs[gi];
                let mut j = x.clone();
                for r in 0..x.nrows() {
                    let v = inner(x.row(r).transpose().as_view(), beta, gi, r)?;
                    j.row_mut(r).scale_mut(1.0 / v);
                }
                Ok(j)
            }
            ObservationModel::LogRatio { alt, reference } => {
                let (x1, x0) = (&alt[gi], &reference[gi]);
                let mut j = DMatrix::zeros(x1.nrows(), x1.ncols());
                for r in 0..x1.nrows() {
                    let a = inner(x1.row(r).transpose().as_view(), beta, gi, r)?;
                    let b = inner(x0.row(r).transpose().as_view(), beta, gi, r)?;
                    let row = x1.row(r) / a - x0.row(r) / b;
                    j.row_mut(r).copy_from(&row);
                }
                Ok(j)
            }
        }
    }
}

/// Row `x` with `<x, beta>` equal to the average of the spline over
/// `[a0, a1]`. A degenerate interval returns the basis at `a0`.
pub fn average_integral_design(basis: &SplineBasis, a0: f64, a1: f64) -> Result<DVector<f64>> {
    if a0 == a1 {
        return basis.eval(a0);
    }
    if a0 > a1 {
        return Err(Error::Spec(format!("interval [{a0}, {a1}] is reversed")));
    }
    let hi = basis.antiderivative_row(a1)?;
    let lo = basis.antiderivative_row(a0)?;
    Ok((hi - lo) / (a1 - a0))
}

/// Single-column random-effect loading `alt - reference` per observation,
/// e.g. interval midpoints for log-ratio data.
pub fn exposure_difference_loading(alt: &[f64], reference: &[f64]) -> DMatrix<f64> {
    assert_eq!(alt.len(), reference.len());
    DMatrix::from_fn(alt.len(), 1, |r, _| alt[r] - reference[r])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> SplineBasis {
        SplineBasis::with_interior(0.0, 10.0, &[2.0, 5.0, 7.5], 3).unwrap()
    }

    #[test]
    fn log_ratio_identical_rows_is_zero() {
        let b = cubic();
        let m = ObservationModel::log_ratio(&b, &[vec![(1.0, 3.0)]], &[vec![(1.0, 3.0)]]).unwrap();
        let beta = DVector::from_fn(b.dim(), |i, _| 1.0 + i as f64);
        assert_eq!(m.f_eval(&beta, 0).unwrap()[0], 0.0);
    }

    #[test]
    fn log_spline_unit_risk() {
        let m = ObservationModel::LogSpline {
            designs: vec![DMatrix::from_row_slice(1, 2, &[0.5, 0.5])],
        };
        let beta = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(m.f_eval(&beta, 0).unwrap()[0], 0.0);
    }

    #[test]
    fn log_ratio_closed_form() {
        let m = ObservationModel::LogRatio {
            alt: vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])],
            reference: vec![DMatrix::from_row_slice(1, 2, &[0.0, 1.0])],
        };
        let beta = DVector::from_vec(vec![2.0, 1.0]);
        assert!((m.f_eval(&beta, 0).unwrap()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn domain_error_names_row() {
        let m = ObservationModel::LogSpline {
            designs: vec![DMatrix::from_row_slice(2, 1, &[1.0, -1.0])],
        };
        let err = m.f_eval(&DVector::from_element(1, 1.0), 0).unwrap_err();
        assert!(matches!(err, Error::Domain { group: 0, row: 1, .. }));
    }

    #[test]
    fn linear_jacobian_is_constant() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, -1.0]);
        let m = ObservationModel::Linear {
            designs: vec![x.clone()],
        };
        assert_eq!(m.f_jacobian(&DVector::from_vec(vec![0.0, 0.0]), 0).unwrap(), x);
        assert_eq!(m.f_jacobian(&DVector::from_vec(vec![5.0, -3.0]), 0).unwrap(), x);
    }

    #[test]
    fn log_spline_jacobian_unit_vector() {
        let m = ObservationModel::LogSpline {
            designs: vec![DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])],
        };
        let j = m.f_jacobian(&DVector::from_vec(vec![2.0, 7.0, 9.0]), 0).unwrap();
        assert_eq!(j.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn average_of_constant() {
        let b = SplineBasis::new(vec![0.0, 4.0], 0).unwrap();
        let x = average_integral_design(&b, 0.5, 3.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_spline_average_is_midpoint_value() {
        let b = SplineBasis::new(vec![0.0, 1.0, 3.0, 4.0], 1).unwrap();
        let x = average_integral_design(&b, 1.0, 3.0).unwrap();
        let mid = b.eval(2.0).unwrap();
        assert!((x - mid).amax() < 1e-14);
    }

    #[test]
    fn degenerate_interval() {
        let b = cubic();
        assert_eq!(average_integral_design(&b, 4.0, 4.0).unwrap(), b.eval(4.0).unwrap());
        assert!(average_integral_design(&b, 4.0, 3.0).is_err());
    }

    #[test]
    fn constant_spline_gives_zero_log_ratio() {
        let b = cubic();
        let m =
            ObservationModel::log_ratio(&b, &[vec![(6.0, 9.0), (2.0, 4.0)]], &[vec![(0.0, 1.0), (0.0, 10.0)]]).unwrap();
        let beta = DVector::from_element(b.dim(), 3.7);
        assert!(m.f_eval(&beta, 0).unwrap().amax() < 1e-14);
    }
}
