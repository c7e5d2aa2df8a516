//! Datasets, parameter vectors, priors, constraints and the model
//! specification tying them together.
//!
//! The flattened parameter ordering used by every constraint matrix and
//! gradient is `[beta; gamma; sigma]`.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inner_solver::SolverOptions;
use crate::obs_models::ObservationModel;
use crate::trimming::TrimOptions;

/// Hard lower bound on measurement-error standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Reserved random-effect column name meaning a column of ones.
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: String,
    pub y: DVector<f64>,
    /// Random-effect design, `n_i x k_gamma`.
    pub z: DMatrix<f64>,
    /// Raw covariate columns in dataset column order.
    pub covariates: DMatrix<f64>,
    pub se: Option<DVector<f64>>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MEDataset {
    pub groups: Vec<Group>,
    pub n_total: usize,
    pub k_gamma: usize,
    pub covariate_names: Vec<String>,
}

impl MEDataset {
    pub fn new(groups: Vec<Group>, covariate_names: Vec<String>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Validation("no observations".into()));
        }
        let k_gamma = groups[0].z.ncols();
        let mut seen = HashMap::new();
        let mut n_total = 0;
        for (i, g) in groups.iter().enumerate() {
            let n = g.len();
            if n == 0 {
                return Err(Error::Validation(format!("group '{}' has no observations", g.id)));
            }
            if seen.insert(g.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate group id '{}'", g.id)));
            }
            if g.z.nrows() != n || g.z.ncols() != k_gamma {
                return Err(Error::Validation(format!(
                    "group '{}': Z is {}x{}, expected {}x{}",
                    g.id,
                    g.z.nrows(),
                    g.z.ncols(),
                    n,
                    k_gamma
                )));
            }
            if g.covariates.nrows() != n || g.covariates.ncols() != covariate_names.len() {
                return Err(Error::Validation(format!(
                    "group '{}': covariate block has inconsistent shape",
                    g.id
                )));
            }
            if let Some(se) = &g.se {
                if se.len() != n {
                    return Err(Error::Validation(format!(
                        "group '{}': se has {} entries, expected {}",
                        g.id,
                        se.len(),
                        n
                    )));
                }
                if let Some(j) = se.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
                    return Err(Error::Validation(format!(
                        "group '{}', row {}: se must be strictly positive",
                        g.id, j
                    )));
                }
            }
            n_total += n;
        }
        Ok(Self {
            groups,
            n_total,
            k_gamma,
            covariate_names,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Offset of each group's first observation in the flat weight vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.groups
            .iter()
            .map(|g| {
                let o = acc;
                acc += g.len();
                o
            })
            .collect()
    }

    /// Maps a flat observation index to `(group, row)`.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        let mut rest = index;
        for (gi, g) in self.groups.iter().enumerate() {
            if rest < g.len() {
                return Some((gi, rest));
            }
            rest -= g.len();
        }
        None
    }

    pub fn covariate(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Replace every group's random-effect design.
    pub fn with_random_design<F>(mut self, mut design: F) -> Result<Self>
    where
        F: FnMut(&Group) -> DMatrix<f64>,
    {
        let zs: Vec<_> = self.groups.iter().map(&mut design).collect();
        for (g, z) in self.groups.iter_mut().zip(zs) {
            g.z = z;
        }
        let names = std::mem::take(&mut self.covariate_names);
        MEDataset::new(self.groups, names)
    }

    /// Random-effect design from named covariate columns (or [`INTERCEPT`]).
    pub fn with_random_columns(self, columns: &[String]) -> Result<Self> {
        let mut idx = Vec::with_capacity(columns.len());
        for c in columns {
            if c == INTERCEPT {
                idx.push(None);
            } else {
                let j = self
                    .covariate(c)
                    .ok_or_else(|| Error::Schema(format!("unknown random-effect column '{c}'")))?;
                idx.push(Some(j));
            }
        }
        self.with_random_design(|g| {
            DMatrix::from_fn(g.len(), idx.len(), |r, k| match idx[k] {
                None => 1.0,
                Some(j) => g.covariates[(r, j)],
            })
        })
    }

    pub fn has_se(&self) -> bool {
        self.groups.iter().all(|g| g.se.is_some())
    }

    /// Writes the dataset in the CSV layout read by [`load_dataset`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let with_se = self.has_se();
        let mut header = vec!["group".to_string(), "y".to_string()];
        if with_se {
            header.push("se".into());
        }
        header.extend(self.covariate_names.iter().cloned());
        writeln!(out, "{}", header.join(","))?;
        for g in &self.groups {
            for r in 0..g.len() {
                let mut fields = vec![g.id.clone(), format!("{:?}", g.y[r])];
                if with_se {
                    fields.push(format!("{:?}", g.se.as_ref().unwrap()[r]));
                }
                fields.extend((0..g.covariates.ncols()).map(|j| format!("{:?}", g.covariates[(r, j)])));
                writeln!(out, "{}", fields.join(","))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub group: String,
    pub y: String,
    pub se: Option<String>,
    /// Covariate columns to keep; `None` keeps every remaining column.
    pub covariates: Option<Vec<String>>,
    /// Random-effect design columns (covariate names or [`INTERCEPT`]).
    pub random: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            group: "group".into(),
            y: "y".into(),
            se: Some("se".into()),
            covariates: None,
            random: vec![INTERCEPT.into()],
        }
    }
}

fn parse_num(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}, column '{col}': cannot parse '{s}' as a number")))
}

/// Reads a grouped dataset from CSV. Row numbers in errors count data rows
/// from 1 (the header is not counted).
pub fn load_dataset(csv_path: &Path, schema: &Schema) -> Result<MEDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(csv_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
            _ => Error::Parse(e.to_string()),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let gcol = find(&schema.group)?;
    let ycol = find(&schema.y)?;
    // A schema se column that is absent from the file is allowed: the dataset
    // then has no se, and Known error models are rejected by validate_spec.
    let secol = match &schema.se {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };
    let cov_names: Vec<String> = match &schema.covariates {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != gcol && *i != ycol && Some(*i) != secol)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_idx = cov_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    struct Acc {
        y: Vec<f64>,
        se: Vec<f64>,
        cov: Vec<Vec<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, Acc> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        let gid = rec[gcol].trim().to_string();
        let y = parse_num(&rec[ycol], row, &schema.y)?;
        let se = match secol {
            Some(c) => {
                let s = parse_num(&rec[c], row, "se")?;
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Validation(format!(
                        "row {row}: se must be strictly positive, got {s}"
                    )));
                }
                s
            }
            None => f64::NAN,
        };
        let cov = cov_idx
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| parse_num(&rec[c], row, name))
            .collect::<Result<Vec<_>>>()?;
        let entry = acc.entry(gid.clone()).or_insert_with(|| {
            order.push(gid);
            Acc {
                y: Vec::new(),
                se: Vec::new(),
                cov: Vec::new(),
            }
        });
        entry.y.push(y);
        entry.se.push(se);
        entry.cov.push(cov);
    }
    if order.is_empty() {
        return Err(Error::Validation("no observations".into()));
    }
    let k = cov_names.len();
    let groups = order
        .into_iter()
        .map(|id| {
            let a = acc.remove(&id).unwrap();
            let n = a.y.len();
            Group {
                y: DVector::from_vec(a.y),
                z: DMatrix::zeros(n, 0),
                covariates: DMatrix::from_fn(n, k, |r, j| a.cov[r][j]),
                se: secol.map(|_| DVector::from_vec(a.se)),
                id,
            }
        })
        .collect();
    MEDataset::new(groups, cov_names)?.with_random_columns(&schema.random)
}

/// Measurement-error model for the diagonal of `Lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorSpec {
    /// Variances are the squared reported standard errors.
    Known,
    /// One unknown sigma shared by all observations.
    SharedSigma,
    /// One unknown sigma per group.
    GroupSigma,
}

impl ErrorSpec {
    pub fn sigma_len(&self, n_groups: usize) -> usize {
        match self {
            ErrorSpec::Known => 0,
            ErrorSpec::SharedSigma => 1,
            ErrorSpec::GroupSigma => n_groups,
        }
    }
}

/// Sizes of the three parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub k_beta: usize,
    pub k_gamma: usize,
    pub k_sigma: usize,
}

impl ThetaLayout {
    pub fn len(&self) -> usize {
        self.k_beta + self.k_gamma + self.k_sigma
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gamma_offset(&self) -> usize {
        self.k_beta
    }

    pub fn sigma_offset(&self) -> usize {
        self.k_beta + self.k_gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    /// Random-effect variances (diagonal of Gamma).
    pub gamma: DVector<f64>,
    /// Measurement-error standard deviations.
    pub sigma: DVector<f64>,
}

impl Theta {
    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout {
            k_beta: self.beta.len(),
            k_gamma: self.gamma.len(),
            k_sigma: self.sigma.len(),
        }
    }

    pub fn flatten(&self) -> DVector<f64> {
        let l = self.layout();
        let mut v = DVector::zeros(l.len());
        v.rows_mut(0, l.k_beta).copy_from(&self.beta);
        v.rows_mut(l.gamma_offset(), l.k_gamma).copy_from(&self.gamma);
        v.rows_mut(l.sigma_offset(), l.k_sigma).copy_from(&self.sigma);
        v
    }

    pub fn unflatten(flat: &DVector<f64>, layout: ThetaLayout) -> Self {
        assert_eq!(flat.len(), layout.len());
        Self {
            beta: flat.rows(0, layout.k_beta).into_owned(),
            gamma: flat.rows(layout.gamma_offset(), layout.k_gamma).into_owned(),
            sigma: flat.rows(layout.sigma_offset(), layout.k_sigma).into_owned(),
        }
    }

    /// Measurement variances `lambda_ij` for group `gi`.
    pub fn variances(&self, error: ErrorSpec, group: &Group, gi: usize) -> DVector<f64> {
        match error {
            ErrorSpec::Known => group.se.as_ref().expect("Known error model requires se").map(|s| s * s),
            ErrorSpec::SharedSigma => DVector::from_element(group.len(), self.sigma[0] * self.sigma[0]),
            ErrorSpec::GroupSigma => DVector::from_element(group.len(), self.sigma[gi] * self.sigma[gi]),
        }
    }
}

/// `C theta <= c` over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearConstraintSet {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub labels: Vec<String>,
}

impl LinearConstraintSet {
    pub fn empty(ncols: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(0, ncols),
            rhs: DVector::zeros(0),
            labels: Vec::new(),
        }
    }

    pub fn new(matrix: DMatrix<f64>, rhs: DVector<f64>, labels: Vec<String>) -> Result<Self> {
        if matrix.nrows() != rhs.len() || labels.len() != rhs.len() {
            return Err(Error::Spec(format!(
                "constraint set has {} rows, {} bounds and {} labels",
                matrix.nrows(),
                rhs.len(),
                labels.len()
            )));
        }
        Ok(Self { matrix, rhs, labels })
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Pads columns so a set written over a sub-block starting at `offset`
    /// applies to a vector of length `total`.
    pub fn embed(&self, offset: usize, total: usize) -> Self {
        let mut m = DMatrix::zeros(self.len(), total);
        m.view_mut((0, offset), (self.len(), self.ncols()))
            .copy_from(&self.matrix);
        Self {
            matrix: m,
            rhs: self.rhs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Row-wise concatenation. Column counts must match (an empty set with zero
    /// columns is accepted as the identity).
    pub fn stack(&self, other: &Self) -> Result<Self> {
        if self.is_empty() && self.ncols() == 0 {
            return Ok(other.clone());
        }
        if other.is_empty() && other.ncols() == 0 {
            return Ok(self.clone());
        }
        if self.ncols() != other.ncols() {
            return Err(Error::Spec(format!(
                "cannot stack constraint sets with {} and {} columns",
                self.ncols(),
                other.ncols()
            )));
        }
        let rows = self.len() + other.len();
        let mut m = DMatrix::zeros(rows, self.ncols());
        m.rows_mut(0, self.len()).copy_from(&self.matrix);
        m.rows_mut(self.len(), other.len()).copy_from(&other.matrix);
        let mut rhs = DVector::zeros(rows);
        rhs.rows_mut(0, self.len()).copy_from(&self.rhs);
        rhs.rows_mut(self.len(), other.len()).copy_from(&other.rhs);
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        Ok(Self { matrix: m, rhs, labels })
    }

    /// `a^T theta = b` as the pair `a^T theta <= b`, `-a^T theta <= -b`.
    pub fn equality(row: DVector<f64>, value: f64, label: &str) -> Self {
        let n = row.len();
        let mut m = DMatrix::zeros(2, n);
        m.row_mut(0).copy_from(&row.transpose());
        m.row_mut(1).copy_from(&(-row).transpose());
        Self {
            matrix: m,
            rhs: DVector::from_vec(vec![value, -value]),
            labels: vec![format!("{label} (<=)"), format!("{label} (>=)")],
        }
    }
}

pub type VectorFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
pub type MatrixFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// `evaluator(theta) <= upper` with a user-supplied Jacobian.
#[derive(Clone)]
pub struct NonlinearConstraint {
    pub evaluator: Arc<VectorFn>,
    pub jacobian: Arc<MatrixFn>,
    pub upper: DVector<f64>,
}

impl NonlinearConstraint {
    pub fn new(
        evaluator: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        upper: DVector<f64>,
    ) -> Self {
        Self {
            evaluator: Arc::new(evaluator),
            jacobian: Arc::new(jacobian),
            upper,
        }
    }

    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }
}

impl fmt::Debug for NonlinearConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearConstraint")
            .field("upper", &self.upper)
            .finish_non_exhaustive()
    }
}

/// Quadratic penalty `1/2 sum_j ((A beta - mean)_j / sd_j)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub a: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
}

impl GaussianPrior {
    pub fn new(a: DMatrix<f64>, mean: DVector<f64>, sd: DVector<f64>) -> Result<Self> {
        if a.nrows() != mean.len() || mean.len() != sd.len() {
            return Err(Error::Spec("prior dimensions disagree".into()));
        }
        if sd.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Spec("prior sd must be strictly positive".into()));
        }
        Ok(Self { a, mean, sd })
    }

    /// Penalty value and gradient with respect to beta.
    pub fn penalty(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let z = (&self.a * beta - &self.mean).component_div(&self.sd);
        let value = 0.5 * z.norm_squared();
        let grad = self.a.transpose() * z.component_div(&self.sd);
        (value, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimWeights {
    pub w: DVector<f64>,
    pub h: f64,
}

impl TrimWeights {
    pub fn new(w: DVector<f64>, h: f64) -> Result<Self> {
        if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Validation("trim weights must lie in [0, 1]".into()));
        }
        if (w.sum() - h).abs() > 1e-8 {
            return Err(Error::Validation(format!(
                "trim weights sum to {} but h = {}",
                w.sum(),
                h
            )));
        }
        Ok(Self { w, h })
    }

    /// The interior starting point `(h/n) 1`.
    pub fn uniform(n: usize, h: f64) -> Self {
        Self {
            w: DVector::from_element(n, h / n as f64),
            h,
        }
    }

    pub fn ones(n: usize) -> Self {
        Self {
            w: DVector::from_element(n, 1.0),
            h: n as f64,
        }
    }
}

/// How many observations the fit must retain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrimBudget {
    InlierFraction(f64),
    Count(usize),
}

impl TrimBudget {
    /// `h` as used by the fit: fractions are rounded and clamped to `[1, n]`.
    pub fn h(&self, n_total: usize) -> usize {
        match *self {
            TrimBudget::InlierFraction(f) => ((f * n_total as f64).round() as usize).clamp(1, n_total),
            TrimBudget::Count(h) => h.clamp(1, n_total),
        }
    }
}

/// Everything besides the data that defines a fit.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub obs: ObservationModel,
    pub error: ErrorSpec,
    pub priors: Vec<GaussianPrior>,
    /// Linear inequalities over the flattened parameter vector.
    pub linear: LinearConstraintSet,
    pub nonlinear: Vec<NonlinearConstraint>,
    /// Extra `(flat index, lower, upper)` bounds intersected with the defaults
    /// (`gamma >= 0`, `sigma >= SIGMA_FLOOR`). `lower == upper` fixes a parameter.
    pub bounds: Vec<(usize, f64, f64)>,
    pub budget: TrimBudget,
    pub solver: SolverOptions,
    pub trim: TrimOptions,
    /// Starting point; defaults are derived from the data when absent.
    pub theta_init: Option<Theta>,
}

impl ModelSpec {
    pub fn new(obs: ObservationModel, error: ErrorSpec) -> Self {
        Self {
            obs,
            error,
            priors: Vec::new(),
            linear: LinearConstraintSet::empty(0),
            nonlinear: Vec::new(),
            bounds: Vec::new(),
            budget: TrimBudget::InlierFraction(1.0),
            solver: SolverOptions::default(),
            trim: TrimOptions::default(),
            theta_init: None,
        }
    }

    pub fn with_inlier_fraction(mut self, f: f64) -> Self {
        self.budget = TrimBudget::InlierFraction(f);
        self
    }

    pub fn with_budget(mut self, budget: TrimBudget) -> Self {
        self.budget = budget;
        self
    }

    /// Fix the flat parameter at `index` to `value`.
    pub fn fix(mut self, index: usize, value: f64) -> Self {
        self.bounds.push((index, value, value));
        self
    }

    pub fn bound(mut self, index: usize, lower: f64, upper: f64) -> Self {
        self.bounds.push((index, lower, upper));
        self
    }

    pub fn with_prior(mut self, prior: GaussianPrior) -> Self {
        self.priors.push(prior);
        self
    }

    pub fn with_linear(mut self, set: LinearConstraintSet) -> Self {
        self.linear = self.linear.stack(&set).expect("constraint column mismatch");
        self
    }

    pub fn layout(&self, data: &MEDataset) -> ThetaLayout {
        ThetaLayout {
            k_beta: self.obs.k_beta(),
            k_gamma: data.k_gamma,
            k_sigma: self.error.sigma_len(data.n_groups()),
        }
    }

    pub fn h(&self, data: &MEDataset) -> usize {
        self.budget.h(data.n_total)
    }

    /// Default bounds intersected with the user's.
    pub fn param_bounds(&self, layout: ThetaLayout) -> (DVector<f64>, DVector<f64>) {
        let n = layout.len();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for j in 0..layout.k_gamma {
            lo[layout.gamma_offset() + j] = 0.0;
        }
        for j in 0..layout.k_sigma {
            lo[layout.sigma_offset() + j] = SIGMA_FLOOR;
        }
        for &(i, l, u) in &self.bounds {
            if i < n {
                lo[i] = lo[i].max(l);
                hi[i] = hi[i].min(u);
            }
        }
        (lo, hi)
    }
}

/// Reports every mismatch between the data and the specification; an empty
/// list means the pair is consistent.
pub fn validate_spec(data: &MEDataset, spec: &ModelSpec) -> Vec<String> {
    let mut out = Vec::new();
    let layout = spec.layout(data);
    let k_theta = layout.len();

    out.extend(spec.obs.check_against(data));

    if spec.error == ErrorSpec::Known {
        for g in &data.groups {
            if g.se.is_none() {
                out.push(format!(
                    "group '{}' has no se column but the error model is Known",
                    g.id
                ));
            }
        }
    }

    if !spec.linear.is_empty() && spec.linear.ncols() != k_theta {
        out.push(format!(
            "linear constraints have {} columns, expected {} (beta {}, gamma {}, sigma {})",
            spec.linear.ncols(),
            k_theta,
            layout.k_beta,
            layout.k_gamma,
            layout.k_sigma
        ));
    }
    if spec
        .linear
        .matrix
        .iter()
        .chain(spec.linear.rhs.iter())
        .any(|x| !x.is_finite())
    {
        out.push("linear constraints contain non-finite entries".into());
    }
    for (i, p) in spec.priors.iter().enumerate() {
        if p.a.ncols() != layout.k_beta {
            out.push(format!(
                "prior {i} acts on {} coefficients, expected {}",
                p.a.ncols(),
                layout.k_beta
            ));
        }
    }
    for (i, nc) in spec.nonlinear.iter().enumerate() {
        let probe = DVector::from_element(k_theta, 1.0);
        let v = (nc.evaluator)(&probe);
        let j = (nc.jacobian)(&probe);
        if v.len() != nc.len() || j.nrows() != nc.len() || j.ncols() != k_theta {
            out.push(format!("nonlinear constraint {i} has inconsistent dimensions"));
        }
    }
    let (lo, hi) = spec.param_bounds(layout);
    for &(i, _, _) in &spec.bounds {
        if i >= k_theta {
            out.push(format!("bound on parameter {i} but theta has {k_theta} entries"));
        }
    }
    for i in 0..k_theta {
        if lo[i] > hi[i] {
            out.push(format!("parameter {i} has empty bounds [{}, {}]", lo[i], hi[i]));
        }
    }
    if let Some(t) = &spec.theta_init {
        if t.layout() != layout {
            out.push("theta_init does not match the parameter layout".into());
        }
    }

    match spec.budget {
        TrimBudget::InlierFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                out.push("inlier_fraction must be in (0,1]".into());
            }
        }
        TrimBudget::Count(h) => {
            if h > data.n_total {
                out.push(format!(
                    "trim budget exceeds data: h = {h} > n_total = {}",
                    data.n_total
                ));
            }
            if h == 0 {
                out.push("trim budget must retain at least one observation".into());
            }
        }
    }
    out
}
