//! Run configuration read from TOML and its translation into a dataset and a
//! model specification.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;
use trimfit::obs_models::exposure_difference_loading;
use trimfit::splines::{
    highest_derivative_prior, quantile_knots, shape_constraints, ShapeConstraint, Side, SplineBasis,
};
use trimfit::{
    load_dataset, validate_spec, ErrorSpec, LinearConstraintSet, MEDataset, ModelSpec, ObservationModel, Schema,
};

use crate::CliError;

/// Random-effect column name that selects the exposure-difference loading of
/// a log-ratio model.
pub const EXPOSURE_DIFFERENCE: &str = "exposure_difference";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default = "one")]
    pub inlier_fraction: f64,
    #[serde(default)]
    pub error: ErrorKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub trim: TrimConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    #[default]
    Known,
    SharedSigma,
    GroupSigma,
}

impl From<ErrorKind> for ErrorSpec {
    fn from(k: ErrorKind) -> Self {
        match k {
            ErrorKind::Known => ErrorSpec::Known,
            ErrorKind::SharedSigma => ErrorSpec::SharedSigma,
            ErrorKind::GroupSigma => ErrorSpec::GroupSigma,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    #[serde(default = "default_group")]
    pub group: String,
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default = "default_se")]
    pub se: Option<String>,
    pub covariates: Option<Vec<String>>,
    #[serde(default = "default_random")]
    pub random: Vec<String>,
}

fn default_group() -> String {
    "group".into()
}

fn default_y() -> String {
    "y".into()
}

fn default_se() -> Option<String> {
    Some("se".into())
}

fn default_random() -> Vec<String> {
    vec![trimfit::data_model::INTERCEPT.into()]
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Linear {
        columns: Vec<String>,
    },
    LogSpline {
        exposure: String,
        spline: SplineConfig,
    },
    LogRatio {
        alt: [String; 2],
        reference: [String; 2],
        spline: SplineConfig,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Boundary and interior knots; takes precedence over `knot_quantiles`.
    pub knots: Option<Vec<f64>>,
    #[serde(default = "default_quantiles")]
    pub knot_quantiles: Vec<f64>,
    #[serde(default)]
    pub shape: Vec<Shape>,
    pub prior_sd: Option<f64>,
    /// Exposure at which the curve is pinned to 1.
    pub anchor: Option<f64>,
    #[serde(default = "default_min_coefficient")]
    pub min_coefficient: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_degree() -> usize {
    3
}

fn default_quantiles() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_min_coefficient() -> f64 {
    1e-6
}

fn default_grid() -> usize {
    101
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Increasing,
    Decreasing,
    Convex,
    Concave,
    LinearTailLeft,
    LinearTailRight,
}

impl From<Shape> for ShapeConstraint {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Increasing => ShapeConstraint::MonotoneIncreasing,
            Shape::Decreasing => ShapeConstraint::MonotoneDecreasing,
            Shape::Convex => ShapeConstraint::Convex,
            Shape::Concave => ShapeConstraint::Concave,
            Shape::LinearTailLeft => ShapeConstraint::LinearTail(Side::Left),
            Shape::LinearTailRight => ShapeConstraint::LinearTail(Side::Right),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub kkt_tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrimConfig {
    pub threshold: Option<f64>,
    pub max_outer: Option<usize>,
    pub w_tol: Option<f64>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        if cfg.data.path.is_relative() {
            let dir = path.parent().unwrap_or(Path::new(""));
            cfg.data.path = dir.join(&cfg.data.path);
        }
        Ok(cfg)
    }
}

/// Spline basis of a curve model with the exposure grid used for output.
pub struct Curve {
    pub basis: SplineBasis,
    pub grid: Vec<f64>,
}

pub struct Prepared {
    pub data: MEDataset,
    pub spec: ModelSpec,
    /// One name per flattened parameter.
    pub names: Vec<String>,
    pub curve: Option<Curve>,
}

fn column(data: &MEDataset, name: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let j = data
        .covariate(name)
        .ok_or_else(|| CliError::config(format!("unknown data column '{name}'")))?;
    Ok(data
        .groups
        .iter()
        .map(|g| g.covariates.column(j).iter().copied().collect())
        .collect())
}

fn intervals(data: &MEDataset, cols: &[String; 2]) -> Result<Vec<Vec<(f64, f64)>>, CliError> {
    let lo = column(data, &cols[0])?;
    let hi = column(data, &cols[1])?;
    Ok(lo
        .into_iter()
        .zip(hi)
        .map(|(a, b)| a.into_iter().zip(b).collect())
        .collect())
}

fn spline_basis(cfg: &SplineConfig, values: &[f64]) -> Result<SplineBasis, CliError> {
    let breakpoints = match &cfg.knots {
        Some(k) => k.clone(),
        None => quantile_knots(values, &cfg.knot_quantiles),
    };
    Ok(SplineBasis::new(breakpoints, cfg.degree)?)
}

fn midpoints(rows: &[Vec<(f64, f64)>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|(a, b)| 0.5 * (a + b)).collect())
        .collect()
}

/// Loads the dataset and builds the model; any validation problem is a
/// configuration error.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    if !cfg.data.path.is_file() {
        return Err(CliError::config(format!(
            "dataset file not found: {}",
            cfg.data.path.display()
        )));
    }
    let difference_slope = cfg.data.random.iter().any(|c| c == EXPOSURE_DIFFERENCE);
    if difference_slope && (cfg.data.random.len() != 1 || !matches!(cfg.model, ModelConfig::LogRatio { .. })) {
        return Err(CliError::config(format!(
            "random effect '{EXPOSURE_DIFFERENCE}' must be the only random effect of a log_ratio model"
        )));
    }
    let schema = Schema {
        group: cfg.data.group.clone(),
        y: cfg.data.y.clone(),
        se: cfg.data.se.clone(),
        covariates: cfg.data.covariates.clone(),
        random: if difference_slope {
            vec![]
        } else {
            cfg.data.random.clone()
        },
    };
    let mut data = load_dataset(&cfg.data.path, &schema)?;

    let mut linear = Vec::new();
    let mut bounds = Vec::new();
    let mut prior = None;
    let (obs, beta_names, curve) = match &cfg.model {
        ModelConfig::Linear { columns } => (
            ObservationModel::linear_from_columns(&data, columns)?,
            columns.clone(),
            None,
        ),
        ModelConfig::LogSpline { exposure, spline } => {
            let t = column(&data, exposure)?;
            let basis = spline_basis(spline, &t.concat())?;
            (
                ObservationModel::log_spline(&basis, &t)?,
                spline_names(&basis),
                Some((basis, spline)),
            )
        }
        ModelConfig::LogRatio { alt, reference, spline } => {
            let a = intervals(&data, alt)?;
            let r = intervals(&data, reference)?;
            let ends: Vec<f64> = a.iter().chain(&r).flatten().flat_map(|&(x, y)| [x, y]).collect();
            let basis = spline_basis(spline, &ends)?;
            if difference_slope {
                let (ma, mr) = (midpoints(&a), midpoints(&r));
                let mut zs = ma.iter().zip(&mr).map(|(x, y)| exposure_difference_loading(x, y));
                data = data.with_random_design(|_| zs.next().unwrap_or_else(|| DMatrix::zeros(0, 1)))?;
            }
            (
                ObservationModel::log_ratio(&basis, &a, &r)?,
                spline_names(&basis),
                Some((basis, spline)),
            )
        }
    };

    let error = ErrorSpec::from(cfg.error);
    let mut spec = ModelSpec::new(obs, error).with_inlier_fraction(cfg.inlier_fraction);
    let layout = spec.layout(&data);
    let total = layout.len();
    let curve = match curve {
        Some((basis, s)) => {
            linear.push(shape_constraints(
                &basis,
                &s.shape.iter().map(|&c| c.into()).collect::<Vec<_>>(),
            )?);
            let anchor = match (&cfg.model, s.anchor) {
                (_, Some(a)) => Some(a),
                (ModelConfig::LogRatio { .. }, None) => Some(basis.domain().0),
                _ => None,
            };
            if let Some(a) = anchor {
                linear.push(LinearConstraintSet::equality(basis.eval(a)?, 1.0, "anchor"));
            }
            if let Some(sd) = s.prior_sd {
                prior = Some(highest_derivative_prior(&basis, sd)?);
            }
            for j in 0..basis.dim() {
                bounds.push((j, s.min_coefficient, f64::INFINITY));
            }
            let (lo, hi) = basis.domain();
            let n = s.grid.max(2);
            let grid = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
            Some(Curve { basis, grid })
        }
        None => None,
    };
    for set in linear.iter().filter(|s| !s.is_empty()) {
        spec = spec.with_linear(set.embed(0, total));
    }
    if let Some(p) = prior {
        spec = spec.with_prior(p);
    }
    for (j, lo, hi) in bounds {
        spec = spec.bound(j, lo, hi);
    }
    if let Some(t) = cfg.solver.kkt_tol {
        spec.solver.kkt_tol = t;
    }
    if let Some(m) = cfg.solver.max_iter {
        spec.solver.max_iter = m;
    }
    if let Some(t) = cfg.trim.threshold {
        spec.trim.threshold = t;
    }
    if let Some(m) = cfg.trim.max_outer {
        spec.trim.max_outer = m;
    }
    if let Some(t) = cfg.trim.w_tol {
        spec.trim.w_tol = t;
    }

    let problems = validate_spec(&data, &spec);
    if !problems.is_empty() {
        return Err(CliError::config(problems.join("; ")));
    }

    let gamma_names: Vec<String> = if difference_slope {
        vec![format!("gamma_{EXPOSURE_DIFFERENCE}")]
    } else {
        cfg.data.random.iter().map(|c| format!("gamma_{c}")).collect()
    };
    let sigma_names: Vec<String> = match error {
        ErrorSpec::Known => vec![],
        ErrorSpec::SharedSigma => vec!["sigma".into()],
        ErrorSpec::GroupSigma => data.groups.iter().map(|g| format!("sigma_{}", g.id)).collect(),
    };
    let names = beta_names
        .into_iter()
        .map(|b| format!("beta_{b}"))
        .chain(gamma_names)
        .chain(sigma_names)
        .collect();
    Ok(Prepared {
        data,
        spec,
        names,
        curve,
    })
}

fn spline_names(basis: &SplineBasis) -> Vec<String> {
    (0..basis.dim()).map(|j| j.to_string()).collect()
}
