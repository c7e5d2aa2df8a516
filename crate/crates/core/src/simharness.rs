//! Synthetic meta-analysis and longitudinal experiments with injected
//! outliers, outlier-detection metrics and a replication driver.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::data_model::{ErrorSpec, Group, MEDataset, ModelSpec, TrimBudget};
use crate::error::{Error, Result};
use crate::likelihood::residuals;
use crate::obs_models::ObservationModel;
use crate::par::{map_indexed, Execution};
use crate::rng::RngStream;
use crate::trimming::{fit_trimmed, FitResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Known standard errors attached to every row.
    Meta,
    /// One shared measurement SD estimated from the data.
    Longitudinal,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Meta => "meta",
            Mode::Longitudinal => "longitudinal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(Mode::Meta),
            "longitudinal" => Ok(Mode::Longitudinal),
            other => Err(Error::Spec(format!("unknown benchmark mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub groups: usize,
    pub per_group: usize,
    pub beta: [f64; 2],
    /// Standard deviation of the group random intercept.
    pub gamma_sd: f64,
    pub sigma: f64,
    pub x_range: (f64, f64),
    pub n_outliers: usize,
    /// Outliers are drawn among rows with `x` in this window.
    pub outlier_window: (f64, f64),
    /// Outliers become `y - offset_base - |N(0, offset_sd^2)|`.
    pub offset_base: f64,
    pub offset_sd: f64,
    /// Standard error attached to every row in meta mode.
    pub meta_se: f64,
    pub inlier_fraction: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            groups: 10,
            per_group: 10,
            beta: [0.0, 5.0],
            gamma_sd: 6.0,
            sigma: 4.0,
            x_range: (0.0, 10.0),
            n_outliers: 15,
            outlier_window: (6.0, 10.0),
            offset_base: 30.0,
            offset_sd: 80.0,
            meta_se: 4.0,
            inlier_fraction: 0.8,
            replications: 30,
            seed: 0,
        }
    }
}

const MAX_REDRAWS: usize = 100;

/// Draws replication `replication` and returns it with the flat indices of the
/// injected outliers.
pub fn simulate_dataset(spec: &SimSpec, mode: Mode, replication: usize) -> Result<(MEDataset, Vec<usize>)> {
    let n = spec.groups * spec.per_group;
    if spec.n_outliers > n {
        return Err(Error::Spec("more outliers than observations".into()));
    }
    let mut rng = RngStream::new(spec.seed).substream(replication as u64);
    let (lo, hi) = spec.x_range;
    let (wlo, whi) = spec.outlier_window;
    let mut x = Vec::new();
    let mut eligible = Vec::new();
    for attempt in 0..=MAX_REDRAWS {
        if attempt == MAX_REDRAWS {
            return Err(Error::Spec(format!(
                "fewer than {} rows fell in the outlier window after {MAX_REDRAWS} draws",
                spec.n_outliers
            )));
        }
        x = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        eligible = (0..n).filter(|&j| x[j] >= wlo && x[j] <= whi).collect();
        if eligible.len() >= spec.n_outliers {
            break;
        }
    }
    let mut y = Vec::with_capacity(n);
    for gi in 0..spec.groups {
        let u = rng.normal(0.0, spec.gamma_sd);
        for r in 0..spec.per_group {
            let j = gi * spec.per_group + r;
            y.push(spec.beta[0] + spec.beta[1] * x[j] + u + rng.normal(0.0, spec.sigma));
        }
    }
    let mut outliers: Vec<usize> = rng
        .choose_distinct(eligible.len(), spec.n_outliers)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    outliers.sort_unstable();
    for &j in &outliers {
        y[j] -= spec.offset_base + rng.normal(0.0, spec.offset_sd).abs();
    }
    let groups = (0..spec.groups)
        .map(|gi| {
            let rows = gi * spec.per_group..(gi + 1) * spec.per_group;
            Group {
                id: format!("g{gi:03}"),
                y: DVector::from_iterator(spec.per_group, rows.clone().map(|j| y[j])),
                z: DMatrix::from_element(spec.per_group, 1, 1.0),
                covariates: DMatrix::from_iterator(spec.per_group, 1, rows.map(|j| x[j])),
                se: match mode {
                    Mode::Meta => Some(DVector::from_element(spec.per_group, spec.meta_se)),
                    Mode::Longitudinal => None,
                },
            }
        })
        .collect();
    Ok((MEDataset::new(groups, vec!["x".into()])?, outliers))
}

/// Linear model `beta0 + beta1 x` with a random intercept.
pub fn model_for(data: &MEDataset, mode: Mode, inlier_fraction: f64) -> Result<ModelSpec> {
    let obs = ObservationModel::linear_from_columns(data, &["intercept".into(), "x".into()])?;
    let error = match mode {
        Mode::Meta => ErrorSpec::Known,
        Mode::Longitudinal => ErrorSpec::SharedSigma,
    };
    Ok(ModelSpec::new(obs, error).with_budget(TrimBudget::InlierFraction(inlier_fraction)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub replication: usize,
    pub abs_err_beta0: f64,
    pub abs_err_beta1: f64,
    /// Error of the fitted random-effect standard deviation.
    pub abs_err_sqrt_gamma: f64,
    pub abs_err_sigma: Option<f64>,
    pub tpf: f64,
    pub fpf: f64,
    /// Detection rates when the largest `n - h` absolute residuals are flagged.
    pub tpf_residual: f64,
    pub fpf_residual: f64,
    pub wall_seconds: f64,
}

fn rates(flagged: &BTreeSet<usize>, truth: &BTreeSet<usize>, n: usize) -> (f64, f64) {
    let tp = flagged.intersection(truth).count();
    let fp = flagged.len() - tp;
    let tpf = if truth.is_empty() {
        0.0
    } else {
        tp as f64 / truth.len() as f64
    };
    let inliers = n - truth.len();
    let fpf = if inliers == 0 { 0.0 } else { fp as f64 / inliers as f64 };
    (tpf, fpf)
}

/// Detection and parameter-recovery metrics of one fit.
pub fn compute_metrics(
    fit: &FitResult,
    data: &MEDataset,
    spec: &ModelSpec,
    truth: &SimSpec,
    true_outliers: &[usize],
) -> Result<MetricsRow> {
    let n = data.n_total;
    let truth_set: BTreeSet<usize> = true_outliers.iter().copied().collect();
    let flagged: BTreeSet<usize> = fit.outliers.iter().copied().collect();
    let (tpf, fpf) = rates(&flagged, &truth_set, n);

    let res: Vec<f64> = residuals(&fit.theta, data, spec)?
        .iter()
        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| res[b].abs().total_cmp(&res[a].abs()).then(a.cmp(&b)));
    let drop = n - spec.h(data);
    let by_residual: BTreeSet<usize> = order[..drop].iter().copied().collect();
    let (tpf_residual, fpf_residual) = rates(&by_residual, &truth_set, n);

    let t = &fit.theta;
    Ok(MetricsRow {
        replication: 0,
        abs_err_beta0: (t.beta[0] - truth.beta[0]).abs(),
        abs_err_beta1: (t.beta[1] - truth.beta[1]).abs(),
        abs_err_sqrt_gamma: (t.gamma[0].max(0.0).sqrt() - truth.gamma_sd).abs(),
        abs_err_sigma: (t.sigma.len() == 1).then(|| (t.sigma[0] - truth.sigma).abs()),
        tpf,
        fpf,
        tpf_residual,
        fpf_residual,
        wall_seconds: 0.0,
    })
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub mode: Mode,
    pub rows: Vec<MetricsRow>,
    /// Replications whose fit failed, with the error message.
    pub failures: Vec<(usize, String)>,
    /// Means over `rows`.
    pub summary: MetricsRow,
}

fn mean_row(rows: &[MetricsRow]) -> MetricsRow {
    let k = rows.len().max(1) as f64;
    let avg = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    let sigma = rows
        .iter()
        .map(|r| r.abs_err_sigma)
        .collect::<Option<Vec<f64>>>()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    MetricsRow {
        replication: rows.len(),
        abs_err_beta0: avg(&|r| r.abs_err_beta0),
        abs_err_beta1: avg(&|r| r.abs_err_beta1),
        abs_err_sqrt_gamma: avg(&|r| r.abs_err_sqrt_gamma),
        abs_err_sigma: sigma,
        tpf: avg(&|r| r.tpf),
        fpf: avg(&|r| r.fpf),
        tpf_residual: avg(&|r| r.tpf_residual),
        fpf_residual: avg(&|r| r.fpf_residual),
        wall_seconds: avg(&|r| r.wall_seconds),
    }
}

fn run_one(spec: &SimSpec, mode: Mode, rep: usize) -> Result<MetricsRow> {
    let (data, truth) = simulate_dataset(spec, mode, rep)?;
    let model = model_for(&data, mode, spec.inlier_fraction)?;
    let start = Instant::now();
    let fit = fit_trimmed(&data, &model)?;
    let wall = start.elapsed().as_secs_f64();
    let mut row = compute_metrics(&fit, &data, &model, spec, &truth)?;
    row.replication = rep;
    row.wall_seconds = wall;
    Ok(row)
}

/// Simulates and fits every replication of `spec`.
pub fn run_benchmark(mode: Mode, spec: &SimSpec, exec: Execution) -> BenchmarkResult {
    let results = map_indexed(spec.replications, exec, |rep| run_one(spec, mode, rep));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    let summary = mean_row(&rows);
    BenchmarkResult {
        mode,
        rows,
        failures,
        summary,
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "replication",
    "abs_err_beta0",
    "abs_err_beta1",
    "abs_err_sqrt_gamma",
    "abs_err_sigma",
    "tpf",
    "fpf",
    "tpf_residual",
    "fpf_residual",
    "wall_seconds",
    "status",
];

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `benchmark_<mode>.csv` into `dir`. Wall-clock times are omitted when
/// `with_timing` is false so that reruns are byte-identical.
pub fn write_benchmark_csv(result: &BenchmarkResult, dir: &Path, with_timing: bool) -> Result<PathBuf> {
    let path = dir.join(format!("benchmark_{}.csv", result.mode.name()));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    let line = |id: String, r: &MetricsRow, status: &str| {
        [
            id,
            fmt17(r.abs_err_beta0),
            fmt17(r.abs_err_beta1),
            fmt17(r.abs_err_sqrt_gamma),
            r.abs_err_sigma.map(fmt17).unwrap_or_default(),
            fmt17(r.tpf),
            fmt17(r.fpf),
            fmt17(r.tpf_residual),
            fmt17(r.fpf_residual),
            if with_timing {
                fmt17(r.wall_seconds)
            } else {
                String::new()
            },
            status.to_string(),
        ]
        .join(",")
    };
    for r in &result.rows {
        writeln!(out, "{}", line(r.replication.to_string(), r, "ok"))?;
    }
    for (rep, msg) in &result.failures {
        writeln!(out, "{rep},,,,,,,,,,\"failed: {}\"", msg.replace('"', "'"))?;
    }
    writeln!(out, "{}", line("summary".into(), &result.summary, "mean"))?;
    out.flush()?;
    Ok(path)
}
