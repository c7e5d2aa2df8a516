mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use trimfit::bootstrap::{parametric_bootstrap, quantile_sorted, BootstrapOptions, BootstrapResult, QUANTILE_PROBS};
use trimfit::likelihood::check_wellposedness;
use trimfit::simharness::{run_benchmark, write_benchmark_csv, Mode, SimSpec};
use trimfit::{fit_trimmed, par, Error, Execution, FitResult, Theta};

use config::{Prepared, RunConfig};
use output::{fmt17, write_csv, write_json};

const WELLPOSEDNESS_TOL: f64 = 1e-6;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain { .. } | Error::InvalidVariance { .. } | Error::Numeric { .. } => 4,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 4,
            msg: format!("cannot write output: {e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "trimfit",
    version,
    about = "Trimmed mixed-effects fits, synthetic benchmarks and parametric bootstrap"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured model and write fit.json (and curve.csv for spline models).
    Fit(RunArgs),
    /// Fit, then refit on simulated data; writes bootstrap.csv and quantiles.json.
    Bootstrap {
        #[command(flatten)]
        run: RunArgs,
        /// Number of bootstrap replications.
        #[arg(short = 'n', long = "replications", default_value_t = 1000)]
        replications: usize,
    },
    /// Check the config and dataset without fitting.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the synthetic benchmark (`meta` or `longitudinal`).
    Benchmark(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core; overrides the config.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    replications: usize,
    #[arg(long, default_value_t = 0.8)]
    inlier_fraction: f64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Record wall-clock seconds per fit (makes the CSV run-dependent).
    #[arg(long)]
    timing: bool,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    seed: u64,
}

fn setup(args: &RunArgs) -> Result<Run, CliError> {
    let cfg = RunConfig::read(&args.config)?;
    par::set_threads(args.threads.unwrap_or(cfg.threads));
    let dir = args.config.parent().unwrap_or(Path::new(""));
    let out = match (&args.out, &cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => dir.join(o),
        (None, None) => dir.join("trimfit-out"),
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    Ok(Run { cfg, out, seed })
}

#[derive(Serialize)]
struct Param<'a> {
    name: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct Outlier<'a> {
    index: usize,
    group: &'a str,
    row: usize,
    weight: f64,
}

#[derive(Serialize)]
struct WellPosedness<'a> {
    alpha_tol: f64,
    flagged_groups: Vec<&'a str>,
    margins: Vec<f64>,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    inner_status: String,
    kkt_residual: f64,
    inner_iterations: usize,
    outer_iterations: usize,
    concentration_steps: usize,
    swaps: usize,
    boundary_cases: Vec<usize>,
    wellposedness: WellPosedness<'a>,
}

#[derive(Serialize)]
struct FitJson<'a> {
    converged: bool,
    objective: f64,
    n: usize,
    h: usize,
    parameters: Vec<Param<'a>>,
    weights: Vec<f64>,
    outliers: Vec<Outlier<'a>>,
    diagnostics: Diagnostics<'a>,
}

fn write_fit(p: &Prepared, fit: &FitResult, out: &Path) -> Result<(), CliError> {
    let data = &p.data;
    let report = check_wellposedness(&fit.theta, data, &p.spec, WELLPOSEDNESS_TOL)?;
    let flat = fit.theta.flatten();
    let doc = FitJson {
        converged: fit.converged,
        objective: fit.objective,
        n: data.n_total,
        h: p.spec.h(data),
        parameters: p
            .names
            .iter()
            .zip(flat.iter())
            .map(|(name, &value)| Param { name, value })
            .collect(),
        weights: fit.w.w.iter().copied().collect(),
        outliers: fit
            .outliers
            .iter()
            .zip(&fit.outlier_locations)
            .map(|(&index, &(gi, row))| Outlier {
                index,
                group: &data.groups[gi].id,
                row,
                weight: fit.w.w[index],
            })
            .collect(),
        diagnostics: Diagnostics {
            inner_status: format!("{:?}", fit.inner_report.status),
            kkt_residual: fit.inner_report.kkt_residual,
            inner_iterations: fit.inner_report.iterations,
            outer_iterations: fit.outer_iterations,
            concentration_steps: fit.concentration_steps,
            swaps: fit.swaps,
            boundary_cases: fit.boundary_cases.clone(),
            wellposedness: WellPosedness {
                alpha_tol: report.alpha_tol,
                flagged_groups: report
                    .flagged()
                    .into_iter()
                    .map(|g| data.groups[g].id.as_str())
                    .collect(),
                margins: report.groups.iter().map(|g| g.margin).collect(),
            },
        },
    };
    write_json(&out.join("fit.json"), &doc)?;
    Ok(())
}

fn curve_values(p: &Prepared, beta: &DVector<f64>) -> Result<Vec<f64>, CliError> {
    let c = p.curve.as_ref().expect("curve model");
    Ok(c.grid
        .iter()
        .map(|&t| c.basis.curve(beta, t))
        .collect::<trimfit::Result<Vec<_>>>()?)
}

/// 2.5% and 97.5% quantiles of the curve at each grid point over the bootstrap
/// samples.
fn curve_band(p: &Prepared, res: &BootstrapResult) -> Result<Vec<(f64, f64)>, CliError> {
    let k = p.spec.obs.k_beta();
    let curves = (0..res.samples.nrows())
        .map(|r| curve_values(p, &res.samples.row(r).columns(0, k).transpose()))
        .collect::<Result<Vec<_>, _>>()?;
    let grid = p.curve.as_ref().unwrap().grid.len();
    Ok((0..grid)
        .map(|i| {
            let mut v: Vec<f64> = curves.iter().map(|c| c[i]).collect();
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (
                    quantile_sorted(&v, QUANTILE_PROBS[0]),
                    quantile_sorted(&v, QUANTILE_PROBS[2]),
                )
            }
        })
        .collect())
}

/// Lower and upper curve value at each grid point.
type Band = [(f64, f64)];

fn write_curve(p: &Prepared, theta: &Theta, bands: Option<(&Band, &Band)>, out: &Path) -> Result<(), CliError> {
    let grid = &p.curve.as_ref().unwrap().grid;
    let fitted = curve_values(p, &theta.beta)?;
    let mut header: Vec<String> = vec!["exposure".into(), "curve".into()];
    if bands.is_some() {
        header.extend(["fixed_lo", "fixed_hi", "full_lo", "full_hi"].map(String::from));
    }
    let rows = (0..grid.len()).map(|i| {
        let mut row = vec![fmt17(grid[i]), fmt17(fitted[i])];
        if let Some((fixed, full)) = bands {
            row.extend([fixed[i].0, fixed[i].1, full[i].0, full[i].1].map(fmt17));
        }
        row
    });
    write_csv(&out.join("curve.csv"), &header, rows)?;
    Ok(())
}

fn fit(p: &Prepared) -> Result<FitResult, CliError> {
    Ok(fit_trimmed(&p.data, &p.spec)?)
}

fn not_converged() -> CliError {
    CliError {
        code: 3,
        msg: "fit did not converge; results written for inspection".into(),
    }
}

fn cmd_fit(args: &RunArgs) -> Result<(), CliError> {
    let run = setup(args)?;
    let p = config::prepare(&run.cfg)?;
    std::fs::create_dir_all(&run.out)?;
    let f = fit(&p)?;
    write_fit(&p, &f, &run.out)?;
    if p.curve.is_some() {
        write_curve(&p, &f.theta, None, &run.out)?;
    }
    println!(
        "objective {}  outliers {}  converged {}",
        fmt17(f.objective),
        f.outliers.len(),
        f.converged
    );
    if !f.converged {
        return Err(not_converged());
    }
    Ok(())
}

#[derive(Serialize)]
struct ParamQuantiles<'a> {
    name: &'a str,
    q025: f64,
    q500: f64,
    q975: f64,
}

#[derive(Serialize)]
struct QuantilesJson<'a> {
    seed: u64,
    replications: usize,
    converged: usize,
    failures: usize,
    warning: Option<&'a str>,
    probs: [f64; 3],
    parameters: Vec<ParamQuantiles<'a>>,
}

fn cmd_bootstrap(args: &RunArgs, replications: usize) -> Result<(), CliError> {
    let run = setup(args)?;
    let p = config::prepare(&run.cfg)?;
    std::fs::create_dir_all(&run.out)?;
    let f = fit(&p)?;
    write_fit(&p, &f, &run.out)?;
    if !f.converged {
        return Err(not_converged());
    }
    let opts = BootstrapOptions {
        replications,
        seed: run.seed,
        random_effects: true,
        execution: Execution::Parallel,
    };
    let res = parametric_bootstrap(&f, &p.data, &p.spec, &opts)?;
    if let Some(w) = &res.warning {
        eprintln!("warning: {w}");
    }

    let mut header = vec!["replication".to_string()];
    header.extend(p.names.iter().cloned());
    let rows = res.replication_ids.iter().enumerate().map(|(row, id)| {
        let mut cells = vec![id.to_string()];
        cells.extend(res.samples.row(row).iter().map(|&x| fmt17(x)));
        cells
    });
    write_csv(&run.out.join("bootstrap.csv"), &header, rows)?;

    let doc = QuantilesJson {
        seed: run.seed,
        replications,
        converged: res.samples.nrows(),
        failures: res.failures,
        warning: res.warning.as_deref(),
        probs: QUANTILE_PROBS,
        parameters: p
            .names
            .iter()
            .enumerate()
            .map(|(j, name)| ParamQuantiles {
                name,
                q025: res.quantiles[(0, j)],
                q500: res.quantiles[(1, j)],
                q975: res.quantiles[(2, j)],
            })
            .collect(),
    };
    write_json(&run.out.join("quantiles.json"), &doc)?;

    if p.curve.is_some() {
        let fixed = parametric_bootstrap(
            &f,
            &p.data,
            &p.spec,
            &BootstrapOptions {
                random_effects: false,
                ..opts
            },
        )?;
        let fixed_band = curve_band(&p, &fixed)?;
        let full_band = curve_band(&p, &res)?;
        write_curve(&p, &f.theta, Some((&fixed_band, &full_band)), &run.out)?;
    }
    println!("{} of {replications} replications converged", res.samples.nrows());
    Ok(())
}

fn cmd_validate(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::read(config)?;
    let p = config::prepare(&cfg)?;
    println!(
        "ok: {} groups, {} observations, {} parameters, h = {}",
        p.data.n_groups(),
        p.data.n_total,
        p.names.len(),
        p.spec.h(&p.data)
    );
    Ok(())
}

fn cmd_benchmark(args: &BenchArgs) -> Result<(), CliError> {
    let mode: Mode = args.mode.parse().map_err(|e: Error| CliError::config(e.to_string()))?;
    if !(args.inlier_fraction > 0.0 && args.inlier_fraction <= 1.0) {
        return Err(CliError::config("inlier_fraction must be in (0,1]"));
    }
    par::set_threads(args.threads.unwrap_or(0));
    let spec = SimSpec {
        seed: args.seed,
        replications: args.replications,
        inlier_fraction: args.inlier_fraction,
        ..SimSpec::default()
    };
    let res = run_benchmark(mode, &spec, Execution::Parallel);
    std::fs::create_dir_all(&args.out)?;
    let path = write_benchmark_csv(&res, &args.out, args.timing).map_err(|e| CliError {
        code: 4,
        msg: e.to_string(),
    })?;
    let s = &res.summary;
    println!(
        "{:<13} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6}",
        "mode", "fits", "failed", "|b0|", "|b1-5|", "|sd_u-6|", "|sig-4|", "TPF", "FPF"
    );
    println!(
        "{:<13} {:>5} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8} {:>6.3} {:>6.3}",
        mode.name(),
        res.rows.len(),
        res.failures.len(),
        s.abs_err_beta0,
        s.abs_err_beta1,
        s.abs_err_sqrt_gamma,
        s.abs_err_sigma.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
        s.tpf,
        s.fpf
    );
    println!("wrote {}", path.display());
    if res.rows.is_empty() && args.replications > 0 {
        return Err(CliError {
            code: 4,
            msg: format!("all {} replications failed", res.failures.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Bootstrap { run, replications } => cmd_bootstrap(run, *replications),
        Command::Validate { config } => cmd_validate(config),
        Command::Benchmark(args) => cmd_benchmark(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_defaults_to_1000_replications() {
        let cli = Cli::try_parse_from(["trimfit", "bootstrap", "--config", "c.toml"]).unwrap();
        let Command::Bootstrap { replications, .. } = cli.command else {
            panic!("expected bootstrap")
        };
        assert_eq!(replications, 1000);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Validation("x".into())).code, 2);
        let numeric = Error::Numeric {
            msg: "nan".into(),
            iterate: vec![],
        };
        assert_eq!(CliError::from(numeric).code, 4);
    }
}
