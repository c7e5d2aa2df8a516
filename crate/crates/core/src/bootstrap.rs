//! Parametric bootstrap of the whole fitting procedure, trimming included.

use nalgebra::{DMatrix, DVector};

use crate::data_model::{MEDataset, ModelSpec};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Execution};
use crate::rng::RngStream;
use crate::trimming::{fit_trimmed, FitResult};

/// Probabilities reported for every parameter.
pub const QUANTILE_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

/// Linear interpolation between order statistics of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

/// Per-column quantiles of `samples` (one row per draw), `probs.len()` rows out.
pub fn column_quantiles(samples: &DMatrix<f64>, probs: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(probs.len(), samples.ncols(), f64::NAN);
    for c in 0..samples.ncols() {
        let mut col: Vec<f64> = samples.column(c).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        for (k, &p) in probs.iter().enumerate() {
            out[(k, c)] = quantile_sorted(&col, p);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub replications: usize,
    pub seed: u64,
    /// Draw random effects; when false only measurement noise is resampled.
    pub random_effects: bool,
    pub execution: Execution,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replications: 1000,
            seed: 0,
            random_effects: true,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    /// One row per converged replication, flattened parameters as columns.
    pub samples: DMatrix<f64>,
    /// Replication index of each row of `samples`.
    pub replication_ids: Vec<usize>,
    /// Rows follow [`QUANTILE_PROBS`].
    pub quantiles: DMatrix<f64>,
    pub failures: usize,
    pub warning: Option<String>,
}

/// Simulated responses `f(beta) + Z u + eps` for one replication.
pub fn simulate_responses(
    fit: &FitResult,
    data: &MEDataset,
    spec: &ModelSpec,
    rng: &mut RngStream,
    random_effects: bool,
) -> Result<MEDataset> {
    let theta = &fit.theta;
    let mut groups = data.groups.clone();
    for (gi, g) in groups.iter_mut().enumerate() {
        let mean = spec.obs.f_eval(&theta.beta, gi)?;
        let u = DVector::from_fn(theta.gamma.len(), |l, _| {
            let sd = theta.gamma[l].max(0.0).sqrt();
            if random_effects {
                rng.normal(0.0, sd)
            } else {
                0.0
            }
        });
        let lambda = theta.variances(spec.error, g, gi);
        let eps = lambda.map(|v| rng.normal(0.0, v.max(0.0).sqrt()));
        g.y = mean + &g.z * u + eps;
    }
    MEDataset::new(groups, data.covariate_names.clone())
}

/// Refits the model on `replications` simulated datasets drawn around `fit`.
pub fn parametric_bootstrap(
    fit: &FitResult,
    data: &MEDataset,
    spec: &ModelSpec,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if !fit.converged {
        return Err(Error::Validation("bootstrap requires a converged fit".into()));
    }
    let mut refit_spec = spec.clone();
    refit_spec.theta_init = Some(fit.theta.clone());
    refit_spec.trim.w_init = None;
    let root = RngStream::new(opts.seed);
    let draws: Vec<Option<DVector<f64>>> = map_indexed(opts.replications, opts.execution, |r| {
        let mut rng = root.substream(r as u64);
        let sim = simulate_responses(fit, data, spec, &mut rng, opts.random_effects).ok()?;
        match fit_trimmed(&sim, &refit_spec) {
            Ok(f) if f.converged => Some(f.theta.flatten()),
            _ => None,
        }
    });
    let k = fit.theta.flatten().len();
    let replication_ids: Vec<usize> = (0..draws.len()).filter(|&r| draws[r].is_some()).collect();
    let mut samples = DMatrix::zeros(replication_ids.len(), k);
    for (row, &r) in replication_ids.iter().enumerate() {
        samples.set_row(row, &draws[r].as_ref().unwrap().transpose());
    }
    let failures = opts.replications - replication_ids.len();
    let warning = (failures as f64 > 0.2 * opts.replications as f64).then(|| {
        format!(
            "{failures} of {} bootstrap replications failed to converge",
            opts.replications
        )
    });
    Ok(BootstrapResult {
        quantiles: column_quantiles(&samples, &QUANTILE_PROBS),
        samples,
        replication_ids,
        failures,
        warning,
    })
}
