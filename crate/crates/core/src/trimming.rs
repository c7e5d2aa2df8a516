//! Outer loop of the trimmed fit: projected gradient descent on the value
//! function `v(w)` over the capped simplex.

use nalgebra::{DMatrix, DVector};

use crate::capped_simplex::project_capped_simplex;
use crate::data_model::{validate_spec, MEDataset, ModelSpec, Theta, TrimWeights};
use crate::error::{Error, Result};
use crate::inner_solver::{value_function, SolveReport, ValueFunction};
use crate::likelihood::residuals;

/// Direction used for the weight update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum WeightDirection {
    /// Per-observation predictive loss (see [`predictive_losses`]), falling
    /// back to the value-function gradient when it yields no decrease of `v`.
    #[default]
    PredictiveLoss,
    /// Per-observation marginal loss `r^2 / (2 d) + ln(d) / 2` with
    /// `d = lambda + sum_l z_l^2 gamma_l`, ignoring within-group correlation.
    MarginalLoss,
    /// Only the gradient of the value function.
    ValueGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimOptions {
    /// Stop when `max |w_new - w| <= w_tol`.
    pub w_tol: f64,
    pub max_outer: usize,
    pub alpha0: f64,
    pub armijo: f64,
    pub min_alpha: f64,
    /// Weights strictly below this are reported as outliers.
    pub threshold: f64,
    /// Starting weights; `(h/n) 1` when absent.
    pub w_init: Option<DVector<f64>>,
    pub direction: WeightDirection,
    /// Maximum number of concentration steps before the monotone phase, and
    /// of accepted swaps after it; zero disables the phase.
    pub max_concentration: usize,
    /// After the monotone phase stops, single swaps between this many of the
    /// worst kept and best trimmed observations are tried; zero disables.
    pub swap_candidates: usize,
}

impl Default for TrimOptions {
    fn default() -> Self {
        Self {
            w_tol: 1e-6,
            max_outer: 300,
            alpha0: 1.0,
            armijo: 1e-4,
            min_alpha: 1e-12,
            threshold: 0.5,
            w_init: None,
            direction: WeightDirection::default(),
            max_concentration: 50,
            swap_candidates: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Theta,
    pub w: TrimWeights,
    pub objective: f64,
    /// Flat indices of observations with weight below the threshold.
    pub outliers: Vec<usize>,
    /// `(group, row)` for each entry of `outliers`.
    pub outlier_locations: Vec<(usize, usize)>,
    /// Flat indices with weight in `(0.01, 0.99)`.
    pub boundary_cases: Vec<usize>,
    pub inner_report: SolveReport,
    pub outer_iterations: usize,
    /// Concentration steps taken before the monotone phase.
    pub concentration_steps: usize,
    /// Vertex swaps accepted after the monotone phase.
    pub swaps: usize,
    pub converged: bool,
    /// Value function at every accepted monotone-phase iterate, starting point
    /// first.
    pub v_trace: Vec<f64>,
}

/// Indices with `w_j < threshold`, ascending.
pub fn classify_outliers(w: &TrimWeights, threshold: f64) -> Vec<usize> {
    (0..w.w.len()).filter(|&j| w.w[j] < threshold).collect()
}

fn boundary_cases(w: &DVector<f64>) -> Vec<usize> {
    (0..w.len()).filter(|&j| w[j] > 0.01 && w[j] < 0.99).collect()
}

fn checked(vf: ValueFunction, w: &DVector<f64>) -> Result<ValueFunction> {
    if !vf.v.is_finite() || vf.grad_v.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            msg: "non-finite value function".into(),
            iterate: w.iter().copied().collect(),
        });
    }
    Ok(vf)
}

/// Per-observation marginal loss ignoring within-group correlation.
pub fn marginal_losses(theta: &Theta, data: &MEDataset, spec: &ModelSpec) -> Result<DVector<f64>> {
    let res = residuals(theta, data, spec)?;
    let mut out = DVector::zeros(data.n_total);
    let mut off = 0;
    for (gi, (g, r)) in data.groups.iter().zip(&res).enumerate() {
        let lambda = theta.variances(spec.error, g, gi);
        for j in 0..g.len() {
            let d = lambda[j]
                + (0..theta.gamma.len())
                    .map(|l| g.z[(j, l)].powi(2) * theta.gamma[l])
                    .sum::<f64>();
            out[off + j] = 0.5 * r[j] * r[j] / d + 0.5 * d.ln();
        }
        off += g.len();
    }
    Ok(out)
}

fn surrogate(theta: &Theta, w: &DVector<f64>, data: &MEDataset, spec: &ModelSpec) -> Result<Option<DVector<f64>>> {
    match spec.trim.direction {
        WeightDirection::PredictiveLoss => predictive_losses(theta, w, data, spec).map(Some),
        WeightDirection::MarginalLoss => marginal_losses(theta, data, spec).map(Some),
        WeightDirection::ValueGradient => Ok(None),
    }
}

/// Predictive loss `e^2 / (2 s) + ln(s) / 2` of every observation given the
/// kept observations (`w >= 0.5`) of its group under `theta`, where `e` and `s`
/// are the prediction error and variance. Kept observations are scored
/// leave-one-out, so the loss equals the decrease of the untrimmed objective
/// on the kept set when that observation is removed.
pub fn predictive_losses(theta: &Theta, w: &DVector<f64>, data: &MEDataset, spec: &ModelSpec) -> Result<DVector<f64>> {
    let res = residuals(theta, data, spec)?;
    let k = theta.gamma.len();
    let gsqrt = theta.gamma.map(|g| g.max(0.0).sqrt());
    let mut out = DVector::zeros(data.n_total);
    let mut off = 0;
    for (gi, (g, r)) in data.groups.iter().zip(&res).enumerate() {
        let lambda = theta.variances(spec.error, g, gi);
        let kept: Vec<bool> = (0..g.len()).map(|j| w[off + j] >= 0.5).collect();
        let mut a = DMatrix::zeros(k, k);
        let mut u = DVector::zeros(k);
        for j in (0..g.len()).filter(|&j| kept[j]) {
            let zj = g.z.row(j).transpose();
            a += &zj * zj.transpose() / lambda[j];
            u += &zj * (r[j] / lambda[j]);
        }
        let gm = DMatrix::from_diagonal(&gsqrt);
        let m = DMatrix::identity(k, k) + &gm * &a * &gm;
        let minv = m.try_inverse().ok_or_else(|| Error::Numeric {
            msg: "singular random-effect system".into(),
            iterate: theta.flatten().iter().copied().collect(),
        })?;
        let c = &gm * &minv * &gm;
        let cu = &c * &u;
        let b = &a - &a * &c * &a;
        let pr = &u - &a * &cu;
        for j in 0..g.len() {
            let zj = g.z.row(j).transpose();
            let (e, s) = if kept[j] {
                let pjj = 1.0 / lambda[j] - zj.dot(&(&c * &zj)) / (lambda[j] * lambda[j]);
                let prj = r[j] / lambda[j] - zj.dot(&cu) / lambda[j];
                (prj / pjj, 1.0 / pjj)
            } else {
                let gz = zj.component_mul(&theta.gamma);
                (r[j] - gz.dot(&pr), lambda[j] + zj.dot(&gz) - gz.dot(&(&b * &gz)))
            };
            out[off + j] = 0.5 * e * e / s + 0.5 * s.ln();
        }
        off += g.len();
    }
    Ok(out)
}

/// Backtracking along the projected arc `proj(w - alpha g)`. With the exact
/// gradient the Armijo condition is used; otherwise a decrease proportional
/// to the squared step is required, and the first trial is long enough to
/// reach a vertex.
#[allow(clippy::too_many_arguments)]
fn weight_step(
    w: &DVector<f64>,
    g: &DVector<f64>,
    exact: bool,
    first_alpha: Option<f64>,
    vf: &ValueFunction,
    data: &MEDataset,
    spec: &ModelSpec,
    h: f64,
) -> Result<Option<(DVector<f64>, ValueFunction)>> {
    let opts = &spec.trim;
    let mut alpha = first_alpha.unwrap_or(opts.alpha0);
    if !exact {
        let spread = g.max() - g.min();
        if spread > 0.0 {
            alpha = alpha.max(2.0 / spread);
        }
    }
    while alpha >= opts.min_alpha {
        let trial = project_capped_simplex(&(w - alpha * g), h)?;
        let step = &trial - w;
        if step.amax() <= opts.w_tol * 1e-3 {
            return Ok(None);
        }
        let bound = if exact {
            vf.v + opts.armijo * vf.grad_v.dot(&step)
        } else {
            vf.v - opts.armijo * step.norm_squared()
        };
        let tw = TrimWeights { w: trial.clone(), h };
        match value_function(&tw, data, spec, Some(&vf.theta)) {
            Ok(next) if next.v.is_finite() && next.v <= bound => return Ok(Some((trial, next))),
            Ok(_) => {}
            Err(Error::Domain { .. } | Error::InvalidVariance { .. } | Error::Numeric { .. }) => {}
            Err(e) => return Err(e),
        }
        alpha *= 0.5;
    }
    Ok(None)
}

/// Repeatedly moves to the vertex keeping the `h` smallest predictive losses
/// under the current fit, until a kept set is revisited. Steps are accepted
/// without a decrease test; the iterate with the lowest `v` is returned.
fn concentrate(
    w: DVector<f64>,
    vf: ValueFunction,
    data: &MEDataset,
    spec: &ModelSpec,
    h: f64,
) -> Result<(DVector<f64>, ValueFunction, usize)> {
    let opts = &spec.trim;
    let mut best = (w.clone(), vf.clone());
    let (mut w, mut vf) = (w, vf);
    let mut steps = 0;
    let mut visited = vec![w.clone()];
    while steps < opts.max_concentration {
        let Some(g) = surrogate(&vf.theta, &w, data, spec)? else {
            break;
        };
        let spread = g.max() - g.min();
        if !(spread > 0.0) {
            break;
        }
        let trial = if h.fract() == 0.0 {
            top_h(&(-&g), h as usize)
        } else {
            project_capped_simplex(&(&w - (2.0 / spread).max(opts.alpha0) * &g), h)?
        };
        if visited.iter().any(|v| (&trial - v).amax() <= opts.w_tol) {
            break;
        }
        visited.push(trial.clone());
        let next = match value_function(&TrimWeights { w: trial.clone(), h }, data, spec, Some(&vf.theta)) {
            Ok(next) if next.v.is_finite() => next,
            Ok(_) | Err(Error::Domain { .. } | Error::InvalidVariance { .. } | Error::Numeric { .. }) => break,
            Err(e) => return Err(e),
        };
        steps += 1;
        w = trial;
        vf = next;
        if vf.v < best.1.v {
            best = (w.clone(), vf.clone());
        }
    }
    Ok((best.0, best.1, steps))
}

/// Monotone projected descent; returns whether it stopped at a stationary
/// point rather than at the iteration cap.
fn descend(
    w: &mut DVector<f64>,
    vf: &mut ValueFunction,
    v_trace: &mut Vec<f64>,
    outer: &mut usize,
    data: &MEDataset,
    spec: &ModelSpec,
    h: f64,
) -> Result<bool> {
    let opts = &spec.trim;
    // Barzilai-Borwein first trial for the exact gradient
    let mut bb: Option<f64> = None;
    while *outer < opts.max_outer {
        *outer += 1;
        let mut directions = Vec::with_capacity(2);
        if let Some(g) = surrogate(&vf.theta, w, data, spec)? {
            directions.push((g, false));
        }
        directions.push((vf.grad_v.clone(), true));
        let mut accepted = None;
        for (g, exact) in &directions {
            let first = if *exact { bb } else { None };
            accepted = weight_step(w, g, *exact, first, vf, data, spec, h)?;
            if accepted.is_some() {
                break;
            }
        }
        let Some((trial, next)) = accepted else {
            // no direction decreases v: stationary to working precision
            return Ok(true);
        };
        let s = &trial - &*w;
        let y = &next.grad_v - &vf.grad_v;
        let sy = s.dot(&y);
        bb = (sy > 0.0).then(|| (s.norm_squared() / sy).clamp(opts.min_alpha, 1e8));
        let change = s.amax();
        *w = trial;
        *vf = checked(next, w)?;
        v_trace.push(vf.v);
        if change <= opts.w_tol {
            return Ok(true);
        }
    }
    Ok(false)
}

/// The `h` largest weights set to one, ties broken by index.
fn top_h(w: &DVector<f64>, h: usize) -> DVector<f64> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut out = DVector::zeros(w.len());
    for &j in &order[..h] {
        out[j] = 1.0;
    }
    out
}

/// First vertex with a lower `v` among the rounding of `w` and its single
/// swaps between the worst kept and the best trimmed observations by
/// predictive loss.
fn swap(
    w: &DVector<f64>,
    vf: &ValueFunction,
    data: &MEDataset,
    spec: &ModelSpec,
    h: f64,
) -> Result<Option<(DVector<f64>, ValueFunction)>> {
    let k = spec.trim.swap_candidates;
    if k == 0 || h.fract() != 0.0 || spec.trim.direction == WeightDirection::ValueGradient {
        return Ok(None);
    }
    let base = top_h(w, h as usize);
    let mut candidates = Vec::new();
    if (&base - w).amax() > spec.trim.w_tol {
        candidates.push(base.clone());
    }
    let loss = predictive_losses(&vf.theta, &base, data, spec)?;
    let mut kept: Vec<usize> = (0..w.len()).filter(|&j| base[j] == 1.0).collect();
    let mut trimmed: Vec<usize> = (0..w.len()).filter(|&j| base[j] == 0.0).collect();
    kept.sort_by(|&a, &b| loss[b].total_cmp(&loss[a]));
    trimmed.sort_by(|&a, &b| loss[a].total_cmp(&loss[b]));
    let mut pairs: Vec<(usize, usize)> = kept
        .iter()
        .take(k)
        .flat_map(|&i| trimmed.iter().take(k).map(move |&j| (i, j)))
        .collect();
    pairs.sort_by(|a, b| (loss[b.0] - loss[b.1]).total_cmp(&(loss[a.0] - loss[a.1])));
    for (i, j) in pairs {
        let mut c = base.clone();
        c[i] = 0.0;
        c[j] = 1.0;
        candidates.push(c);
    }
    let tol = 1e-10 * (1.0 + vf.v.abs());
    for c in candidates {
        match value_function(&TrimWeights { w: c.clone(), h }, data, spec, Some(&vf.theta)) {
            Ok(next) if next.v.is_finite() && next.v < vf.v - tol => return Ok(Some((c, next))),
            Ok(_) | Err(Error::Domain { .. } | Error::InvalidVariance { .. } | Error::Numeric { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Fits the model while selecting which `h` observations to keep.
pub fn fit_trimmed(data: &MEDataset, spec: &ModelSpec) -> Result<FitResult> {
    let problems = validate_spec(data, spec);
    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    let n = data.n_total;
    let h = spec.h(data) as f64;
    let opts = &spec.trim;
    let w0 = match &opts.w_init {
        Some(w) => TrimWeights::new(w.clone(), h)?,
        None if h == n as f64 => TrimWeights::ones(n),
        None => TrimWeights::uniform(n, h),
    };
    let mut w = w0.w;
    let mut vf = checked(
        value_function(&TrimWeights { w: w.clone(), h }, data, spec, spec.theta_init.as_ref())?,
        &w,
    )?;
    let mut concentration_steps = 0;
    if h < n as f64 && opts.direction != WeightDirection::ValueGradient {
        (w, vf, concentration_steps) = concentrate(w, vf, data, spec, h)?;
    }
    let mut v_trace = vec![vf.v];
    let mut converged = h == n as f64;
    let mut outer = 0;
    let mut swaps = 0;
    while !converged {
        converged = descend(&mut w, &mut vf, &mut v_trace, &mut outer, data, spec, h)?;
        if !converged || swaps >= opts.max_concentration {
            break;
        }
        match swap(&w, &vf, data, spec, h)? {
            Some((trial, next)) => {
                swaps += 1;
                w = trial;
                vf = checked(next, &w)?;
                v_trace.push(vf.v);
                converged = false;
            }
            None => break,
        }
    }

    let weights = TrimWeights { w, h };
    let outliers = classify_outliers(&weights, opts.threshold);
    let outlier_locations = outliers.iter().filter_map(|&j| data.locate(j)).collect();
    Ok(FitResult {
        boundary_cases: boundary_cases(&weights.w),
        theta: vf.theta,
        objective: vf.v,
        outliers,
        outlier_locations,
        w: weights,
        converged: converged && !vf.approximate,
        inner_report: vf.report,
        outer_iterations: outer,
        concentration_steps,
        swaps,
        v_trace,
    })
}
