#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use trimfit::inner_solver::value_function;
use trimfit::obs_models::exposure_difference_loading;
use trimfit::rng::RngStream;
use trimfit::splines::SplineBasis;
use trimfit::{ErrorSpec, Group, MEDataset, ModelSpec, ObservationModel, Theta, TrimBudget, TrimWeights};

pub struct Instance {
    pub data: MEDataset,
    pub spec: ModelSpec,
    pub theta: Theta,
}

/// Random linear mixed model with an intercept column in both X and Z.
pub fn random_linear(seed: u64, sizes: &[usize], k_beta: usize, k_gamma: usize, error: ErrorSpec) -> Instance {
    let mut rng = RngStream::new(seed);
    let mut groups = Vec::new();
    let mut designs = Vec::new();
    for (gi, &n) in sizes.iter().enumerate() {
        let x = DMatrix::from_fn(n, k_beta, |_, c| if c == 0 { 1.0 } else { rng.normal(0.0, 1.0) });
        let z = DMatrix::from_fn(n, k_gamma, |_, c| if c == 0 { 1.0 } else { rng.normal(0.0, 1.0) });
        let y = DVector::from_fn(n, |_, _| rng.normal(0.0, 2.0));
        let se = DVector::from_fn(n, |_, _| rng.uniform(0.5, 2.0));
        groups.push(Group {
            id: format!("g{gi}"),
            y,
            z,
            covariates: x.columns(1, k_beta - 1).into_owned(),
            se: Some(se),
        });
        designs.push(x);
    }
    let names = (1..k_beta).map(|c| format!("x{c}")).collect();
    let data = MEDataset::new(groups, names).unwrap();
    let spec = ModelSpec::new(ObservationModel::Linear { designs }, error);
    let layout = spec.layout(&data);
    let theta = Theta {
        beta: DVector::from_fn(layout.k_beta, |_, _| rng.normal(0.0, 1.0)),
        gamma: DVector::from_fn(layout.k_gamma, |_, _| rng.uniform(0.1, 2.0)),
        sigma: DVector::from_fn(layout.k_sigma, |_, _| rng.uniform(0.5, 2.0)),
    };
    Instance { data, spec, theta }
}

/// Trimmed objective built from the explicit group covariance and a dense
/// Cholesky factorization.
pub fn dense_trimmed(theta: &Theta, w: &DVector<f64>, data: &MEDataset, spec: &ModelSpec) -> f64 {
    let mut total = 0.0;
    let mut off = 0;
    for (gi, g) in data.groups.iter().enumerate() {
        let n = g.len();
        let r = &g.y - spec.obs.f_eval(&theta.beta, gi).unwrap();
        let lambda = theta.variances(spec.error, g, gi);
        let sw = DVector::from_fn(n, |j, _| w[off + j].sqrt());
        let zt = DMatrix::from_fn(n, g.z.ncols(), |j, l| sw[j] * g.z[(j, l)]);
        let mut v = &zt * DMatrix::from_diagonal(&theta.gamma) * zt.transpose();
        for j in 0..n {
            v[(j, j)] += lambda[j].powf(w[off + j]);
        }
        let rt = r.component_mul(&sw);
        let chol = v.cholesky().expect("dense covariance is positive definite");
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        total += 0.5 * rt.dot(&chol.solve(&rt)) + 0.5 * ln_det;
        off += n;
    }
    for p in &spec.priors {
        total += p.penalty(&theta.beta).0;
    }
    total
}

/// Central differences with step `h * max(1, |x_i|)`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let step = h * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        (f(&xp) - f(&xm)) / (2.0 * step)
    })
}

/// `max_i |a_i - b_i| / max(1, |b_i|)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Intercept-only random-intercept data `y = beta0 + u_i + eps` with known
/// standard errors, fitted without trimming.
pub fn intercept_groups(
    rng: &mut RngStream,
    m: usize,
    per_group: usize,
    beta0: f64,
    gamma: f64,
    se: f64,
) -> (MEDataset, ModelSpec) {
    let mut groups = Vec::with_capacity(m);
    for gi in 0..m {
        let u = rng.normal(0.0, gamma.sqrt());
        groups.push(Group {
            id: format!("g{gi:03}"),
            y: DVector::from_fn(per_group, |_, _| beta0 + u + rng.normal(0.0, se)),
            z: DMatrix::from_element(per_group, 1, 1.0),
            covariates: DMatrix::zeros(per_group, 0),
            se: Some(DVector::from_element(per_group, se)),
        });
    }
    let data = MEDataset::new(groups, vec![]).unwrap();
    let designs = data
        .groups
        .iter()
        .map(|g| DMatrix::from_element(g.len(), 1, 1.0))
        .collect();
    let spec = ModelSpec::new(ObservationModel::Linear { designs }, ErrorSpec::Known);
    (data, spec)
}

/// Copy of the dataset and linear model without one row.
pub fn delete_row(data: &MEDataset, spec: &ModelSpec, gi: usize, row: usize) -> (MEDataset, ModelSpec) {
    let mut groups = data.groups.clone();
    let g = &mut groups[gi];
    let keep: Vec<usize> = (0..g.len()).filter(|&j| j != row).collect();
    g.y = DVector::from_fn(keep.len(), |j, _| g.y[keep[j]]);
    g.z = g.z.select_rows(&keep);
    g.covariates = g.covariates.select_rows(&keep);
    g.se = g.se.as_ref().map(|s| DVector::from_fn(keep.len(), |j, _| s[keep[j]]));
    let ObservationModel::Linear { designs } = &spec.obs else {
        unreachable!()
    };
    let mut designs = designs.clone();
    designs[gi] = designs[gi].select_rows(&keep);
    let mut out = spec.clone();
    out.obs = ObservationModel::Linear { designs };
    (MEDataset::new(groups, data.covariate_names.clone()).unwrap(), out)
}

/// Minimizer of `½‖w − v‖²` over the capped simplex, found by trying every
/// assignment of each coordinate to {free, 0, 1} and keeping the closest
/// feasible KKT point.
pub fn enumerate_capped_simplex(v: &DVector<f64>, h: f64) -> DVector<f64> {
    let n = v.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut status = vec![0u8; n];
        let mut c = code;
        for s in status.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let ones = status.iter().filter(|&&s| s == 2).count() as f64;
        let free: Vec<usize> = (0..n).filter(|&j| status[j] == 0).collect();
        let mu = if free.is_empty() {
            if (ones - h).abs() > 1e-12 {
                continue;
            }
            0.0
        } else {
            (h - ones - free.iter().map(|&j| v[j]).sum::<f64>()) / free.len() as f64
        };
        let w = DVector::from_fn(n, |j, _| match status[j] {
            0 => v[j] + mu,
            1 => 0.0,
            _ => 1.0,
        });
        let tol = 1e-12;
        let kkt = (0..n).all(|j| match status[j] {
            0 => w[j] >= -tol && w[j] <= 1.0 + tol,
            1 => free.is_empty() || v[j] + mu <= tol,
            _ => free.is_empty() || v[j] + mu >= 1.0 - tol,
        });
        if !kkt {
            continue;
        }
        let d = (&w - v).norm_squared();
        if best.as_ref().is_none_or(|(b, _)| d < *b) {
            best = Some((d, w));
        }
    }
    best.expect("some activity pattern is optimal").1
}

/// Recursive adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let simpson = |a: f64, b: f64| (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
    let m = 0.5 * (a + b);
    let whole = simpson(a, b);
    let halves = simpson(a, m) + simpson(m, b);
    if depth == 0 || (halves - whole).abs() <= 15.0 * tol {
        halves + (halves - whole) / 15.0
    } else {
        adaptive_simpson(f, a, m, 0.5 * tol, depth - 1) + adaptive_simpson(f, m, b, 0.5 * tol, depth - 1)
    }
}

pub struct Trial {
    pub data: MEDataset,
    pub spec: ModelSpec,
}

/// Small instance with fixed variance parameters and `h = n - 1`, half of
/// them with one shifted observation.
pub fn trimming_trial(seed: u64) -> Trial {
    let mut rng = RngStream::new(1000 + seed);
    let m = 1 + rng.index(3);
    let mut sizes: Vec<usize> = (0..m).map(|_| 1 + rng.index(3)).collect();
    while sizes.iter().sum::<usize>() < 4 {
        sizes[0] += 1;
    }
    while sizes.iter().sum::<usize>() > 8 {
        sizes[m - 1] -= 1;
    }
    let error = if seed.is_multiple_of(2) {
        ErrorSpec::Known
    } else {
        ErrorSpec::SharedSigma
    };
    let mut inst = random_linear(seed, &sizes, 2, 1, error);
    let n = inst.data.n_total;
    if rng.uniform(0.0, 1.0) < 0.5 {
        let (gi, row) = inst.data.locate(rng.index(n)).unwrap();
        inst.data.groups[gi].y[row] += rng.uniform(8.0, 15.0);
    }
    let layout = inst.spec.layout(&inst.data);
    let mut spec = inst.spec.with_budget(TrimBudget::Count(n - 1));
    for j in 0..layout.k_gamma {
        spec = spec.fix(layout.gamma_offset() + j, inst.theta.gamma[j]);
    }
    for j in 0..layout.k_sigma {
        spec = spec.fix(layout.sigma_offset() + j, inst.theta.sigma[j]);
    }
    Trial { data: inst.data, spec }
}

/// Value function with observation `j` removed.
pub fn leave_one_out(data: &MEDataset, spec: &ModelSpec, j: usize) -> f64 {
    let n = data.n_total;
    let mut w = DVector::from_element(n, 1.0);
    w[j] = 0.0;
    value_function(&TrimWeights { w, h: (n - 1) as f64 }, data, spec, None)
        .unwrap()
        .v
}

/// Log-ratio spline model with exposure-difference random slopes.
pub fn log_ratio_instance(seed: u64) -> (MEDataset, ModelSpec, Theta) {
    let mut rng = RngStream::new(seed);
    let basis = SplineBasis::with_interior(0.0, 10.0, &[3.0, 6.0], 3).unwrap();
    let mut alt = Vec::new();
    let mut reference = Vec::new();
    let mut groups = Vec::new();
    for gi in 0..3 {
        let n = 2 + rng.index(4);
        let mut a = Vec::new();
        let mut r = Vec::new();
        for _ in 0..n {
            let lo = rng.uniform(0.0, 8.0);
            a.push((lo, lo + rng.uniform(0.1, 2.0)));
            let lo = rng.uniform(0.0, 4.0);
            r.push((lo, lo + rng.uniform(0.0, 1.0)));
        }
        let mid = |v: &[(f64, f64)]| v.iter().map(|(x, y)| 0.5 * (x + y)).collect::<Vec<_>>();
        groups.push(Group {
            id: format!("s{gi}"),
            y: DVector::from_fn(n, |_, _| rng.normal(0.3, 0.5)),
            z: exposure_difference_loading(&mid(&a), &mid(&r)),
            covariates: DMatrix::zeros(n, 0),
            se: Some(DVector::from_fn(n, |_, _| rng.uniform(0.1, 0.5))),
        });
        alt.push(a);
        reference.push(r);
    }
    let data = MEDataset::new(groups, vec![]).unwrap();
    let obs = ObservationModel::log_ratio(&basis, &alt, &reference).unwrap();
    let spec = ModelSpec::new(obs, ErrorSpec::Known);
    let theta = Theta {
        beta: DVector::from_fn(basis.dim(), |_, _| rng.uniform(0.5, 3.0)),
        gamma: DVector::from_element(1, rng.uniform(0.01, 0.2)),
        sigma: DVector::zeros(0),
    };
    (data, spec, theta)
}
