//! Smooth constrained minimization over the parameter vector.
//!
//! A primal log-barrier interior-point method: for a decreasing sequence of
//! barrier weights `mu` the subproblem
//! `f(x) - mu * sum_i ln(-g_i(x))` is minimized with quasi-Newton steps. The
//! Hessian model is a Powell-damped BFGS approximation of the Lagrangian
//! Hessian plus the exact Gauss-Newton part of the barrier,
//! `sum_i mu / g_i^2 * grad g_i grad g_i'`, which keeps steps well scaled as
//! iterates approach active constraints. Only gradients of `f` are needed.
//!
//! Equalities (a bound with `lower == upper`, or a linear row paired with its
//! exact negation) have no interior and are eliminated through a null-space
//! parameterization `x = x_p + N z` before the barrier is applied.
//!
//! Constraint indices used in reports: `0..n` lower bounds, `n..2n` upper
//! bounds, then the rows of the linear set, then the components of each
//! nonlinear constraint in order.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::data_model::{LinearConstraintSet, MEDataset, ModelSpec, NonlinearConstraint, Theta, TrimWeights};
use crate::error::{Error, Result};
use crate::likelihood::{residuals, trimmed_neg_loglik_raw};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Bound on stationarity, feasibility and complementarity at exit.
    pub kkt_tol: f64,
    /// Total quasi-Newton iterations over all barrier stages.
    pub max_iter: usize,
    pub mu_init: f64,
    pub mu_final: f64,
    pub mu_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_iter: 5000,
            mu_init: 1.0,
            mu_final: 1e-9,
            mu_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Minimizer in the flattened parameter space.
    pub theta_star: DVector<f64>,
    pub objective: f64,
    /// `max(stationarity, feasibility, complementarity)`.
    pub kkt_residual: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub active_set: Vec<usize>,
    /// One nonnegative multiplier per constraint index.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Barrier merit at the start and end of each stage.
    pub merit_trace: Vec<(f64, f64)>,
}

/// Objective oracle returning value and gradient. Domain or variance errors
/// mark a point as outside the objective's domain; the solver backtracks.
pub trait SmoothObjective {
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

impl<F> SmoothObjective for F
where
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn eval(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn free(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }
}

fn is_outside_domain(e: &Error) -> bool {
    matches!(
        e,
        Error::Domain { .. } | Error::InvalidVariance { .. } | Error::Numeric { .. }
    )
}

/// What the barrier iteration needs from a problem in reduced coordinates.
trait BarrierProblem {
    fn dim(&self) -> usize;
    /// `None` outside the objective's domain.
    fn objective(&self, z: &DVector<f64>) -> Result<Option<(f64, DVector<f64>)>>;
    /// Constraint values `g(z)` (feasible when all `< 0`) and their Jacobian.
    fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

/// Inequality rows in the original space plus the equality elimination.
struct Reduced<'a> {
    obj: &'a dyn SmoothObjective,
    xp: DVector<f64>,
    basis: DMatrix<f64>,
    /// Linear inequalities `a x <= b` in z-space: `a_z z <= b_z`.
    a_z: DMatrix<f64>,
    b_z: DVector<f64>,
    nonlin: &'a [NonlinearConstraint],
}

impl Reduced<'_> {
    fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.xp + &self.basis * z
    }
}

impl BarrierProblem for Reduced<'_> {
    fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn objective(&self, z: &DVector<f64>) -> Result<Option<(f64, DVector<f64>)>> {
        let x = self.lift(z);
        match self.obj.eval(&x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => Ok(Some((v, self.basis.transpose() * g))),
            Ok(_) => Ok(None),
            Err(e) if is_outside_domain(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let m_lin = self.b_z.len();
        let m_nl: usize = self.nonlin.iter().map(|c| c.len()).sum();
        let nz = self.dim();
        let mut g = DVector::zeros(m_lin + m_nl);
        let mut jac = DMatrix::zeros(m_lin + m_nl, nz);
        if m_lin > 0 {
            g.rows_mut(0, m_lin).copy_from(&(&self.a_z * z - &self.b_z));
            jac.rows_mut(0, m_lin).copy_from(&self.a_z);
        }
        if m_nl > 0 {
            let x = self.lift(z);
            let mut row = m_lin;
            for c in self.nonlin {
                let k = c.len();
                g.rows_mut(row, k).copy_from(&((c.evaluator)(&x) - &c.upper));
                jac.rows_mut(row, k).copy_from(&((c.jacobian)(&x) * &self.basis));
                row += k;
            }
        }
        (g, jac)
    }
}

/// Phase 1: minimize `t` subject to `g_i(z) <= t` and `t >= -1`.
struct PhaseOne<'a, 'b> {
    inner: &'b Reduced<'a>,
}

impl BarrierProblem for PhaseOne<'_, '_> {
    fn dim(&self) -> usize {
        self.inner.dim() + 1
    }

    fn objective(&self, z: &DVector<f64>) -> Result<Option<(f64, DVector<f64>)>> {
        let n = self.inner.dim();
        let mut g = DVector::zeros(n + 1);
        g[n] = 1.0;
        Ok(Some((z[n], g)))
    }

    fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.inner.dim();
        let t = z[n];
        let (g, j) = self.inner.constraints(&z.rows(0, n).into_owned());
        let m = g.len();
        let mut gg = DVector::zeros(m + 1);
        let mut jj = DMatrix::zeros(m + 1, n + 1);
        for i in 0..m {
            gg[i] = g[i] - t;
            jj[(i, n)] = -1.0;
        }
        jj.view_mut((0, 0), (m, n)).copy_from(&j);
        gg[m] = -t - 1.0;
        jj[(m, n)] = -1.0;
        (gg, jj)
    }
}

struct BarrierState {
    z: DVector<f64>,
    f: f64,
    grad_f: DVector<f64>,
    g: DVector<f64>,
    jac: DMatrix<f64>,
}

impl BarrierState {
    fn merit(&self, mu: f64) -> f64 {
        self.f - mu * self.g.iter().map(|gi| (-gi).ln()).sum::<f64>()
    }

    fn multipliers(&self, mu: f64) -> DVector<f64> {
        self.g.map(|gi| mu / (-gi))
    }

    fn merit_grad(&self, mu: f64) -> DVector<f64> {
        &self.grad_f + self.jac.transpose() * self.multipliers(mu)
    }
}

fn state_at<P: BarrierProblem>(p: &P, z: DVector<f64>) -> Result<Option<BarrierState>> {
    let (g, jac) = p.constraints(&z);
    if g.iter().any(|&gi| !(gi < 0.0)) {
        return Ok(None);
    }
    Ok(p.objective(&z)?
        .map(|(f, grad_f)| BarrierState { z, f, grad_f, g, jac }))
}

struct BarrierOutcome {
    state: BarrierState,
    mu: f64,
    iterations: usize,
    reached_tol: bool,
    merit_trace: Vec<(f64, f64)>,
}

/// Runs the barrier stages from a strictly feasible `z0`. `stop` is checked
/// after every accepted step and ends the run early when it returns true.
fn barrier_solve<P: BarrierProblem>(
    p: &P,
    z0: DVector<f64>,
    opts: &SolverOptions,
    stop: &dyn Fn(&BarrierState) -> bool,
) -> Result<BarrierOutcome> {
    let n = p.dim();
    let mut st = state_at(p, z0.clone())?.ok_or_else(|| Error::Numeric {
        msg: "objective undefined at the starting point".into(),
        iterate: z0.iter().copied().collect(),
    })?;
    let mut hess = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut iterations = 0;
    let mut mu = opts.mu_init.max(opts.mu_final);
    let mut merit_trace = Vec::new();
    let mut reached_tol = false;
    loop {
        let last_stage = mu <= opts.mu_final * (1.0 + 1e-12);
        let tol = if last_stage { opts.kkt_tol } else { opts.kkt_tol.max(mu) };
        let merit_start = st.merit(mu);
        let mut stage_done = false;
        let mut reset_once = false;
        while iterations < opts.max_iter {
            let grad = st.merit_grad(mu);
            if grad.amax() <= tol {
                stage_done = true;
                break;
            }
            let mut h = hess.clone();
            for i in 0..st.g.len() {
                let wgt = mu / (st.g[i] * st.g[i]);
                let row = st.jac.row(i);
                h += wgt * row.transpose() * row;
            }
            let dir = solve_spd(h, &(-&grad));
            let slope = grad.dot(&dir);
            if !(slope < 0.0) {
                if reset_once {
                    break;
                }
                hess = DMatrix::identity(n, n);
                reset_once = true;
                continue;
            }
            // fraction to the boundary along linearized constraints
            let mut alpha: f64 = 1.0;
            let jd = &st.jac * &dir;
            for i in 0..st.g.len() {
                if jd[i] > 0.0 {
                    alpha = alpha.min(0.995 * (-st.g[i]) / jd[i]);
                }
            }
            let merit0 = st.merit(mu);
            let mut accepted = None;
            while alpha > 1e-20 {
                let z = &st.z + alpha * &dir;
                if let Some(trial) = state_at(p, z)? {
                    let m = trial.merit(mu);
                    let slack = 1e-14 * (1.0 + merit0.abs());
                    if m.is_finite() && m <= merit0 + 1e-4 * alpha * slope + slack {
                        accepted = Some(trial);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some(next) = accepted else {
                if reset_once {
                    break;
                }
                hess = DMatrix::identity(n, n);
                reset_once = true;
                continue;
            };
            iterations += 1;
            let s = &next.z - &st.z;
            let lam = next.multipliers(mu);
            // Lagrangian gradient difference; linear rows cancel exactly.
            let y = (&next.grad_f - &st.grad_f) + (&next.jac - &st.jac).transpose() * &lam;
            let sy = s.dot(&y);
            if !scaled && sy > 0.0 {
                hess *= y.norm_squared() / sy;
                scaled = true;
            }
            damped_bfgs(&mut hess, &s, &y);
            st = next;
            if stop(&st) {
                return Ok(BarrierOutcome {
                    state: st,
                    mu,
                    iterations,
                    reached_tol: true,
                    merit_trace,
                });
            }
            let step = s.amax();
            if step <= 1e-15 * (1.0 + st.z.amax()) {
                if reset_once {
                    break;
                }
                hess = DMatrix::identity(n, n);
                reset_once = true;
            }
        }
        let merit_end = st.merit(mu);
        debug_assert!(
            merit_end <= merit_start + 1e-10 * (1.0 + merit_start.abs()),
            "barrier merit increased within a stage: {merit_start} -> {merit_end}"
        );
        merit_trace.push((merit_start, merit_end));
        if last_stage {
            reached_tol = stage_done;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        mu = (mu * opts.mu_factor).max(opts.mu_final);
    }
    Ok(BarrierOutcome {
        state: st,
        mu,
        iterations,
        reached_tol,
        merit_trace,
    })
}

fn solve_spd(mut h: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let scale = h.diagonal().amax().max(1e-300);
    let mut shift = 0.0;
    for _ in 0..60 {
        if let Some(ch) = Cholesky::new(h.clone()) {
            return ch.solve(rhs);
        }
        let add = if shift == 0.0 { 1e-12 * scale } else { shift * 9.0 };
        for i in 0..n {
            h[(i, i)] += add;
        }
        shift += add;
    }
    rhs / scale
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = theta * y + (1.0 - theta) * &bs;
    let sr = s.dot(&r);
    if !(sr > 0.0) || !sr.is_finite() {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
}

struct Layout {
    n: usize,
    n_lin: usize,
    nonlin_sizes: Vec<usize>,
}

impl Layout {
    fn total(&self) -> usize {
        2 * self.n + self.n_lin + self.nonlin_sizes.iter().sum::<usize>()
    }
}

/// Minimizes `objective` subject to bounds, linear and nonlinear
/// inequalities, starting from `theta0`.
pub fn minimize_constrained(
    objective: &dyn SmoothObjective,
    bounds: &Bounds,
    lin: &LinearConstraintSet,
    nonlin: &[NonlinearConstraint],
    theta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n = theta0.len();
    if bounds.lower.len() != n || bounds.upper.len() != n {
        return Err(Error::Spec("bounds do not match the parameter dimension".into()));
    }
    if !lin.is_empty() && lin.ncols() != n {
        return Err(Error::Spec(format!(
            "linear constraints have {} columns for {} parameters",
            lin.ncols(),
            n
        )));
    }
    let layout = Layout {
        n,
        n_lin: lin.len(),
        nonlin_sizes: nonlin.iter().map(|c| c.len()).collect(),
    };

    // Split constraints into equalities (eliminated) and inequalities (barrier).
    // Each inequality keeps its global index.
    let mut eq_rows: Vec<(DVector<f64>, f64, usize, usize)> = Vec::new(); // (a, b, idx_le, idx_ge)
    let mut ineq_rows: Vec<(DVector<f64>, f64, usize)> = Vec::new();
    for j in 0..n {
        let (lo, hi) = (bounds.lower[j], bounds.upper[j]);
        if lo > hi {
            return Ok(infeasible_report(theta0, &layout, lo - hi));
        }
        let e = DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
        if lo == hi {
            eq_rows.push((e, hi, n + j, j));
            continue;
        }
        if lo.is_finite() {
            ineq_rows.push((-e.clone(), -lo, j));
        }
        if hi.is_finite() {
            ineq_rows.push((e, hi, n + j));
        }
    }
    let mut paired = vec![false; lin.len()];
    for i in 0..lin.len() {
        if paired[i] {
            continue;
        }
        let ai = lin.matrix.row(i).transpose();
        for j in i + 1..lin.len() {
            if paired[j] {
                continue;
            }
            let aj = lin.matrix.row(j).transpose();
            let scale = 1.0 + ai.amax() + lin.rhs[i].abs();
            if (&ai + &aj).amax() <= 1e-13 * scale && (lin.rhs[i] + lin.rhs[j]).abs() <= 1e-13 * scale {
                paired[i] = true;
                paired[j] = true;
                eq_rows.push((ai.clone(), lin.rhs[i], 2 * n + i, 2 * n + j));
                break;
            }
        }
        if !paired[i] {
            ineq_rows.push((ai, lin.rhs[i], 2 * n + i));
        }
    }

    // Null-space parameterization of the equalities.
    let (xp, basis, e_mat, e_rhs) = if eq_rows.is_empty() {
        (
            DVector::zeros(n),
            DMatrix::identity(n, n),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )
    } else {
        let p = eq_rows.len();
        let e_mat = DMatrix::from_fn(p, n, |r, c| eq_rows[r].0[c]);
        let e_rhs = DVector::from_fn(p, |r, _| eq_rows[r].1);
        let pinv = e_mat
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|m| Error::Spec(m.to_string()))?;
        let xp = &pinv * &e_rhs;
        let resid = (&e_mat * &xp - &e_rhs).amax();
        if resid > 1e-9 * (1.0 + e_rhs.amax()) {
            return Ok(infeasible_report(theta0, &layout, resid));
        }
        let proj = DMatrix::identity(n, n) - &pinv * &e_mat;
        let eig = SymmetricEigen::new(proj);
        let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
        let mut basis = DMatrix::zeros(n, cols.len());
        for (k, &c) in cols.iter().enumerate() {
            basis.set_column(k, &eig.eigenvectors.column(c));
        }
        (xp, basis, e_mat, e_rhs)
    };

    let a_x = DMatrix::from_fn(ineq_rows.len(), n, |r, c| ineq_rows[r].0[c]);
    let b_x = DVector::from_fn(ineq_rows.len(), |r, _| ineq_rows[r].1);
    let problem = Reduced {
        obj: objective,
        a_z: &a_x * &basis,
        b_z: &b_x - &a_x * &xp,
        xp: xp.clone(),
        basis: basis.clone(),
        nonlin,
    };

    // Start strictly inside the bounds.
    let mut x0 = theta0.clone();
    for j in 0..n {
        let (lo, hi) = (bounds.lower[j], bounds.upper[j]);
        if lo == hi {
            x0[j] = lo;
            continue;
        }
        let range = if lo.is_finite() && hi.is_finite() { hi - lo } else { 1.0 };
        let delta = 1e-6 * range;
        if lo.is_finite() && !(x0[j] > lo + delta * 0.5) {
            x0[j] = lo + delta;
        }
        if hi.is_finite() && !(x0[j] < hi - delta * 0.5) {
            x0[j] = hi - delta;
        }
        if !x0[j].is_finite() {
            x0[j] = 0.0;
        }
    }
    let mut z0 = basis.transpose() * (&x0 - &xp);

    let mut iterations = 0;
    let (g0, _) = problem.constraints(&z0);
    if g0.iter().any(|&g| !(g < 0.0)) {
        let t0 = g0.max() + 1.0;
        let mut zt = DVector::zeros(z0.len() + 1);
        zt.rows_mut(0, z0.len()).copy_from(&z0);
        zt[z0.len()] = t0;
        let phase = PhaseOne { inner: &problem };
        let nz = z0.len();
        let stop = |s: &BarrierState| {
            let (g, _) = problem.constraints(&s.z.rows(0, nz).into_owned());
            g.iter().all(|&gi| gi < -1e-9)
        };
        let out = barrier_solve(&phase, zt, opts, &stop)?;
        iterations += out.iterations;
        let z = out.state.z.rows(0, nz).into_owned();
        let (g, _) = problem.constraints(&z);
        if g.iter().any(|&gi| !(gi < 0.0)) {
            return Ok(infeasible_report(&problem.lift(&z), &layout, g.max()));
        }
        z0 = z;
    }

    let out = barrier_solve(&problem, z0, opts, &|_| false)?;
    iterations += out.iterations;
    let st = &out.state;
    let x = problem.lift(&st.z);
    let (_, grad_x) = objective.eval(&x)?;

    // Multipliers and KKT measures in the original space.
    let mut multipliers = DVector::zeros(layout.total());
    let lam = st.multipliers(out.mu);
    let mut stat = grad_x.clone();
    for (k, (a, _, idx)) in ineq_rows.iter().enumerate() {
        multipliers[*idx] = lam[k];
        stat += lam[k] * a;
    }
    let mut nl_row = ineq_rows.len();
    let mut nl_idx = 2 * n + layout.n_lin;
    for c in nonlin {
        let jac = (c.jacobian)(&x);
        for i in 0..c.len() {
            multipliers[nl_idx + i] = lam[nl_row + i];
            stat += lam[nl_row + i] * jac.row(i).transpose();
        }
        nl_row += c.len();
        nl_idx += c.len();
    }
    if !eq_rows.is_empty() {
        // E' nu = -stat in the least-squares sense
        let et = e_mat.transpose();
        let nu = et
            .clone()
            .svd(true, true)
            .solve(&(-&stat), 1e-12)
            .map_err(|m| Error::Spec(m.to_string()))?;
        stat += &et * &nu;
        for (k, (_, _, le, ge)) in eq_rows.iter().enumerate() {
            if nu[k] >= 0.0 {
                multipliers[*le] = nu[k];
            } else {
                multipliers[*ge] = -nu[k];
            }
        }
    }
    let stationarity = stat.amax();
    let mut feasibility: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut active_set = Vec::new();
    for (k, (a, b, idx)) in ineq_rows.iter().enumerate() {
        let g = a.dot(&x) - b;
        feasibility = feasibility.max(g);
        complementarity = complementarity.max((lam[k] * g).abs());
        if -g <= 1e-6 * (1.0 + b.abs()) {
            active_set.push(*idx);
        }
    }
    let mut nl_row = ineq_rows.len();
    let mut nl_idx = 2 * n + layout.n_lin;
    for c in nonlin {
        let v = (c.evaluator)(&x) - &c.upper;
        for i in 0..c.len() {
            feasibility = feasibility.max(v[i]);
            complementarity = complementarity.max((lam[nl_row + i] * v[i]).abs());
            if -v[i] <= 1e-6 * (1.0 + c.upper[i].abs()) {
                active_set.push(nl_idx + i);
            }
        }
        nl_row += c.len();
        nl_idx += c.len();
    }
    if !eq_rows.is_empty() {
        feasibility = feasibility.max((&e_mat * &x - &e_rhs).amax());
        for (_, _, le, ge) in &eq_rows {
            active_set.push(*le);
            active_set.push(*ge);
        }
    }
    active_set.sort_unstable();
    let kkt_residual = stationarity.max(feasibility).max(complementarity);
    let status = if (out.reached_tol || out.mu <= opts.mu_final * (1.0 + 1e-12)) && kkt_residual <= opts.kkt_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIter
    };
    Ok(SolveReport {
        theta_star: x,
        objective: st.f,
        kkt_residual,
        stationarity,
        feasibility,
        complementarity,
        active_set,
        multipliers,
        iterations,
        status,
        merit_trace: out.merit_trace,
    })
}

fn infeasible_report(x: &DVector<f64>, layout: &Layout, residual: f64) -> SolveReport {
    SolveReport {
        theta_star: x.clone(),
        objective: f64::NAN,
        kkt_residual: f64::INFINITY,
        stationarity: f64::INFINITY,
        feasibility: residual.max(0.0),
        complementarity: 0.0,
        active_set: Vec::new(),
        multipliers: DVector::zeros(layout.total()),
        iterations: 0,
        status: SolveStatus::Infeasible,
        merit_trace: Vec::new(),
    }
}

/// Default starting point: weighted least squares for linear models (ones for
/// log models), unit variances and the residual standard deviation.
pub fn initial_theta(data: &MEDataset, spec: &ModelSpec, w: &DVector<f64>) -> Result<Theta> {
    let layout = spec.layout(data);
    if let Some(t) = &spec.theta_init {
        return Ok(t.clone());
    }
    let beta = match &spec.obs {
        crate::obs_models::ObservationModel::Linear { designs } => {
            let k = layout.k_beta;
            let mut xtx = DMatrix::zeros(k, k);
            let mut xty = DVector::zeros(k);
            let mut off = 0;
            for (g, x) in data.groups.iter().zip(designs) {
                for r in 0..g.len() {
                    let wr = w[off + r];
                    let row = x.row(r).transpose();
                    xtx += wr * &row * row.transpose();
                    xty += wr * g.y[r] * &row;
                }
                off += g.len();
            }
            xtx.svd(true, true)
                .solve(&xty, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(k))
        }
        _ => DVector::from_element(layout.k_beta, 1.0),
    };
    let mut theta = Theta {
        beta,
        gamma: DVector::from_element(layout.k_gamma, 1.0),
        sigma: DVector::zeros(layout.k_sigma),
    };
    if layout.k_sigma > 0 {
        let res = residuals(&theta, data, spec)?;
        let (mut ss, mut wsum) = (0.0, 0.0);
        let mut off = 0;
        for r in &res {
            for j in 0..r.len() {
                ss += w[off + j] * r[j] * r[j];
                wsum += w[off + j];
            }
            off += r.len();
        }
        let sd = if wsum > 0.0 { (ss / wsum).sqrt() } else { 1.0 };
        let sd = if sd.is_finite() && sd > 0.0 { sd } else { 1.0 };
        theta.sigma = DVector::from_element(layout.k_sigma, sd);
    }
    let (lo, hi) = spec.param_bounds(layout);
    let mut flat = theta.flatten();
    for i in 0..flat.len() {
        flat[i] = flat[i].clamp(lo[i], hi[i]);
    }
    Ok(Theta::unflatten(&flat, layout))
}

/// Inner minimum of the trimmed objective at fixed weights.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    pub v: f64,
    pub grad_v: DVector<f64>,
    pub theta: Theta,
    pub report: SolveReport,
    /// The inner solve stopped before reaching its tolerance.
    pub approximate: bool,
}

/// Initial barrier parameter for solves started from a previous solution.
pub const WARM_MU_INIT: f64 = 1e-4;

/// `v(w) = min_theta L(theta, w)` and its gradient, the weight gradient of the
/// trimmed objective evaluated at the inner minimizer.
pub fn value_function(
    w: &TrimWeights,
    data: &MEDataset,
    spec: &ModelSpec,
    theta_warm: Option<&Theta>,
) -> Result<ValueFunction> {
    let layout = spec.layout(data);
    let start = match theta_warm {
        Some(t) => t.clone(),
        None => initial_theta(data, spec, &w.w)?,
    };
    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let t = Theta::unflatten(x, layout);
        let o = trimmed_neg_loglik_raw(&t, &w.w, data, spec)?;
        Ok((o.value, o.grad_theta))
    };
    let (lower, upper) = spec.param_bounds(layout);
    let linear = if spec.linear.ncols() == 0 {
        LinearConstraintSet::empty(layout.len())
    } else {
        spec.linear.clone()
    };
    let mut opts = spec.solver.clone();
    if theta_warm.is_some() {
        opts.mu_init = opts.mu_init.min(WARM_MU_INIT).max(opts.mu_final);
    }
    let report = minimize_constrained(
        &objective,
        &Bounds { lower, upper },
        &linear,
        &spec.nonlinear,
        &start.flatten(),
        &opts,
    )?;
    if report.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible {
            residual: report.feasibility,
        });
    }
    let theta = Theta::unflatten(&report.theta_star, layout);
    let o = trimmed_neg_loglik_raw(&theta, &w.w, data, spec)?;
    Ok(ValueFunction {
        v: o.value,
        grad_v: o.grad_w.expect("trimmed objective always returns weight gradients"),
        approximate: report.status != SolveStatus::Converged,
        theta,
        report,
    })
}
