//! Euclidean projection onto the capped simplex
//! `{w : sum(w) = h, 0 <= w <= 1}`.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Projects `v` onto the capped simplex with budget `h`.
///
/// The projection is `w_j = clip(v_j + mu, 0, 1)` where `mu` solves the
/// monotone piecewise-linear equation `sum_j clip(v_j + mu, 0, 1) = h`. The
/// breakpoints `-v_j` and `1 - v_j` are sorted and swept once, so the cost is
/// `O(n log n)` with no iteration tolerance.
pub fn project_capped_simplex(v: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let n = v.len();
    let tol = 1e-12 * (n as f64).max(1.0);
    if !(h >= -tol && h <= n as f64 + tol) || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InfeasibleSet { h, n });
    }
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let h = h.clamp(0.0, n as f64);
    if h == 0.0 {
        return Ok(DVector::zeros(n));
    }
    if h == n as f64 {
        return Ok(DVector::from_element(n, 1.0));
    }

    // (position, coordinate, entering_free)
    let mut events: Vec<(f64, usize, bool)> = Vec::with_capacity(2 * n);
    for (j, &x) in v.iter().enumerate() {
        events.push((-x, j, true));
        events.push((1.0 - x, j, false));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.2.cmp(&a.2)).then(a.1.cmp(&b.1)));

    let mut capped = 0.0;
    let mut free = 0usize;
    let mut free_sum = 0.0;
    let mut mu = events[events.len() - 1].0;
    for &(pos, j, entering) in &events {
        let phi = capped + free_sum + free as f64 * pos;
        if phi >= h {
            mu = if free > 0 {
                (h - capped - free_sum) / free as f64
            } else {
                pos
            };
            break;
        }
        if entering {
            free += 1;
            free_sum += v[j];
        } else {
            free -= 1;
            free_sum -= v[j];
            capped += 1.0;
        }
    }

    let mut w = v.map(|x| (x + mu).clamp(0.0, 1.0));
    // Rounding in the sweep can leave a residual of a few ulps; spread it over
    // the strictly interior coordinates.
    let resid = h - w.sum();
    let interior: Vec<usize> = (0..n).filter(|&j| w[j] > 0.0 && w[j] < 1.0).collect();
    if resid != 0.0 && !interior.is_empty() {
        let share = resid / interior.len() as f64;
        for j in interior {
            w[j] = (w[j] + share).clamp(0.0, 1.0);
        }
    }
    Ok(w)
}
