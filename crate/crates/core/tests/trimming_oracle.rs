mod common;

use common::{leave_one_out, trimming_trial as trial};
use nalgebra::DVector;
use trimfit::capped_simplex::project_capped_simplex;
use trimfit::inner_solver::value_function;
use trimfit::{fit_trimmed, TrimBudget, TrimWeights};

#[test]
fn matches_exhaustive_leave_one_out() {
    let mut matches = 0;
    for seed in 0..50 {
        let t = trial(seed);
        let n = t.data.n_total;
        let values: Vec<f64> = (0..n).map(|j| leave_one_out(&t.data, &t.spec, j)).collect();
        let best = (0..n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
        let fit = fit_trimmed(&t.data, &t.spec).unwrap();
        assert!((fit.w.w.sum() - (n - 1) as f64).abs() <= 1e-8);
        if fit.outliers == vec![best] {
            matches += 1;
            assert!((fit.objective - values[best]).abs() <= 1e-6);
        } else {
            // a mismatch must be a stationary point of v over the capped simplex
            assert!(fit.converged, "seed {seed}");
            let vf = value_function(&fit.w, &t.data, &t.spec, Some(&fit.theta)).unwrap();
            assert!((fit.objective - vf.v).abs() <= 1e-6, "seed {seed}");
            let step = project_capped_simplex(&(&fit.w.w - &vf.grad_v), fit.w.h).unwrap();
            let residual = (&step - &fit.w.w).amax();
            assert!(
                residual <= 1e-4,
                "seed {seed}: projected gradient residual {residual:e}"
            );
        }
    }
    println!("{matches}/50 trials matched the enumeration");
    assert!(matches >= 45, "{matches}/50 matched");
}

#[test]
fn optimal_vertex_is_a_fixed_point() {
    for seed in 0..10 {
        let mut t = trial(seed);
        let n = t.data.n_total;
        let values: Vec<f64> = (0..n).map(|j| leave_one_out(&t.data, &t.spec, j)).collect();
        let best = (0..n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
        let mut w0 = DVector::from_element(n, 1.0);
        w0[best] = 0.0;
        t.spec.trim.w_init = Some(w0.clone());
        let fit = fit_trimmed(&t.data, &t.spec).unwrap();
        assert!((&fit.w.w - &w0).amax() <= 1e-6, "seed {seed}: {:?}", fit.w.w);
    }
}

#[test]
fn full_budget_is_a_single_fit() {
    let t = trial(3);
    let n = t.data.n_total;
    let spec = t.spec.clone().with_budget(TrimBudget::Count(n));
    let fit = fit_trimmed(&t.data, &spec).unwrap();
    assert!(fit.w.w.iter().all(|&x| x == 1.0));
    let vf = value_function(&TrimWeights::ones(n), &t.data, &spec, None).unwrap();
    assert!((fit.objective - vf.v).abs() <= 1e-8);
    assert!(fit.outliers.is_empty());
}
