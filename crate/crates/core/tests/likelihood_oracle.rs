mod common;

use common::{delete_row, dense_trimmed, fd_gradient, log_ratio_instance, random_linear, rel_err};
use nalgebra::DVector;
use trimfit::likelihood::{neg_marginal_loglik, trimmed_neg_loglik};
use trimfit::rng::RngStream;
use trimfit::{ErrorSpec, Theta, TrimWeights};

fn weights(n: usize, w: DVector<f64>) -> TrimWeights {
    assert_eq!(w.len(), n);
    let h = w.sum();
    TrimWeights { w, h }
}

#[test]
fn matches_dense_covariance_small() {
    for seed in 0..10 {
        let inst = random_linear(seed, &[4, 4, 4], 3, 2, ErrorSpec::Known);
        let ones = DVector::from_element(12, 1.0);
        let fast = neg_marginal_loglik(&inst.theta, &inst.data, &inst.spec).unwrap().value;
        let dense = dense_trimmed(&inst.theta, &ones, &inst.data, &inst.spec);
        assert!(
            (fast - dense).abs() <= 1e-10 * dense.abs().max(1.0),
            "{fast} vs {dense}"
        );
    }
}

#[test]
fn woodbury_matches_dense_on_larger_groups() {
    let mut rng = RngStream::new(99);
    for seed in 0..8 {
        let sizes: Vec<usize> = (0..3).map(|_| 1 + rng.index(50)).collect();
        let k_gamma = 1 + rng.index(3);
        for error in [ErrorSpec::Known, ErrorSpec::SharedSigma, ErrorSpec::GroupSigma] {
            let inst = random_linear(100 + seed, &sizes, 2, k_gamma, error);
            let n = inst.data.n_total;
            let w = DVector::from_fn(n, |_, _| rng.uniform(0.0, 1.0));
            let fast = trimmed_neg_loglik(&inst.theta, &weights(n, w.clone()), &inst.data, &inst.spec)
                .unwrap()
                .value;
            let dense = dense_trimmed(&inst.theta, &w, &inst.data, &inst.spec);
            assert!(
                (fast - dense).abs() <= 1e-10 * dense.abs().max(1.0),
                "{fast} vs {dense}"
            );
        }
    }
}

#[test]
fn unit_weights_reduce_to_untrimmed() {
    let inst = random_linear(3, &[5, 2, 7], 2, 1, ErrorSpec::GroupSigma);
    let a = neg_marginal_loglik(&inst.theta, &inst.data, &inst.spec).unwrap();
    let b = trimmed_neg_loglik(&inst.theta, &TrimWeights::ones(14), &inst.data, &inst.spec).unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.grad_theta, b.grad_theta);
}

#[test]
fn zero_weight_equals_deleting_the_row() {
    for error in [ErrorSpec::Known, ErrorSpec::SharedSigma] {
        let inst = random_linear(11, &[3, 4, 5], 2, 2, error);
        let n = inst.data.n_total;
        for j in 0..n {
            let (gi, row) = inst.data.locate(j).unwrap();
            let mut w = DVector::from_element(n, 1.0);
            w[j] = 0.0;
            let trimmed = trimmed_neg_loglik(&inst.theta, &weights(n, w), &inst.data, &inst.spec)
                .unwrap()
                .value;
            let (data, spec) = delete_row(&inst.data, &inst.spec, gi, row);
            let deleted = neg_marginal_loglik(&inst.theta, &data, &spec).unwrap().value;
            assert!(
                (trimmed - deleted).abs() <= 1e-12 * deleted.abs().max(1.0),
                "row {j}: {trimmed} vs {deleted}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = RngStream::new(5);
    for case in 0..20u64 {
        let (data, spec, theta) = match case % 4 {
            0 => {
                let i = random_linear(case, &[3, 5, 4], 3, 2, ErrorSpec::Known);
                (i.data, i.spec, i.theta)
            }
            1 => {
                let i = random_linear(case, &[6, 2], 2, 1, ErrorSpec::SharedSigma);
                (i.data, i.spec, i.theta)
            }
            2 => {
                let i = random_linear(case, &[4, 4, 3], 2, 3, ErrorSpec::GroupSigma);
                (i.data, i.spec, i.theta)
            }
            _ => log_ratio_instance(case),
        };
        let n = data.n_total;
        let w = DVector::from_fn(n, |_, _| rng.uniform(0.05, 0.95));
        let tw = weights(n, w.clone());
        let obj = trimmed_neg_loglik(&theta, &tw, &data, &spec).unwrap();
        let layout = spec.layout(&data);

        let f_theta = |x: &DVector<f64>| {
            trimmed_neg_loglik(&Theta::unflatten(x, layout), &tw, &data, &spec)
                .unwrap()
                .value
        };
        let fd = fd_gradient(f_theta, &theta.flatten(), 1e-6);
        let err = rel_err(&obj.grad_theta, &fd);
        assert!(err <= 1e-5, "case {case}: grad_theta rel err {err:e}");

        let f_w = |x: &DVector<f64>| {
            trimmed_neg_loglik(&theta, &weights(n, x.clone()), &data, &spec)
                .unwrap()
                .value
        };
        let fd = fd_gradient(f_w, &w, 1e-6);
        let err = rel_err(obj.grad_w.as_ref().unwrap(), &fd);
        assert!(err <= 1e-5, "case {case}: grad_w rel err {err:e}");
    }
}

#[test]
fn objective_grows_without_bound_in_gamma() {
    let inst = random_linear(8, &[5, 5], 2, 2, ErrorSpec::Known);
    let mut previous = f64::NEG_INFINITY;
    for g in [1e2, 1e4, 1e6] {
        let mut t = inst.theta.clone();
        t.gamma[1] = g;
        let v = neg_marginal_loglik(&t, &inst.data, &inst.spec).unwrap().value;
        assert!(v > previous);
        previous = v;
    }
    assert!(previous > 10.0);
}
