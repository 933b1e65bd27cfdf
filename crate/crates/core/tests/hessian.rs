mod common;

use anchorgcd::hessian::{hessian_trace, hvp, lambda_max};
use anchorgcd::objective::{Objective, Quadratic};
use anchorgcd::Result;
use common::{fd_gradient, quadratic_with_spectrum, wishart_quadratic};

/// `Σ xᵢ⁴/4 + Σ_{i<j} xᵢxⱼ`.
struct Quartic;

impl Objective for Quartic {
    fn dim(&self) -> usize {
        5
    }

    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s: f64 = x.iter().sum();
        let mut loss = x.iter().map(|v| v.powi(4) / 4.0).sum::<f64>();
        loss += (s * s - x.iter().map(|v| v * v).sum::<f64>()) / 2.0;
        Ok((loss, x.iter().map(|v| v.powi(3) + s - v).collect()))
    }
}

#[test]
fn hvp_matches_dense_finite_difference_hessian() {
    let x = [0.3, -1.1, 0.7, 2.0, -0.4];
    let f = |p: &[f64]| Quartic.loss_and_grad(p).unwrap().0;
    let h = 1e-3;
    for i in 0..5 {
        let mut e = vec![0.0; 5];
        e[i] = 1.0;
        let col = hvp(&Quartic, &x, &e).unwrap();
        // Column i of the Hessian as differences of FD gradients.
        let mut up = x.to_vec();
        up[i] += h;
        let mut down = x.to_vec();
        down[i] -= h;
        let gu = fd_gradient(f, &up, 1e-4);
        let gd = fd_gradient(f, &down, 1e-4);
        for j in 0..5 {
            let want = (gu[j] - gd[j]) / (2.0 * h);
            assert!((col[j] - want).abs() < 1e-4, "H[{j},{i}] {} vs {want}", col[j]);
        }
    }
}

#[test]
fn lambda_max_matches_dense_eigensolver() {
    for seed in 0..5 {
        let (q, eig) = wishart_quadratic(20, 0.0, seed);
        let top = eig.iter().cloned().fold(f64::MIN, f64::max);
        let est = lambda_max(&q, &[0.0; 20], 5000, 1e-12, seed).unwrap();
        assert!((est.value - top).abs() < 1e-3, "seed {seed}: {} vs {top}", est.value);
    }
}

#[test]
fn negative_dominant_eigenvalue_comes_with_the_top() {
    for seed in 0..5 {
        let (q, eig) = wishart_quadratic(20, 3.0, seed);
        let top = eig.iter().cloned().fold(f64::MIN, f64::max);
        let bottom = eig.iter().cloned().fold(f64::MAX, f64::min);
        let est = lambda_max(&q, &[0.0; 20], 5000, 1e-12, seed).unwrap();
        assert!((est.value - bottom).abs() < 1e-3);
        let got = est.top.unwrap();
        assert!((got - top).abs() < 1e-3, "seed {seed}: {got} vs {top}");
    }
}

#[test]
fn trace_within_five_percent_on_psd_quadratic() {
    let eigs: Vec<f64> = (1..=20).map(f64::from).collect();
    let q = quadratic_with_spectrum(&eigs, 3);
    let est = hessian_trace(&q, &[0.0; 20], 500, 11).unwrap();
    assert!((est.value - 210.0).abs() / 210.0 < 0.05, "{}", est.value);
}

#[test]
fn trace_is_exact_on_diagonal_hessian() {
    let q = Quadratic::diagonal(&[1.0, 4.0, 9.0]);
    let est = hessian_trace(&q, &[0.5, 0.5, 0.5], 3, 0).unwrap();
    assert!((est.value - 14.0).abs() < 1e-6);
}

#[test]
fn trace_variance_shrinks_with_more_probes() {
    let eigs: Vec<f64> = (1..=10).map(f64::from).collect();
    let q = quadratic_with_spectrum(&eigs, 5);
    let spread = |probes: usize| {
        let v: Vec<f64> = (0..20)
            .map(|s| hessian_trace(&q, &[0.0; 10], probes, 100 + s).unwrap().value)
            .collect();
        let m = v.iter().sum::<f64>() / 20.0;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 19.0
    };
    assert!(spread(100) < spread(10));
}
