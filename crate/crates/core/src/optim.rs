//! Loss sharpness penalty: a two-pass step that climbs to the worst-case
//! point within radius ρ and descends with the gradient taken there.
//!
//! ```text
//! g      = ∇L(θ)
//! θ_pert = θ + ρ·g/‖g‖₂           (global norm over every trainable weight)
//! θ      ← θ − δ·∇L(θ_pert)        (same mini-batch for both passes)
//! ```
//!
//! With ρ = 0 the step is plain SGD, bit for bit.

use crate::error::{Error, Result};
use crate::objective::Objective;

#[derive(Clone, Debug, PartialEq)]
pub struct LspConfig {
    /// Perturbation radius.
    pub rho: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub enabled: bool,
}

impl Default for LspConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            lr_initial: 0.1,
            lr_final: 1e-4,
            momentum: 0.0,
            enabled: true,
        }
    }
}

impl LspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.rho)));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Learning rate at `progress ∈ [0,1]` through a phase.
    pub fn lr_at(&self, progress: f64) -> f64 {
        cosine_decay(self.lr_initial, self.lr_final, progress)
    }
}

/// Cosine annealing from `start` (progress 0) to `end` (progress 1).
pub fn cosine_decay(start: f64, end: f64, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub offsets: Vec<f64>,
    pub grad_norm: f64,
    /// The gradient was zero, so no perturbation was applied.
    pub skipped: bool,
}

/// `ρ·g/‖g‖₂`, or all zeros (flagged) when `g = 0`.
pub fn compute_perturbation(grad: &[f64], rho: f64) -> Perturbation {
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if grad_norm == 0.0 {
        return Perturbation {
            offsets: vec![0.0; grad.len()],
            grad_norm,
            skipped: true,
        };
    }
    let s = rho / grad_norm;
    Perturbation {
        offsets: grad.iter().map(|g| g * s).collect(),
        grad_norm,
        skipped: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Loss at the incoming parameters.
    pub loss: f64,
    /// Loss at the perturbed parameters; `None` for a plain step.
    pub loss_perturbed: Option<f64>,
    /// ‖∇L(θ)‖₂ at the incoming parameters.
    pub grad_norm: f64,
    pub lr: f64,
    pub perturbation_skipped: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("optimizer step"));
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. Owns the velocity buffer, so one
/// instance belongs to one parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: LspConfig,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: LspConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    fn descend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let m = self.config.momentum;
        if m == 0.0 {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
            return;
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = m * *v + g;
            *p -= lr * *v;
        }
    }

    /// Sharpness-penalized step when enabled, plain gradient step otherwise.
    pub fn step(&mut self, params: &mut [f64], obj: &dyn Objective, lr: f64) -> Result<StepReport> {
        if self.config.enabled {
            self.lsp_step(params, obj, lr)
        } else {
            self.sgd_step(params, obj, lr)
        }
    }

    pub fn sgd_step(&mut self, params: &mut [f64], obj: &dyn Objective, lr: f64) -> Result<StepReport> {
        let (loss, grad) = obj.loss_and_grad(params)?;
        check_finite(loss, &grad)?;
        self.descend(params, &grad, lr);
        obj.project(params);
        Ok(StepReport {
            loss,
            loss_perturbed: None,
            grad_norm: norm(&grad),
            lr,
            perturbation_skipped: false,
        })
    }

    pub fn lsp_step(&mut self, params: &mut [f64], obj: &dyn Objective, lr: f64) -> Result<StepReport> {
        let (loss, grad) = obj.loss_and_grad(params)?;
        check_finite(loss, &grad)?;
        let pert = compute_perturbation(&grad, self.config.rho);
        if pert.skipped {
            log::debug!("zero gradient: perturbation skipped");
        }

        let original = params.to_vec();
        for (p, e) in params.iter_mut().zip(&pert.offsets) {
            *p += e;
        }
        let second = obj.loss_and_grad(params);
        params.copy_from_slice(&original);
        let (loss_perturbed, grad_perturbed) = second?;
        check_finite(loss_perturbed, &grad_perturbed)?;

        self.descend(params, &grad_perturbed, lr);
        obj.project(params);
        Ok(StepReport {
            loss,
            loss_perturbed: Some(loss_perturbed),
            grad_norm: pert.grad_norm,
            lr,
            perturbation_skipped: pert.skipped,
        })
    }
}

/// Momentum-free sharpness-penalized step.
pub fn lsp_step(params: &mut [f64], obj: &dyn Objective, rho: f64, lr: f64) -> Result<StepReport> {
    let mut opt = Optimizer::new(LspConfig {
        rho,
        momentum: 0.0,
        ..LspConfig::default()
    });
    opt.lsp_step(params, obj, lr)
}

/// Momentum-free gradient step.
pub fn sgd_step(params: &mut [f64], obj: &dyn Objective, lr: f64) -> Result<StepReport> {
    let mut opt = Optimizer::new(LspConfig {
        momentum: 0.0,
        ..LspConfig::default()
    });
    opt.sgd_step(params, obj, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Quadratic;
    use approx::assert_relative_eq;

    #[test]
    fn three_four_five_perturbation() {
        let p = compute_perturbation(&[3.0, 4.0], 0.05);
        assert_relative_eq!(p.offsets[0], 0.03, epsilon = 1e-15);
        assert_relative_eq!(p.offsets[1], 0.04, epsilon = 1e-15);
        assert_eq!(p.grad_norm, 5.0);
        assert!(!p.skipped);
    }

    #[test]
    fn zero_gradient_skips_perturbation() {
        let p = compute_perturbation(&[0.0; 4], 0.05);
        assert!(p.skipped);
        assert_eq!(p.offsets, vec![0.0; 4]);
    }

    #[test]
    fn scalar_quadratic_lsp_step() {
        // L = ½θ², θ = 2: θ_pert = 2.05, θ ← 2 − 0.1·2.05
        let q = Quadratic::diagonal(&[1.0]);
        let mut th = vec![2.0];
        let r = lsp_step(&mut th, &q, 0.05, 0.1).unwrap();
        assert_relative_eq!(th[0], 1.795, epsilon = 1e-15);
        assert_relative_eq!(r.loss, 2.0, epsilon = 1e-15);
        assert_relative_eq!(r.loss_perturbed.unwrap(), 0.5 * 2.05 * 2.05, epsilon = 1e-15);
    }

    #[test]
    fn diagonal_quadratic_two_pass_update() {
        // A = diag(1,10), θ = (1,1): g = (1,10), ‖g‖ = √101
        let q = Quadratic::diagonal(&[1.0, 10.0]);
        let mut th = vec![1.0, 1.0];
        lsp_step(&mut th, &q, 0.05, 0.1).unwrap();
        let n = 101f64.sqrt();
        let pert = [1.0 + 0.05 / n, 1.0 + 0.05 * 10.0 / n];
        let expected = [1.0 - 0.1 * pert[0], 1.0 - 0.1 * 10.0 * pert[1]];
        assert_relative_eq!(th[0], expected[0], epsilon = 1e-15);
        assert_relative_eq!(th[1], expected[1], epsilon = 1e-15);
    }

    #[test]
    fn plain_step_on_quadratic() {
        let q = Quadratic::diagonal(&[1.0]);
        let mut th = vec![2.0];
        sgd_step(&mut th, &q, 0.1).unwrap();
        assert_relative_eq!(th[0], 1.8, epsilon = 1e-15);
        let mut at_min = vec![0.0];
        sgd_step(&mut at_min, &q, 0.1).unwrap();
        assert_eq!(at_min, vec![0.0]);
    }

    #[test]
    fn zero_radius_matches_sgd_bitwise() {
        let q = Quadratic::new(3, vec![2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 4.0]).unwrap();
        let mut a = vec![0.3, -1.7, 2.9];
        let mut b = a.clone();
        for _ in 0..50 {
            lsp_step(&mut a, &q, 0.0, 0.05).unwrap();
            sgd_step(&mut b, &q, 0.05).unwrap();
        }
        assert_eq!(a, b);
    }

    struct Exploding;
    impl Objective for Exploding {
        fn dim(&self) -> usize {
            2
        }
        fn loss_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            // finite at the start, blows up at any perturbed point
            if p[0] > 1.0 {
                Ok((f64::NAN, vec![f64::NAN; 2]))
            } else {
                Ok((p[0], vec![1.0, 0.0]))
            }
        }
    }

    #[test]
    fn numeric_abort_restores_parameters() {
        let mut th = vec![1.0, 5.0];
        let err = lsp_step(&mut th, &Exploding, 0.5, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(th, vec![1.0, 5.0]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let q = Quadratic::diagonal(&[1.0]);
        let mut opt = Optimizer::new(LspConfig {
            momentum: 0.9,
            enabled: false,
            ..LspConfig::default()
        });
        let mut th = vec![1.0];
        opt.step(&mut th, &q, 0.1).unwrap();
        assert_relative_eq!(th[0], 0.9, epsilon = 1e-15);
        opt.step(&mut th, &q, 0.1).unwrap();
        // g = 0.9, v = 0.9·1 + 0.9 = 1.8
        assert_relative_eq!(th[0], 0.9 - 0.18, epsilon = 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LspConfig::default();
        assert_eq!(c.lr_at(0.0), 0.1);
        assert_relative_eq!(c.lr_at(1.0), 1e-4, epsilon = 1e-18);
        assert_relative_eq!(c.lr_at(0.5), 0.5 * (0.1 + 1e-4), epsilon = 1e-15);
    }
}
