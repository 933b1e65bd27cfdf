//! Scalar objectives over a flat parameter vector.
//!
//! Optimizers and flatness diagnostics only see this interface, so the same
//! code drives both the GCD model and closed-form test problems.

use std::sync::Mutex;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{total_loss, Batch, LossBreakdown, LossConfig};
use crate::model::{normalize_rows, Model};

pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, params: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }

    /// Map parameters back onto their constraint set after an update.
    fn project(&self, _params: &mut [f64]) {}
}

/// `½·θᵀAθ + bᵀθ` for a symmetric `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Quadratic {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::dim("Quadratic", "matrix is not n×n"));
        }
        Ok(Self { n, a, b: vec![0.0; n] })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut a = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            a[i * n + i] = d;
        }
        Self { n, a, b: vec![0.0; n] }
    }

    pub fn with_linear(mut self, b: Vec<f64>) -> Self {
        assert_eq!(b.len(), self.n);
        self.b = b;
        self
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        if p.len() != self.n {
            return Err(Error::dim("Quadratic", "parameter length"));
        }
        let grad: Vec<f64> = (0..self.n)
            .map(|i| {
                let row = &self.a[i * self.n..(i + 1) * self.n];
                row.iter().zip(p).map(|(a, x)| a * x).sum::<f64>() + self.b[i]
            })
            .collect();
        let loss = p
            .iter()
            .zip(&grad)
            .zip(&self.b)
            .map(|((x, g), b)| 0.5 * x * (g - b) + b * x)
            .sum();
        Ok((loss, grad))
    }
}

/// The full GCD objective on a fixed mini-batch, as a function of the
/// flattened model parameters. Frozen coordinates get zero gradient.
pub struct ModelObjective<'a> {
    template: &'a Model,
    batch: &'a Batch,
    loss: &'a LossConfig,
    tau_teacher: f64,
    mask: Vec<bool>,
    first: Mutex<Option<LossBreakdown>>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(template: &'a Model, batch: &'a Batch, loss: &'a LossConfig, tau_teacher: f64) -> Self {
        Self {
            template,
            batch,
            loss,
            tau_teacher,
            mask: template.trainable_mask(),
            first: Mutex::new(None),
        }
    }

    /// Components of the first evaluation made through this objective,
    /// which for an optimizer step is the one at the unperturbed point.
    pub fn first_breakdown(&self) -> Option<LossBreakdown> {
        *self.first.lock().unwrap()
    }

    /// Loss components and masked gradient at `params`.
    pub fn evaluate(&self, params: &[f64]) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut model = self.template.clone();
        model.load_flat(params)?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let terms = total_loss(&mut tape, &model, &vars, self.batch, self.loss, self.tau_teacher)?;
        let grads = tape.backward(terms.total)?;
        let mut flat = Vec::with_capacity(params.len());
        for v in vars.all() {
            flat.extend_from_slice(grads.wrt(v).data());
        }
        for (g, &on) in flat.iter_mut().zip(&self.mask) {
            if !on {
                *g = 0.0;
            }
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("gradient"));
        }
        Ok((terms.breakdown, flat))
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.template.num_params()
    }

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (b, g) = self.evaluate(params)?;
        self.first.lock().unwrap().get_or_insert(b);
        Ok((b.total, g))
    }

    fn project(&self, params: &mut [f64]) {
        let range = self.template.prototype_range();
        normalize_rows(&mut params[range], self.template.config.feature_dim);
    }
}
