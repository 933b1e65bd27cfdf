//! Flatness diagnostics from Hessian-vector products: the dominant
//! eigenvalue by power iteration and the trace by Hutchinson's estimator.
//! Products come from central differences of the gradient.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::parallel;
use crate::rng::{self, stream};

/// Relative step of the difference quotient: `h = STEP/‖v‖`.
pub const STEP: f64 = 1e-4;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `H·v ≈ (∇L(θ+hv) − ∇L(θ−hv)) / 2h`.
pub fn hvp(obj: &dyn Objective, params: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(Error::dim(
            "hvp",
            format!("direction has {} entries, parameters {}", v.len(), params.len()),
        ));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = STEP / vn;
    let shifted = |sign: f64| -> Result<Vec<f64>> {
        let p: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + sign * h * d).collect();
        let (_, g) = obj.loss_and_grad(&p)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("hvp gradient"));
        }
        Ok(g)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenEstimate {
    /// Rayleigh quotient at the dominant (largest-magnitude) eigenvector;
    /// negative when the point is not a local minimum.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Last change of the Rayleigh quotient.
    pub residual: f64,
    /// Largest algebraic eigenvalue from a second pass on `H − value·I`,
    /// only run when `value < 0`.
    pub top: Option<f64>,
    pub top_converged: bool,
}

struct PowerResult {
    value: f64,
    iterations: usize,
    converged: bool,
    residual: f64,
}

/// Power iteration on `H − shift·I`; the returned value is shifted back.
fn power(obj: &dyn Objective, params: &[f64], iters: usize, tol: f64, seed: u64, shift: f64) -> Result<PowerResult> {
    let mut r = rng::seeded(seed, stream::HESSIAN);
    let mut v: Vec<f64> = (0..params.len()).map(|_| StandardNormal.sample(&mut r)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=iters {
        let mut w = hvp(obj, params, &v)?;
        if shift != 0.0 {
            w.iter_mut().zip(&v).for_each(|(w, v)| *w -= shift * v);
        }
        let value = dot(&v, &w);
        residual = (value - prev).abs();
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(PowerResult {
                value: shift,
                iterations: it,
                converged: true,
                residual: 0.0,
            });
        }
        if residual < tol {
            return Ok(PowerResult {
                value: value + shift,
                iterations: it,
                converged: true,
                residual,
            });
        }
        prev = value;
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Ok(PowerResult {
        value: prev + shift,
        iterations: iters,
        converged: false,
        residual,
    })
}

/// Dominant Hessian eigenvalue by power iteration from a seeded Gaussian
/// start, stopping once successive Rayleigh quotients differ by less than
/// `tol`; otherwise the last estimate is returned with `converged = false`.
/// When the dominant eigenvalue `μ` is negative a second pass on `H − μI`
/// also estimates the top of the spectrum.
pub fn lambda_max(
    obj: &dyn Objective,
    params: &[f64],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenEstimate> {
    if iters == 0 {
        return Err(Error::Contract("power iteration needs at least one step".into()));
    }
    let first = power(obj, params, iters, tol, seed, 0.0)?;
    let mut est = EigenEstimate {
        value: first.value,
        iterations: first.iterations,
        converged: first.converged,
        residual: first.residual,
        top: None,
        top_converged: true,
    };
    if first.value < 0.0 {
        let second = power(obj, params, iters, tol, seed ^ 1, first.value)?;
        est.top = Some(second.value);
        est.top_converged = second.converged;
    }
    if !est.converged {
        log::warn!("power iteration did not converge in {iters} steps (residual {})", est.residual);
    }
    Ok(est)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEstimate {
    pub value: f64,
    pub probes: usize,
    /// Standard error of the mean over probes; 0 for a single probe.
    pub std_error: f64,
}

/// Rademacher probe number `p` of the stream selected by `seed`.
pub fn rademacher(dim: usize, seed: u64, p: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed ^ (p as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03), stream::PROBE);
    (0..dim).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Hutchinson estimate `mean_p vₚᵀHvₚ`. Probes are evaluated concurrently
/// and averaged in probe order.
pub fn hessian_trace(obj: &dyn Objective, params: &[f64], probes: usize, seed: u64) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::Contract("trace estimate needs at least one probe".into()));
    }
    let samples = parallel::map_indexed(probes, |p| -> Result<f64> {
        let v = rademacher(params.len(), seed, p);
        Ok(dot(&v, &hvp(obj, params, &v)?))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        value: mean,
        probes,
        std_error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatnessReport {
    pub lambda_max: EigenEstimate,
    pub trace: TraceEstimate,
    /// How the evaluation batch was drawn, as `key=value` pairs.
    pub probe_batch: Vec<(String, String)>,
}

impl FlatnessReport {
    pub fn compute(
        obj: &dyn Objective,
        params: &[f64],
        iters: usize,
        tol: f64,
        probes: usize,
        seed: u64,
    ) -> Result<Self> {
        let lambda_max = lambda_max(obj, params, iters, tol, seed)?;
        let trace = hessian_trace(obj, params, probes, seed)?;
        if lambda_max.value < 0.0 {
            log::warn!("dominant curvature {} is negative: not at a local minimum", lambda_max.value);
        }
        if !lambda_max.value.is_finite() || !trace.value.is_finite() {
            return Err(Error::Numeric("flatness estimate"));
        }
        Ok(Self {
            lambda_max,
            trace,
            probe_batch: Vec::new(),
        })
    }

    /// Some curvature is negative, so the point is not a local minimum.
    pub fn negative_curvature(&self) -> bool {
        self.lambda_max.value < 0.0
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let l = &self.lambda_max;
        let _ = writeln!(s, "lambda_max={}", l.value);
        let _ = writeln!(s, "lambda_max_iterations={}", l.iterations);
        let _ = writeln!(s, "lambda_max_converged={}", l.converged);
        let _ = writeln!(s, "lambda_max_residual={}", l.residual);
        let _ = writeln!(s, "negative_curvature={}", self.negative_curvature());
        let _ = writeln!(s, "lambda_top={}", l.top.unwrap_or(l.value));
        let _ = writeln!(s, "lambda_top_converged={}", l.top_converged);
        let _ = writeln!(s, "trace={}", self.trace.value);
        let _ = writeln!(s, "trace_probes={}", self.trace.probes);
        let _ = writeln!(s, "trace_std_error={}", self.trace.std_error);
        for (k, v) in &self.probe_batch {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values()).map_err(|e| Error::io(path, e))
    }
}
