use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so coordinates with vanishing gradient are judged on absolute error.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    Ok((v, tape, out, vars))
}

/// Compare the tape gradient of scalar `f` against central differences with
/// step `h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, tape, out, vars) = evaluate(&f, params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = 0.0_f64;
    let mut worst = (0, 0);
    let mut coordinates = 0;
    for p in 0..params.len() {
        for c in 0..params[p].len() {
            let orig = params[p].data()[c];
            probe[p].data_mut()[c] = orig + h;
            let plus = evaluate(&f, &probe)?.0;
            probe[p].data_mut()[c] = orig - h;
            let minus = evaluate(&f, &probe)?.0;
            probe[p].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (p, c);
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        tol,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        // f(x) = xᵀ·M·x + c·x with M = diag(1,2,3)
        let x = Tensor::matrix(1, 3, vec![0.4, -1.3, 2.2]).unwrap();
        let report = grad_check(
            |t, v| {
                let m = t.leaf(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]])?);
                let mx = t.matmul(v[0], m)?;
                let q = t.dot(mx, v[0])?;
                let c = t.leaf(Tensor::matrix(1, 3, vec![0.5, 1.0, -2.0])?);
                let l = t.dot(c, v[0])?;
                t.add(q, l)
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }
}
