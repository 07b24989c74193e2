use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares a supplied analytic gradient against central differences.
pub fn grad_check_with(
    value: impl Fn(&Tensor) -> Result<f64>,
    analytic: impl Fn(&Tensor) -> Result<Vec<f64>>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let numeric = numeric_gradient(&value, x, eps)?;
    let exact = analytic(x)?;
    if exact.len() != numeric.len() {
        return Err(Error::shape(format!(
            "analytic gradient has {} entries, expected {}",
            exact.len(),
            numeric.len()
        )));
    }
    Ok(max_relative_error(&exact, &numeric))
}

/// Checks the tape gradient of a scalar-valued `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let run = |input: &Tensor, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let leaf = if grad {
            tape.leaf(&input.clone().with_grad())
        } else {
            tape.constant(input)
        };
        let out = f(&mut tape, leaf)?;
        let v = tape.item(out)?;
        if !grad {
            return Ok((v, Vec::new()));
        }
        tape.backward(out)?;
        Ok((v, tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_default()))
    };
    grad_check_with(|t| run(t, false).map(|r| r.0), |t| run(t, true).map(|r| r.1), x, eps)
}
