//! Finite-difference gradient checking.
//!
//! Used by the test suite to certify every differentiable primitive and
//! the composed networks: analytic gradients from the tape are compared
//! against central differences of the re-evaluated loss.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep over every input element.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen, with denominator
    /// `max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
}

/// Compares analytic gradients of `f` against central finite
/// differences with step `h`, for every element of every input.
///
/// `f` rebuilds the computation from scratch on each call and must be
/// deterministic: the same input values must produce the same scalar
/// loss (stochastic pieces like dropout have to derive their randomness
/// from a fixed seed inside the closure).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check needs at least one input".into(),
        ));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive and finite, got {h}"
        )));
    }

    // Analytic pass: all inputs become trainable leaves.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss)?.numel() != 1 {
        return Err(Error::InvalidArgument(
            "gradient check needs a scalar loss".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v))
        .collect::<Result<_>>()?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<_>>()?;
        let l = f(&mut t, &vs)?;
        t.value(l)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[ii].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[ii].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ii].data()[j];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ii, j);
            }
        }
    }
    Ok(report)
}
