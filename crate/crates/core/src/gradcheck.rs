//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Worst discrepancy found for one input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl InputReport {
    fn empty() -> Self {
        InputReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {eps} outside [1e-8, 1e-4]"
        )));
    }
    Ok(())
}

/// Compares the tape gradient of a scalar function of one tensor against
/// central differences and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let reports = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(reports[0].max_rel_error)
}

/// Multi-input variant of [`grad_check`]: one report per input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<InputReport>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|v| grads.get(*v).cloned().expect("leaf gradient"))
            .collect::<Vec<_>>()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.data()[0])
    };

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut rep = InputReport::empty();
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            if err > rep.max_rel_error || j == 0 {
                rep = InputReport {
                    max_rel_error: err.max(rep.max_rel_error),
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(rep);
    }
    Ok(reports)
}
