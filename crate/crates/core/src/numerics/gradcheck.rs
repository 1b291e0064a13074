//! Central finite-difference gradient checking.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; the error is the worst
/// coordinate across all of them.
pub fn grad_check_many<F>(f: F, xs: &[Array], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Array> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let eval = |inputs: &[Array]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            inputs[which].data_mut()[k] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[which].data_mut()[k] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[which].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
