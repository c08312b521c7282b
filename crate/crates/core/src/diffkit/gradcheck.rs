use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Largest relative disagreement between tape gradients and central finite
/// differences of `f` at `point`:
/// `max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8)`.
///
/// `f` must be smooth near `point`. Kinks (`|x|` at 0, an argmax flipping
/// between `x - h` and `x + h`) make the comparison meaningless.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let tensor = Tensor::vector(point.to_vec());
    grad_check_tensors(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(&tensor),
        h,
    )
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_tensors<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut worst: f64 = 0.0;
    let mut scratch = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for (i, a) in analytic.iter().enumerate() {
            let orig = scratch[k].values()[i];
            scratch[k].values_mut()[i] = orig + h;
            let up = eval(&scratch)?;
            scratch[k].values_mut()[i] = orig - h;
            let down = eval(&scratch)?;
            scratch[k].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
