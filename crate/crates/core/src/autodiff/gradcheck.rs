use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns `max |analytic - numeric| / max(1, |numeric|)` over
/// every coordinate of `x`.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(mut f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |inputs: &[Tensor], track: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("function value {value} is not finite")));
        }
        if !track {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(xs, true)?;
    let mut inputs = xs.to_vec();
    let mut worst = 0.0f64;
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + step;
            let (plus, _) = eval(&inputs, false)?;
            inputs[t].data_mut()[i] = orig - step;
            let (minus, _) = eval(&inputs, false)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[t][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
