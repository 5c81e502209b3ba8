use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Compares tape gradients of `f` at `theta` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, elementwise over every tensor in `theta`.
///
/// Returns the maximum relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, theta: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be > 0, got {h}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = theta
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(theta)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut params: Vec<Tensor> = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            params[i].data_mut()[j] = orig + h;
            let plus = eval(&params)?;
            params[i].data_mut()[j] = orig - h;
            let minus = eval(&params)?;
            params[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
