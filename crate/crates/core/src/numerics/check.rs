use super::{DiffArray, Tape};
use crate::error::{Error, Result};

/// Largest relative error between the tape gradient of a scalar function and
/// its central finite differences, `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &DiffArray, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &DiffArray) -> Result<DiffArray>,
{
    let errs = finite_diff_check_many(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}

/// [`finite_diff_check`] over several inputs at once; returns the maximum
/// relative error per input.
pub fn finite_diff_check_many<F>(f: F, xs: &[DiffArray], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[DiffArray]) -> Result<DiffArray>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract("finite_diff_check", format!("invalid step {step}")));
    }
    let mut tape = Tape::new();
    let leaves: Vec<DiffArray> = xs.iter().map(|x| tape.leaf(&x.detach())).collect();
    let out = f(&mut tape, &leaves)?;
    tape.backward(&out)?;

    let eval = |inputs: &[DiffArray]| -> Result<f64> {
        let mut t = Tape::new();
        let leaves: Vec<DiffArray> = inputs.iter().map(|x| t.leaf(x)).collect();
        let y = f(&mut t, &leaves)?;
        let v = y.data()[0];
        if !v.is_finite() {
            return Err(Error::domain("finite_diff_check", "non-finite evaluation"));
        }
        Ok(v)
    };

    let mut worst = Vec::with_capacity(xs.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = tape
            .grad(leaf)
            .ok_or_else(|| Error::contract("finite_diff_check", "missing gradient"))?;
        let mut max_err: f64 = 0.0;
        for i in 0..xs[k].len() {
            let x0 = xs[k].data()[i];
            let mut plus = xs.to_vec();
            plus[k] = xs[k].with_element(i, x0 + step);
            let mut minus = xs.to_vec();
            minus[k] = xs[k].with_element(i, x0 - step);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.data()[i];
            max_err = max_err.max((a - numeric).abs() / a.abs().max(1.0));
        }
        worst.push(max_err);
    }
    Ok(worst)
}
