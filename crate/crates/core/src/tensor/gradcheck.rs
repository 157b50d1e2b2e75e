use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// |a − n| / max(|a|, |n|, [`GRAD_CHECK_FLOOR`]).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Max relative error between the tape gradient of `f` at `x` and a central
/// finite difference `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    grad_check_on(Tape::new, f, x, eps)
}

/// Same as [`grad_check`] but builds every tape with `new_tape`, so a caller
/// can install a [`super::Fault`].
pub(crate) fn grad_check_on<F>(
    new_tape: impl Fn() -> Tape + Sync,
    f: F,
    x: &Tensor,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut tape = new_tape();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = new_tape();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut t, v)?;
        Ok(t.item(out))
    };
    let coords: Vec<usize> = (0..x.numel()).collect();
    let numeric = crate::par::try_map(&coords, |&i| {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        Ok((eval(plus)? - eval(minus)?) / (2.0 * eps))
    })?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
