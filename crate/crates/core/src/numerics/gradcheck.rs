//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`check_gradient`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where `max_rel_err` was observed.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of scalar `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn check_gradient<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_gradient_with(f, x, h, tol, |tape, loss, xv| {
        tape.backward(loss)?;
        Ok(tape
            .grad(xv)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]))
    })
}

/// As [`check_gradient`], with the analytic gradient supplied by `analytic`
/// instead of the tape. Used to exercise the checker itself.
pub fn check_gradient_with<F, G>(
    f: F,
    x: &Tensor<f64>,
    h: f64,
    tol: f64,
    analytic: G,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    G: FnOnce(&mut Tape<f64>, Var, Var) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Input(format!("step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Shape("gradient check needs a scalar function".into()));
    }
    let analytic = analytic(&mut tape, loss, xv)?;

    let eval = |data: Vec<f64>, index: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut t, v)?;
        let val = t.scalar(out);
        if !val.is_finite() {
            return Err(Error::Probe { index });
        }
        Ok(val)
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let d = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let err = relative_error(analytic[i], d);
        if err > max_rel_err || !err.is_finite() {
            max_rel_err = err;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        pass: max_rel_err <= tol,
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
