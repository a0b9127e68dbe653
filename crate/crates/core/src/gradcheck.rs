//! Central finite differences for validating reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Evaluates `f` as a scalar function of one tensor input by building a
/// fresh tape around `x`.
fn eval<F>(f: &F, x: &Tensor) -> Result<(Tape, NodeId, NodeId)>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::invalid("grad_check requires a scalar-valued function"));
    }
    Ok((tape, leaf, out))
}

/// Central finite-difference gradient of `f` at `x` with the given step.
pub fn finite_diff_grad<F>(f: &F, x: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {step} must be > 0")));
    }
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += step;
        let (tape_p, _, out_p) = eval(f, &xp)?;
        let fp = tape_p.value(out_p).scalar_value();

        let mut xm = x.clone();
        xm.data_mut()[i] -= step;
        let (tape_m, _, out_m) = eval(f, &xm)?;
        let fm = tape_m.value(out_m).scalar_value();

        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::non_finite(format!(
                "finite-difference evaluation at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences and returns the largest relative error over all coordinates.
///
/// Relative error uses denominator `max(|analytic|, |numeric|, 1e-12)`.
/// Errors if any function evaluation is non-finite.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let (tape, leaf, out) = eval(&f, x)?;
    if !tape.value(out).scalar_value().is_finite() {
        return Err(Error::non_finite("grad_check function value"));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.wrt_dense(leaf, x.numel());
    let numeric = finite_diff_grad(&f, x, step)?;

    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let denom = a.abs().max(n.abs()).max(1e-12);
        worst = worst.max((a - n).abs() / denom);
    }
    Ok(worst)
}
