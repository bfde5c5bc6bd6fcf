use crate::diffcore::{Gradient, ParamVector};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of `f` at `p`, one coordinate
/// at a time.
pub fn finite_diff_gradient<F>(f: F, p: &ParamVector, h: f64) -> Result<Gradient>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let base = p.flatten();
    let mut probe = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&p.unflatten(&probe)?)?;
        probe[i] = base[i] - h;
        let minus = f(&p.unflatten(&probe)?)?;
        probe[i] = base[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    p.unflatten(&grad)
}
