use super::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central-difference gradient estimate for every trainable scalar. Frozen
/// parameters get zero grids, matching the contract of `Tape::backward`.
pub fn finite_diff_grad(
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    step: f64,
) -> Result<Gradients> {
    if !(step > 0.0) {
        return Err(Error::Domain(alloc::format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut work = params.clone();
    let mut grads = Gradients::zeros_like(params);
    for id in params.ids() {
        if !params.is_trainable(id) {
            continue;
        }
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = loss_fn(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = loss_fn(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            grads.get_mut(id).data_mut()[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

pub fn max_relative_error(a: &Gradients, b: &Gradients) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, ga), (_, gb))| ga.data().iter().zip(gb.data()).map(|(&x, &y)| relative_error(x, y)))
        .fold(0.0, f64::max)
}
