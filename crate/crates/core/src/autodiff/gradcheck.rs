use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Compares the reverse-mode gradient of a scalar loss with central
/// differences, entry by entry, for one parameter.
///
/// `build` must construct the loss on a fresh tape from the current values
/// in the store; it is called once for the analytic gradient and twice per
/// entry. Returns the maximum over entries of
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The check is only meaningful on the differentiable contract of the
/// loss. A path through [`Tape::stop_gradient`] has zero analytic gradient
/// by definition while perturbing its input still moves the value, so such
/// paths must be excluded from the function under test.
pub fn finite_diff_check<F>(store: &mut ParamStore, param: ParamId, h: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let saved_grads: Vec<_> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic = store.grad(param).clone();
    for ((_, p), g) in store.params_mut().iter_mut().enumerate().zip(saved_grads) {
        p.grad = g;
    }

    let n = analytic.len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = store.value(param).as_slice()[i];
        store.value_mut(param).as_mut_slice()[i] = orig + h;
        let plus = eval(store, &mut build)?;
        store.value_mut(param).as_mut_slice()[i] = orig - h;
        let minus = eval(store, &mut build)?;
        store.value_mut(param).as_mut_slice()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn eval<F>(store: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    Ok(tape.scalar(loss))
}
