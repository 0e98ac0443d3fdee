use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

fn eval<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against central finite
/// differences for every entry of every parameter.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// `f` is evaluated twice at the unperturbed point first; any difference
/// is reported as [`Error::NonDeterministic`].
pub fn finite_difference_check<F>(params: &mut ParamSet, f: F, step: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let first = eval(params, &f)?;
    let second = eval(params, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let grads = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| match grads.param(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; params.value(id).len()],
        })
        .collect();

    let mut worst = 0.0f64;
    for id in params.ids().collect::<Vec<_>>() {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + step;
            let plus = eval(params, &f);
            params.value_mut(id).data_mut()[j] = orig - step;
            let minus = eval(params, &f);
            params.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic[id.index()][j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
