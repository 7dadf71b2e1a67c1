//! Central finite differences over a [`ParamSet`].
//!
//! Only forward evaluations are used, so the result is independent of the
//! tape's backward rules.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Step used by the tests in this workspace.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every parameter.
pub fn numeric_gradients<F>(params: &ParamSet, step: f64, mut f: F) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map(Tensor::len).unwrap_or(0);
        let mut g = Tensor::zeros(params.get(&name).expect("listed").shape());
        for i in 0..n {
            let orig = work.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries. Parameters
/// missing from `analytic` are compared against zero.
pub fn max_relative_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
    floor: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, num) in numeric {
        let zeros;
        let ana = match analytic.get(name) {
            Some(a) => a,
            None => {
                zeros = Tensor::zeros(num.shape());
                &zeros
            }
        };
        for (a, n) in ana.data().iter().zip(num.data()) {
            let denom = a.abs().max(n.abs()).max(floor);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}
