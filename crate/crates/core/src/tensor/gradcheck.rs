//! Central finite-difference gradient checking.

use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Smallest magnitude used as the denominator of the relative error, so
/// that gradients that are numerically zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `h` over every scalar in `store`, returning the
/// largest `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn max_relative_error(
    store: &mut ParamStore,
    f: &dyn Fn(&mut Graph) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    let ids: Vec<_> = store.ids().collect();
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = f(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for id in ids {
        for k in 0..store.value(id).numel() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
