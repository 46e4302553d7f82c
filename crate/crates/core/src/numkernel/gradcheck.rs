//! Central finite-difference checks of tape gradients.

use super::{Gradients, ParamStore, SeededRng};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h) − f(x − h)) / 2h` for a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

/// Compares `grads` against central differences of `loss` over the
/// parameters of `store`. With `per_param`, only that many randomly chosen
/// coordinates of each matrix are probed; otherwise all of them.
pub fn check_gradients(
    store: &ParamStore,
    grads: &Gradients,
    per_param: Option<usize>,
    rng: &mut SeededRng,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheck> {
    let mut probe = store.clone();
    let mut out = GradCheck::default();
    for id in store.ids().collect::<Vec<_>>() {
        let g = grads.get_or_zeros(store, id);
        let len = g.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < len => (0..k).map(|_| rng.below(len)).collect(),
            _ => (0..len).collect(),
        };
        for k in coords {
            let x = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = x + DEFAULT_STEP;
            let up = loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = x - DEFAULT_STEP;
            let down = loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            out.max_rel_err = out.max_rel_err.max(rel_err(g.data()[k], numeric));
            out.checked += 1;
        }
    }
    Ok(out)
}
