//! Central finite-difference checks against tape gradients.

use crate::{ParamId, ParamStore};

/// One sampled coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Perturbs `store[param][index]` by `+-eps` and evaluates `loss` twice.
/// The store is restored afterwards.
pub fn central_difference(
    store: &mut ParamStore<f64>,
    param: ParamId,
    index: usize,
    eps: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let orig = store.value(param).data[index];
    store.value_mut(param).data[index] = orig + eps;
    let up = loss(store);
    store.value_mut(param).data[index] = orig - eps;
    let down = loss(store);
    store.value_mut(param).data[index] = orig;
    (up - down) / (2.0 * eps)
}
