//! Central finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward rules it is checking.

use super::params::{ParamId, ParamStore};

/// Analytic-vs-numeric comparison for one parameter entry.
pub struct GradReport {
    pub id: ParamId,
    pub name: String,
    pub max_rel_error: f64,
}

/// Element-wise relative error with a floor that keeps near-zero gradients
/// from dominating: |a-n| / max(|a|, |n|, 1e-6).
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check analytic gradients (supplied per trainable entry as flat slices)
/// against central differences of `loss_fn` with step `h`.
///
/// `loss_fn` must rebuild its graph from the store on every call.
pub fn check<F>(
    store: &mut ParamStore,
    analytic: &[(ParamId, Vec<f64>)],
    mut loss_fn: F,
    h: f64,
) -> Vec<GradReport>
where
    F: FnMut(&mut ParamStore) -> f64,
{
    let mut reports = Vec::new();
    for (id, grad) in analytic {
        let name = store.entries()[id.0].name.clone();
        let numel = store.value(*id).numel();
        assert_eq!(grad.len(), numel, "gradient length mismatch for {name}");
        let mut max_err: f64 = 0.0;
        for j in 0..numel {
            let orig = store.value(*id).data()[j];
            store.value_mut(*id).data_mut()[j] = orig + h;
            let fp = loss_fn(store);
            store.value_mut(*id).data_mut()[j] = orig - h;
            let fm = loss_fn(store);
            store.value_mut(*id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_error(grad[j], numeric));
        }
        reports.push(GradReport {
            id: *id,
            name,
            max_rel_error: max_err,
        });
    }
    reports
}
