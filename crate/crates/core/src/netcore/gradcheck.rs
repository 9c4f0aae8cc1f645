use alloc::string::String;

use super::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many entries per tensor, spread evenly. `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4, max_entries: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compare analytic gradients against central differences.
///
/// `loss` evaluates the loss at the store's current values and adds its
/// gradient into the supplied buffer.
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&ParamStore, &mut Gradients) -> f64,
{
    let mut analytic = store.gradients();
    loss(store, &mut analytic);
    let mut scratch = store.gradients();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, passed: true };
    for pi in 0..store.len() {
        let id = super::ParamId(pi);
        let n = store.get(id).numel();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = store.values(id)[k];
            store.values_mut(id)[k] = orig + opts.h;
            let up = loss(store, &mut scratch);
            store.values_mut(id)[k] = orig - opts.h;
            let down = loss(store, &mut scratch);
            store.values_mut(id)[k] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = analytic.get(id)[k];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    report
}
