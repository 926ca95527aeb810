//! Central finite-difference checks of analytic gradients.

use crate::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Relative error `|a-n| / max(|a|,|n|,floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic parameter gradients of the scalar built by `build`
/// against central differences with step `h`, on the given `(param, index)`
/// entries.
pub fn check_params<F>(store: &ParamStore, entries: &[(ParamId, usize)], h: f64, floor: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let mut work = store.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for &(id, idx) in entries {
        let analytic = grads.param(id).map(|gr| gr[idx]).unwrap_or(0.0);
        let orig = work.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + h;
        let plus = eval_scalar(&work, &build);
        work.get_mut(id).data_mut()[idx] = orig - h;
        let minus = eval_scalar(&work, &build);
        work.get_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = rel_error(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), idx, analytic, numeric));
        }
    }
    report
}

fn eval_scalar<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = build(&mut g, store);
    g.value(out).data()[0]
}

/// Every `(param, index)` pair of trainable parameters, or an evenly strided
/// subset of at most `max_per_param` entries per parameter.
pub fn sample_entries(store: &ParamStore, max_per_param: usize) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        let stride = (n / max_per_param.max(1)).max(1);
        out.extend((0..n).step_by(stride).take(max_per_param).map(|i| (id, i)));
    }
    out
}
