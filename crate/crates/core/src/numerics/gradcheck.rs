use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to finite-difference noise do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every element of every parameter
/// (at most `max_per_param` evenly spaced elements each, if given).
pub fn grad_check<Fun>(
    store: &ParamStore<f64>,
    eps: f64,
    floor: f64,
    max_per_param: Option<usize>,
    f: Fun,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let base = g.scalar(out);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|id| g.param_grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).numel()]))
        .collect();
    drop(g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, s)?;
        let v = g.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for id in 0..store.len() {
        let n = store.get(id).numel();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic[id][i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
