use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `name[flat_index]` of the worst element.
    pub worst_parameter: String,
    /// Max relative error per parameter tensor.
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub checked_elements: usize,
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Check at most this many evenly spaced elements per tensor; `None` checks all.
    pub max_elements_per_param: Option<usize>,
}

fn selected_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            let c = c.max(1);
            (0..c).map(|i| i * len / c).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// Relative error per element is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    eps: f64,
    opts: &GradCheckOptions,
    loss: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = params.clone();
    work.set_requires_grad(true);
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut g = Graph::new();
        let bound = work.bind(&mut g);
        let out = loss(&mut g, &bound)?;
        g.value(out)
            .check_finite(|| "loss in gradient check".to_string())?;
        let grads = g.backward(out)?;
        bound
            .iter()
            .map(|(name, v)| {
                let n = g.value(v).len();
                let grad = grads
                    .get(v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; n]);
                (name.to_string(), grad)
            })
            .collect()
    };
    work.set_requires_grad(false);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let out = loss(&mut g, &bound)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::non_finite("loss in gradient check"));
        }
        Ok(v)
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        per_parameter_errors: BTreeMap::new(),
        checked_elements: 0,
        worst_pair: (0.0, 0.0),
    };
    let names: Vec<String> = work.names().map(str::to_string).collect();
    for name in names {
        let len = work.get(&name)?.len();
        let mut worst = 0.0f64;
        for idx in selected_indices(len, opts.max_elements_per_param) {
            let orig = work.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[&name][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
            if report.worst_parameter.is_empty() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = format!("{name}[{idx}]");
                report.worst_pair = (a, numeric);
            }
            report.checked_elements += 1;
        }
        report.per_parameter_errors.insert(name, worst);
    }
    Ok(report)
}
