//! Central-difference gradient checking.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors. Gradients smaller than this are
/// compared by absolute error, since central differences cannot resolve them
/// relative to the function value.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(p + h) - f(p - h)) / 2h`, entry by entry.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteValue(format!("f(p) = {value}")));
    }
    let mut probe = params.clone();
    let mut per_param = BTreeMap::new();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut checked = 0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::len);
        let zeros = Tensor::zeros(params.get(&name).unwrap().shape());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let mut worst_here: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let (plus, _) = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let (minus, _) = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteValue(format!("{name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[i], numeric);
            checked += 1;
            worst_here = worst_here.max(err);
            if err > max_rel_error {
                max_rel_error = err;
                worst = Some((name.clone(), i));
            }
        }
        per_param.insert(name, worst_here);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        worst,
        tolerance,
        checked,
    })
}
