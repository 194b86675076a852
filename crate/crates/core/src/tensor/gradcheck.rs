use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, multiplied by `max(1, |f|)`.
/// Central-difference roundoff grows with `|f|`, so gradients below this
/// floor are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(f: &F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences `(f(p + h) - f(p - h)) / 2h`, element by element.
///
/// `f` receives one leaf per entry of `params`, in order.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: step h must be > 0, got {h}"
        )));
    }
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item()?;
    let grads = g.backward(out)?;
    let floor = REL_ERROR_FLOOR * value.abs().max(1.0);

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = work[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[p].1.data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[p].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric, floor));
        }
        entries.push(GradCheckEntry {
            name: params[p].0.clone(),
            numel: analytic.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport {
        h,
        tolerance,
        entries,
    })
}
