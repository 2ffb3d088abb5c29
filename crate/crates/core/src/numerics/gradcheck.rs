//! Central finite-difference oracle for backward passes.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::NDArray;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            coordinates: 0,
        }
    }

    fn observe(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.coordinates += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some((name.to_string(), index));
        }
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}

/// Checks the gradient of `f` with respect to every trainable parameter in `store`.
///
/// `f` must be deterministic: any dropout randomness has to be re-seeded identically
/// on every call.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    finite(loss.item())?;
    let analytic = tape.backward(loss).for_params(store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let v = f(&t, s)?.item();
        finite(v)
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::new();
    for id in store.trainable_ids() {
        let name = store.get(id).name.clone();
        let n = store.get(id).value.len();
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            report.observe(&name, i, a, numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to free input arrays.
pub fn grad_check_inputs<F>(inputs: &[NDArray], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    finite(loss.item())?;
    let grads = tape.backward(loss);
    let analytic: Vec<NDArray> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.wrt(*v).cloned().unwrap_or_else(|| NDArray::zeros(x.shape())))
        .collect();

    let eval = |xs: &[NDArray]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        finite(f(&t, &vs)?.item())
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.observe(&format!("input{k}"), i, analytic[k].data()[i], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
