//! Central finite-difference gradient checks.
//!
//! The finite-difference side only ever evaluates forward passes, so it is
//! independent of the reverse-mode code it is checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = what();
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss` w.r.t. every trainable parameter of
/// `store` against central differences with step `h`.
///
/// `loss` must build a scalar on the given graph from the current parameter
/// values. Parameter values are restored afterwards.
pub fn check_params<F>(store: &mut ParamStore, mut loss: F, h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    g.backward(l)?;
    g.export_grads(store)?;
    let analytic: Vec<(usize, Option<Tensor>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id.index(), p.grad.clone()))
        .collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(store, &mut g)?;
        g.value(l).item()
    };

    let mut report = GradCheckReport::empty();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for (id, (_, grad)) in ids.into_iter().zip(analytic) {
        let n = store.tensor(id).len();
        for i in 0..n {
            let orig = store.tensor(id).data()[i];
            store.value_mut(id)[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id)[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |t| t.data()[i]);
            let err = rel_err(a, numeric, floor);
            report.record(err, || format!("{}[{i}]", store.get(id).name));
        }
    }
    Ok(report)
}

/// Same check for gradients w.r.t. input tensors of a graph function.
pub fn check_inputs<F>(inputs: &[Tensor], mut f: F, h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    g.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        g.value(l).item()
    };

    let mut report = GradCheckReport::empty();
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(rel_err(a, numeric, floor), || format!("input{k}[{i}]"));
        }
    }
    Ok(report)
}
