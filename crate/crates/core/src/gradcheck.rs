//! Central finite-difference checks for analytic gradients.
//!
//! These helpers re-run a forward closure with perturbed inputs and compare the
//! numeric slope with the gradient returned by [`Graph::backward`]. They are
//! used by the unit tests and the acceptance suite.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Indices probed for a tensor with `n` entries: every entry when small,
/// otherwise an evenly strided subset of `max_probes` entries.
fn probe_indices(n: usize, max_probes: usize) -> Vec<usize> {
    if n <= max_probes {
        (0..n).collect()
    } else {
        let stride = n as f64 / max_probes as f64;
        (0..max_probes).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
    }
}

/// Maximum relative error between analytic and numeric gradients of `f`
/// with respect to each of `inputs` (all entries are probed).
pub fn check_leaves(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    check_inputs(&ParamStore::new(), inputs, f)
}

/// Like [`check_leaves`], with parameters of `store` available to `f`
/// (held fixed).
pub fn check_inputs(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let bw = g.backward(out);

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = bw.wrt(*v).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let plus = eval(&xs);
            xs[k].data_mut()[i] = orig - STEP;
            let minus = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Outcome of a parameter gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compare analytic parameter gradients of `f` with central differences for
/// each parameter in `ids`, probing at most `max_probes` entries per tensor.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    max_probes: usize,
    f: impl Fn(&mut Graph) -> Var,
) -> Vec<ParamCheck> {
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out).into_params()
    };
    let mut work = store.clone();
    let eval = |work: &ParamStore| {
        let mut g = Graph::new(work);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut report = Vec::new();
    for &id in ids {
        let n = store.get(id).len();
        let zero = Tensor::zeros(store.get(id).shape());
        let analytic = grads.get(id).unwrap_or(&zero).clone();
        let mut worst: f64 = 0.0;
        let probes = probe_indices(n, max_probes);
        for &i in &probes {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.push(ParamCheck { name: store.entry(id).name.clone(), max_rel_error: worst, probes: probes.len() });
    }
    report
}

/// Largest error across a report (0 for an empty report).
pub fn worst(report: &[ParamCheck]) -> f64 {
    report.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}
