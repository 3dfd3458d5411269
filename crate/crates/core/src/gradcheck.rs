//! Central-difference verification of tape gradients.
//!
//! Hard-thresholded gates are piecewise constant, so a naive finite
//! difference through them is zero. The checker records the straight-through
//! offsets `hard - p` at the base point and replays them frozen while
//! probing, which makes the probed function's derivative the STE identity.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − fd| / max(1, |analytic|)` over all probed elements.
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst element.
    pub worst: Option<(String, usize)>,
    pub probed: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many evenly strided elements per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_per_param: None,
        }
    }
}

/// Checks `f` with respect to every element of `params`; returns the max
/// relative error.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), ParamGroup::Backbone, t.clone()))
        .collect();
    let report = grad_check_store(
        &mut store,
        &ids,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            f(g, &vars)
        },
        GradCheckOptions { step: h, max_per_param: None },
    )?;
    Ok(report.max_rel_error)
}

/// Checks a graph built over a [`ParamStore`] with respect to `ids`.
pub fn grad_check_store<F>(store: &mut ParamStore, ids: &[ParamId], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let saved: Vec<bool> = store.ids().map(|id| store.get(id).requires_grad()).collect();
    store.set_trainable(ids);

    let (analytic, offsets) = {
        let mut g = Graph::new(store);
        g.record_ste_offsets();
        let loss = f(&mut g)?;
        let offsets = g.take_ste_offsets();
        let (pg, _) = g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| pg.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()]))
            .collect();
        (analytic, offsets)
    };

    store.set_trainable(&[]);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        g.replay_ste_offsets(offsets.clone());
        let loss = f(&mut g)?;
        Ok(g.value(loss)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        probed: 0,
    };
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        let stride = opts.max_per_param.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(stride) {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + opts.step;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig - opts.step;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * opts.step);
            let a = analytic[k][e];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            report.probed += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.name(id).to_string(), e));
            }
        }
    }

    for (id, rg) in store.ids().zip(saved) {
        store.get_mut(id).set_requires_grad(rg);
    }
    Ok(report)
}
