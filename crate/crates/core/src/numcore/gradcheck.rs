//! Central finite-difference check of reverse-mode gradients.
//!
//! The check uses only forward evaluations, so it stays independent of the
//! backward kernels it audits. Coordinates whose perturbation flips any
//! min/max selection are skipped as ties.

use super::graph::{Bindings, Graph, NodeId};
use super::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub skipped_ties: usize,
}

fn bind_all<'a>(inputs: &'a ParamStore, params: &'a ParamStore) -> Bindings<'a> {
    let mut b = Bindings::new();
    b.extend(inputs.iter().map(|(k, v)| (k.clone(), v)));
    b.extend(params.iter().map(|(k, v)| (k.clone(), v)));
    b
}

/// Compares the analytic gradient of `loss` against central differences with
/// step `h`, perturbing every parameter coordinate in `params`.
pub fn check_gradients(
    graph: &Graph,
    inputs: &ParamStore,
    params: &ParamStore,
    loss: NodeId,
    h: f64,
) -> Result<GradCheckReport> {
    let (analytic, base_sel) = {
        let fwd = graph.forward(&bind_all(inputs, params))?;
        (fwd.backward(loss)?, fwd.selections_snapshot())
    };

    let mut work = params.clone();
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
    let mut max_abs: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for (name, tensor) in params {
        for k in 0..tensor.numel() {
            let orig = tensor.data()[k];
            let mut eval_at = |value: f64| -> Result<(f64, Vec<Vec<usize>>)> {
                work.get_mut(name).expect("param present").data_mut()[k] = value;
                let fwd = graph.forward(&bind_all(inputs, &work))?;
                Ok((fwd.value(loss).item()?, fwd.selections_snapshot()))
            };
            let (lp, sp) = eval_at(orig + h)?;
            let (lm, sm) = eval_at(orig - h)?;
            work.get_mut(name).expect("param present").data_mut()[k] = orig;
            if sp != base_sel || sm != base_sel {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[name].data()[k];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt());
    let rel_error = if denom < 1e-12 {
        diff_sq.sqrt()
    } else {
        diff_sq.sqrt() / denom
    };
    Ok(GradCheckReport {
        rel_error,
        max_abs_error: max_abs,
        checked,
        skipped_ties: skipped,
    })
}
