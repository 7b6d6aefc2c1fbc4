//! Central finite-difference gradient verification.
//!
//! The checker never inspects tape internals: it compares analytic
//! gradients against (f(θ+ε) − f(θ−ε)) / 2ε where f only runs forward
//! evaluations, so it stays an independent oracle for the backward pass.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};

/// Relative error with an absolute floor so near-zero gradient pairs are
/// compared absolutely instead of blowing up the ratio.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Number of scalar coordinates compared.
    pub checked: usize,
}

/// Build a loss on a fresh recording tape and return its value plus the
/// gradient of every parameter in store order.
pub fn loss_and_grads(
    store: &ParamStore,
    build: impl Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let staged = store.stage(&mut tape);
    let loss = build(&mut tape, &staged)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = staged
        .iter()
        .map(|&r| grads.get_or_zeros(r, tape.value(r).numel()))
        .collect();
    Ok((value, out))
}

/// Forward-only evaluation of the same builder (used for the ±ε probes).
pub fn loss_value(
    store: &ParamStore,
    build: impl Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let staged = store.stage(&mut tape);
    let loss = build(&mut tape, &staged)?;
    Ok(tape.value(loss).item())
}

/// Compare analytic gradients of `build`'s loss against central finite
/// differences over every coordinate of every parameter.
pub fn check_gradients(
    store: &mut ParamStore,
    epsilon: f64,
    build: impl Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grads(store, &build)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for p in 0..store.len() {
        let id = ParamId(p);
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + epsilon;
            let plus = loss_value(store, &build)?;
            store.get_mut(id).data[i] = orig - epsilon;
            let minus = loss_value(store, &build)?;
            store.get_mut(id).data[i] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let err = rel_error(fd, analytic[p][i]);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
