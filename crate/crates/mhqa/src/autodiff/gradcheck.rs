//! Finite-difference validation of analytic gradients.
//!
//! The checker never looks at how the loss was built; it only re-evaluates
//! the closure at perturbed parameter values. That keeps it an independent
//! oracle for whatever graph the closure records. Derivatives use the
//! fourth-order central stencil, whose O(eps^4) truncation lets eps sit well
//! above the cancellation floor: with eps around 1e-3 the numeric estimate
//! is good to roughly 1e-12 absolute even where the true gradient vanishes.

use thiserror::Error;

use super::params::ParamStore;
use super::tape::{Tape, TensorId};
use super::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss function is not deterministic: {0} vs {1} at the same point")]
    NonDeterministic(f64, f64),
    #[error("loss is not finite at the base point")]
    NonFiniteLoss,
    #[error(transparent)]
    Autodiff(#[from] super::tape::AutodiffError),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    /// Parameter name, coordinate, analytic and numeric value at the worst
    /// coordinate, kept for diagnostics.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare backward-pass gradients with central differences over every
/// coordinate of every parameter in the store.
///
/// `build` must record the loss for the current store contents and return
/// the tape together with the loss node. It must be deterministic; this is
/// verified by evaluating the base point twice and comparing bitwise.
pub fn grad_check<F>(
    store: &mut ParamStore,
    epsilon: f64,
    mut build: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamStore) -> (Tape, TensorId),
{
    let eval = |store: &ParamStore, build: &mut F| -> f64 {
        let (tape, loss) = build(store);
        tape.value(loss).item()
    };

    let base_a = eval(store, &mut build);
    let base_b = eval(store, &mut build);
    if !base_a.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }
    if base_a.to_bits() != base_b.to_bits() {
        return Err(GradCheckError::NonDeterministic(base_a, base_b));
    }

    // Analytic pass.
    let (mut tape, loss) = build(store);
    tape.backward(loss)?;
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        let grad = tape
            .bound_grads()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros_like(store.get(&name)));
        analytic.push((name, grad));
    }
    drop(tape);

    let mut report = GradCheckReport {
        coords: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    for (name, grad) in &analytic {
        for coord in 0..grad.len() {
            let origin = store.get(name).at(coord);
            let probe = |offset: f64, store: &mut ParamStore, build: &mut F| {
                store.get_mut(name).data_mut()[coord] = origin + offset * epsilon;
                eval(store, build)
            };
            let p1 = probe(1.0, store, &mut build);
            let m1 = probe(-1.0, store, &mut build);
            let p2 = probe(2.0, store, &mut build);
            let m2 = probe(-2.0, store, &mut build);
            store.get_mut(name).data_mut()[coord] = origin;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let a = grad.at(coord);
            let err = rel_err(a, numeric);
            report.coords += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), coord, a, numeric));
            }
        }
    }
    Ok(report)
}
