//! Central-difference verification of tape gradients.

use crate::error::{DflatError, Result};
use crate::harness::SyntheticSample;
use crate::model::Model;
use crate::params::ParamId;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Largest model the checker will perturb scalar by scalar.
pub const PARAM_LIMIT: usize = 5000;
pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Times the step is divided by 10 when a perturbation flips a ReLU.
pub const KINK_RETRIES: usize = 3;
/// Gradients smaller than this in magnitude are compared absolutely.
/// Round-off in a central difference of an O(1) loss at step 1e-4 is about
/// 1e-12, so this floor sits well above it.
pub const FLOOR: f64 = 1e-7;

/// Worst disagreement over the scalars of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub worst_relative: f64,
    pub analytic: f64,
    pub numeric: f64,
    /// Scalars whose every tried step straddled a ReLU kink; these have no
    /// meaningful central difference and are left out of the worst error.
    pub kinks: usize,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        self.worst_relative <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn loss_value(model: &Model, sample: &SyntheticSample) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let loss = model.loss_on(&mut tape, &sample.image, &sample.mask)?;
    Ok((tape.value(loss).data()[0], tape.relu_pattern()))
}

/// Central difference for one scalar, or `None` if every step tried
/// changes which ReLUs are active.
fn central_difference(model: &mut Model, sample: &SyntheticSample, id: ParamId, k: usize, base: &[bool]) -> Result<Option<f64>> {
    let orig = model.store().value(id).data()[k];
    let mut step = STEP;
    let mut result = None;
    for _ in 0..=KINK_RETRIES {
        model.store_mut().value_mut(id).data_mut()[k] = orig + step;
        let (plus, pat_plus) = loss_value(model, sample)?;
        model.store_mut().value_mut(id).data_mut()[k] = orig - step;
        let (minus, pat_minus) = loss_value(model, sample)?;
        model.store_mut().value_mut(id).data_mut()[k] = orig;
        if pat_plus == base && pat_minus == base {
            result = Some((plus - minus) / (2.0 * step));
            break;
        }
        step /= 10.0;
    }
    Ok(result)
}

/// Compares backward-pass gradients with central differences for every
/// scalar of every parameter. `softmax_fault` corrupts the backward pass and
/// exists only to prove the checker can fail.
pub fn check(model: &mut Model, sample: &SyntheticSample, softmax_fault: Option<f64>) -> Result<Vec<ParamCheck>> {
    let total = model.store().total_scalars();
    if total > PARAM_LIMIT {
        return Err(DflatError::config(format!(
            "{total} parameters exceed the gradient-check limit of {PARAM_LIMIT}; \
             shrink height/width/channels/layers (the tiny config has about 2,500)"
        )));
    }
    let mut tape = Tape::new();
    if let Some(f) = softmax_fault {
        tape.inject_softmax_fault(f);
    }
    let loss = model.loss_on(&mut tape, &sample.image, &sample.mask)?;
    let base = tape.relu_pattern();
    // A parameter bound at several tape sites appears once per site.
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut analytic: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(model.store().value(id).dims())).collect();
    for (id, g) in tape.gradients(loss)? {
        analytic[id.index()].add_assign(&g);
    }
    let mut out = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let mut worst = ParamCheck {
            name: model.store().name(id).to_string(),
            scalars: grad.len(),
            worst_relative: 0.0,
            analytic: 0.0,
            numeric: 0.0,
            kinks: 0,
        };
        for k in 0..grad.len() {
            let Some(numeric) = central_difference(model, sample, id, k, &base)? else {
                worst.kinks += 1;
                continue;
            };
            let a = grad.data()[k];
            let rel = relative_error(a, numeric);
            if rel > worst.worst_relative || rel.is_nan() {
                worst.worst_relative = rel;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        out.push(worst);
    }
    Ok(out)
}
