//! Central finite-difference verification of the backward rules.
//!
//! Runs in inference mode (dropout off, batchnorm on running statistics)
//! with 64-bit storage so rounding does not swamp the difference quotient.

use super::network::{Mode, Network};
use super::optim::{loss_and_grad, Loss};
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter entry and element index holding the worst error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|)`, falling back to the absolute difference when
/// both values are below `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn loss_at(network: &Network, weights: &WeightStore<f64>, x: &Tensor<f64>, targets: &[f64], loss: Loss) -> Result<f64> {
    let trace = network.forward(weights, x, Mode::Inference)?;
    Ok(loss_and_grad(network, &trace, targets, loss)?.0)
}

/// Compares the analytic gradient of every trainable parameter against the
/// central difference `(L(w+h) - L(w-h)) / 2h`.
pub fn gradient_check(
    network: &Network,
    weights: &WeightStore<f64>,
    x: &Tensor<f64>,
    targets: &[f64],
    loss: Loss,
    h: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let trace = network.forward(weights, x, Mode::Inference)?;
    let (_, out_grad) = loss_and_grad(network, &trace, targets, loss)?;
    let analytic = network.backward(weights, &trace, out_grad)?;

    let mut probe = weights.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in network.trainable_params() {
        let grad = analytic
            .get(&p.name)
            .ok_or_else(|| Error::MissingWeight(format!("gradient of {}", p.name)))?;
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.require(&p.name)?.data()[i];
            probe.get_mut(&p.name).expect("present").data_mut()[i] = orig + h;
            let plus = loss_at(network, &probe, x, targets, loss)?;
            probe.get_mut(&p.name).expect("present").data_mut()[i] = orig - h;
            let minus = loss_at(network, &probe, x, targets, loss)?;
            probe.get_mut(&p.name).expect("present").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(report)
}
