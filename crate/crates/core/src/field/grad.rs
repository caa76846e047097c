//! Reverse-mode gradients of ray-rendering losses with respect to every
//! model parameter.

use super::{FieldModel, GradientVector, Rgb, COLOR_CHANNELS};
use crate::error::{MapError, Result};
use crate::render::{backprop_render, trace_ray, Ray, RayTrace, SampleSet};

/// Adjoint of one ray: sensitivities of the loss to its rendered colour and
/// depth, plus direct sensitivities to each sample's SDF value.
#[derive(Debug, Clone, PartialEq)]
pub struct RayAdjoint {
    pub d_color: Rgb,
    pub d_depth: f64,
    pub d_sdf: Vec<f64>,
}

impl RayAdjoint {
    fn zeros(samples: usize) -> Self {
        Self {
            d_color: [0.0; COLOR_CHANNELS],
            d_depth: 0.0,
            d_sdf: vec![0.0; samples],
        }
    }
}

/// A differentiable scalar over the rendered outputs of a set of rays.
pub trait RayBatchLoss {
    /// Rays and their sample depths, in order.
    fn rays(&self) -> &[Ray];
    fn samples(&self) -> &[SampleSet];
    fn truncation(&self) -> f64;

    /// Loss value of the traced rays; writes each ray's adjoint.
    fn ray_terms(&self, traces: &[RayTrace], adjoints: &mut [RayAdjoint]) -> Result<f64>;

    /// Terms defined directly on the parameter vector, accumulating their
    /// gradient into `grad`.
    fn param_terms(&self, _model: &FieldModel, _grad: &mut [f64]) -> Result<f64> {
        Ok(0.0)
    }
}

pub(crate) fn trace_all<L: RayBatchLoss + ?Sized>(model: &FieldModel, loss: &L) -> Vec<RayTrace> {
    let tr = loss.truncation();
    loss.rays()
        .iter()
        .zip(loss.samples())
        .map(|(ray, samples)| trace_ray(model, ray, samples, tr))
        .collect()
}

/// Loss value and its gradient with respect to the model parameters.
///
/// Grid entries never touched by any sample receive exact zeros.
pub fn grad_objective<L: RayBatchLoss + ?Sized>(
    model: &FieldModel,
    loss: &L,
) -> Result<(f64, GradientVector)> {
    if loss.rays().is_empty() {
        return Err(MapError::Empty("ray batch"));
    }
    if loss.rays().len() != loss.samples().len() {
        return Err(MapError::Dimension(
            "one sample set per ray is required".into(),
        ));
    }
    let traces = trace_all(model, loss);
    let mut adjoints: Vec<RayAdjoint> = traces
        .iter()
        .map(|t| RayAdjoint::zeros(t.depths.len()))
        .collect();
    let mut value = loss.ray_terms(&traces, &mut adjoints)?;
    let mut grad = GradientVector::zeros(model.params().len());
    value += loss.param_terms(model, &mut grad.values)?;
    if !value.is_finite() {
        return Err(MapError::numerical("objective", value));
    }

    let tr = loss.truncation();
    for (trace, adj) in traces.iter().zip(&adjoints) {
        let (mut d_s, d_c) = backprop_render(trace, &adj.d_color, adj.d_depth, tr);
        for (d, direct) in d_s.iter_mut().zip(&adj.d_sdf) {
            *d += direct;
        }
        for (i, tape) in trace.tapes.iter().enumerate() {
            model.backward_point(tape, d_s[i], &d_c[i], &mut grad.values);
        }
    }
    if let Some((i, v)) = grad.first_non_finite() {
        return Err(MapError::numerical(format!("gradient entry {i}"), v));
    }
    Ok((value, grad))
}

/// Loss value only (no backward pass).
pub fn eval_objective<L: RayBatchLoss + ?Sized>(model: &FieldModel, loss: &L) -> Result<f64> {
    let traces = trace_all(model, loss);
    let mut adjoints: Vec<RayAdjoint> = traces
        .iter()
        .map(|t| RayAdjoint::zeros(t.depths.len()))
        .collect();
    let mut scratch = vec![0.0; model.params().len()];
    let value = loss.ray_terms(&traces, &mut adjoints)? + loss.param_terms(model, &mut scratch)?;
    if !value.is_finite() {
        return Err(MapError::numerical("objective", value));
    }
    Ok(value)
}
