//! Shared training plumbing: the per-step context every strategy receives
//! and the data objective its inner gradient steps descend.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::field::{FieldModel, ParamLayout};
use crate::loss::{LossBreakdown, LossWeights, ObjectivePlan, RayBatch, SamplingConfig};
use crate::optim::DescentConfig;
use crate::rng::SeedStream;

/// Knobs shared by every strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Gradient steps per incoming batch for the non-consensus strategies.
    /// The consensus optimizer spends `rounds * inner_steps` instead.
    pub steps_per_batch: usize,
    pub descent: DescentConfig,
    pub sampling: SamplingConfig,
    /// Samples per ray when probing the importance proxy.
    pub proxy_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_per_batch: 20,
            descent: DescentConfig::default(),
            sampling: SamplingConfig::default(),
            proxy_samples: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_batch == 0 {
            return Err(MapError::Config(
                "steps_per_batch must be at least 1".into(),
            ));
        }
        if self.proxy_samples < 2 {
            return Err(MapError::Config("proxy_samples must be at least 2".into()));
        }
        self.descent.validate()?;
        self.sampling.validate()
    }
}

/// Everything a strategy step needs besides its own state.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub seeds: SeedStream,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

/// A differentiable data term over a flat parameter vector. `iter` indexes
/// the inner gradient step so stochastic objectives can redraw samples
/// deterministically.
pub trait DataObjective {
    fn layout(&self) -> &ParamLayout;
    fn value_and_grad(&mut self, params: &[f64], iter: u64) -> Result<(f64, Vec<f64>)>;
}

/// The mapping objective on one batch, resampled at every inner step from
/// the `(step, iter)` random stream.
pub struct FieldObjective<'a> {
    model: FieldModel,
    batch: &'a RayBatch,
    ctx: StepContext,
    step: u64,
    last: LossBreakdown,
}

impl<'a> FieldObjective<'a> {
    pub fn new(model: &FieldModel, batch: &'a RayBatch, ctx: StepContext) -> Self {
        Self {
            model: model.clone(),
            batch,
            ctx,
            step: batch.step,
            last: LossBreakdown::default(),
        }
    }

    pub fn last_breakdown(&self) -> LossBreakdown {
        self.last
    }
}

impl DataObjective for FieldObjective<'_> {
    fn layout(&self) -> &ParamLayout {
        self.model.layout()
    }

    fn value_and_grad(&mut self, params: &[f64], iter: u64) -> Result<(f64, Vec<f64>)> {
        self.model.params_mut().values_mut().copy_from_slice(params);
        let plan = ObjectivePlan::for_step(
            self.batch,
            &self.model.arch().grid,
            self.ctx.weights,
            &self.ctx.train.sampling,
            &self.ctx.seeds,
            self.step,
            iter,
        );
        let (v, breakdown, g) = plan.value_and_grad(&self.model)?;
        self.last = breakdown;
        Ok((v, g.values))
    }
}

/// Closure-backed objective, mostly for analytic test problems.
pub struct FnObjective<F> {
    layout: Arc<ParamLayout>,
    f: F,
}

impl<F> FnObjective<F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    pub fn new(layout: Arc<ParamLayout>, f: F) -> Self {
        Self { layout, f }
    }
}

impl<F> DataObjective for FnObjective<F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn value_and_grad(&mut self, params: &[f64], _iter: u64) -> Result<(f64, Vec<f64>)> {
        Ok((self.f)(params))
    }
}

/// Runs `steps` plain descent steps, numbering inner iterations from
/// `first_iter`. Returns the updated parameters and the last data value.
pub fn descend<O: DataObjective + ?Sized>(
    objective: &mut O,
    params: &[f64],
    descent: &DescentConfig,
    steps: usize,
    first_iter: u64,
) -> Result<(Vec<f64>, f64)> {
    let mut theta = params.to_vec();
    let mut value = f64::NAN;
    for i in 0..steps {
        let (v, g) = objective.value_and_grad(&theta, first_iter + i as u64)?;
        value = v;
        descent.apply(objective.layout(), &mut theta, &g);
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(MapError::numerical("descent update", *bad));
        }
    }
    Ok((theta, value))
}

/// Single-segment layout treated entirely as grid parameters.
pub fn flat_layout(len: usize) -> Arc<ParamLayout> {
    use crate::field::{Segment, SegmentKind};
    Arc::new(
        ParamLayout::new(vec![Segment {
            name: "flat".into(),
            kind: SegmentKind::Grid { level: 0 },
            start: 0,
            len,
        }])
        .expect("single segment layout"),
    )
}
