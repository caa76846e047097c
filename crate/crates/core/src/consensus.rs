//! Importance-weighted temporal consensus: proxy-loss importance, weight
//! scaling and masking, the consensus target, and the method-of-multipliers
//! primal/dual iteration that advances the map on each batch.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::field::grad::{eval_objective, grad_objective, RayAdjoint, RayBatchLoss};
use crate::field::{FieldModel, ParamLayout, ParamVector};
use crate::loss::{LossBreakdown, RayBatch};
use crate::optim::DescentConfig;
use crate::render::{sample_ray, Ray, RayTrace, SampleSet};
use crate::rng::{Purpose, Rng};
use crate::train::{descend, DataObjective, FieldObjective, StepContext};

/// Accumulated absolute proxy-loss sensitivity of each grid parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    values: Vec<f64>,
}

impl ImportanceVector {
    pub fn zeros(grid_len: usize) -> Self {
        Self {
            values: vec![0.0; grid_len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MapError::numerical("importance entry", *v));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    /// `self + |grad|` over the leading grid entries of `grad`.
    pub fn accumulated(&self, grad: &[f64]) -> Result<Self> {
        if grad.len() < self.values.len() {
            return Err(MapError::Dimension(
                "gradient shorter than importance".into(),
            ));
        }
        let mut values = self.values.clone();
        for (u, g) in values.iter_mut().zip(grad) {
            if !g.is_finite() {
                return Err(MapError::numerical("importance gradient", *g));
            }
            *u += g.abs();
        }
        Ok(Self { values })
    }

    /// Entries where `next` fell below `self`.
    pub fn decreases_to(&self, next: &ImportanceVector) -> usize {
        self.values
            .iter()
            .zip(&next.values)
            .filter(|(a, b)| b < a)
            .count()
    }
}

/// Frozen past parameters together with the importance they had.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    params: ParamVector,
    importance: ImportanceVector,
    step: u64,
}

impl Snapshot {
    pub fn new(params: ParamVector, importance: ImportanceVector, step: u64) -> Self {
        Self {
            params,
            importance,
            step,
        }
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn importance(&self) -> &ImportanceVector {
        &self.importance
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Which quadratic penalty the primal update minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyForm {
    /// `Θᵀp + (ρ/2)‖Θ − z‖²`, paired with the dual step `ρ`.
    #[default]
    AugmentedLagrangian,
    /// `Θᵀp + ρ‖Θ − z‖²`, with the same dual step.
    Literal,
}

impl PenaltyForm {
    fn curvature(self, rho: f64) -> f64 {
        match self {
            PenaltyForm::AugmentedLagrangian => rho,
            PenaltyForm::Literal => 2.0 * rho,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub rho: f64,
    pub beta: f64,
    pub rounds: usize,
    pub inner_steps: usize,
    pub snapshots_kept: usize,
    pub penalty_form: PenaltyForm,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            beta: 1e-5,
            rounds: 2,
            inner_steps: 10,
            snapshots_kept: 1,
            penalty_form: PenaltyForm::AugmentedLagrangian,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(MapError::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(MapError::Config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if self.rounds == 0 || self.inner_steps == 0 || self.snapshots_kept == 0 {
            return Err(MapError::Config(
                "rounds, inner_steps and snapshots_kept must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Dual variable over the full parameter vector; decoder entries stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub p: Vec<f64>,
}

impl DualState {
    pub fn zeros(len: usize) -> Self {
        Self { p: vec![0.0; len] }
    }

    pub fn reset(&mut self) {
        self.p.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Squared magnitude of rendered colour and depth, averaged over rays.
/// Samples are stratified only, so no observation enters.
pub struct ProxyLoss<'a> {
    rays: &'a [Ray],
    samples: Vec<SampleSet>,
    truncation: f64,
}

impl<'a> ProxyLoss<'a> {
    pub fn new(rays: &'a [Ray], samples: Vec<SampleSet>, truncation: f64) -> Result<Self> {
        if rays.is_empty() {
            return Err(MapError::Empty("proxy ray set"));
        }
        if rays.len() != samples.len() {
            return Err(MapError::Dimension(
                "one sample set per ray is required".into(),
            ));
        }
        Ok(Self {
            rays,
            samples,
            truncation,
        })
    }

    pub fn draw(
        rays: &'a [Ray],
        samples_per_ray: usize,
        truncation: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let samples = rays
            .iter()
            .map(|r| sample_ray(r, None, samples_per_ray, 0, truncation, rng))
            .collect();
        Self::new(rays, samples, truncation)
    }

    pub fn value(&self, model: &FieldModel) -> Result<f64> {
        eval_objective(model, self)
    }
}

impl RayBatchLoss for ProxyLoss<'_> {
    fn rays(&self) -> &[Ray] {
        self.rays
    }

    fn samples(&self) -> &[SampleSet] {
        &self.samples
    }

    fn truncation(&self) -> f64 {
        self.truncation
    }

    fn ray_terms(&self, traces: &[RayTrace], adjoints: &mut [RayAdjoint]) -> Result<f64> {
        let valid = traces.iter().filter(|t| t.render().is_valid()).count();
        if valid == 0 {
            log::warn!("proxy loss: every ray is degenerate");
            return Ok(0.0);
        }
        let n = valid as f64;
        let mut total = 0.0;
        for (trace, adj) in traces.iter().zip(adjoints.iter_mut()) {
            let r = trace.render();
            if !r.is_valid() {
                continue;
            }
            total += r.color.iter().map(|c| c * c).sum::<f64>() + r.depth * r.depth;
            for ch in 0..r.color.len() {
                adj.d_color[ch] = 2.0 * r.color[ch] / n;
            }
            adj.d_depth = 2.0 * r.depth / n;
        }
        Ok(total / n)
    }
}

/// Proxy loss of `model` on `rays`.
pub fn proxy_loss(
    model: &FieldModel,
    rays: &[Ray],
    samples_per_ray: usize,
    truncation: f64,
    rng: &mut Rng,
) -> Result<f64> {
    ProxyLoss::draw(rays, samples_per_ray, truncation, rng)?.value(model)
}

/// `u + |∂ proxy / ∂ grid|`; the input is left untouched.
pub fn accumulate_importance(
    u: &ImportanceVector,
    model: &FieldModel,
    rays: &[Ray],
    samples_per_ray: usize,
    truncation: f64,
    rng: &mut Rng,
) -> Result<ImportanceVector> {
    let proxy = ProxyLoss::draw(rays, samples_per_ray, truncation, rng)?;
    let (_, grad) = grad_objective(model, &proxy)?;
    u.accumulated(&grad.values[..model.layout().grid_len()])
}

/// ε-scaled weights of the current model and of each historical one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusWeights {
    pub current: Vec<f64>,
    pub history: Vec<Vec<f64>>,
    /// `None` when every importance is zero.
    pub epsilon: Option<f64>,
}

/// Scales all importances by the joint `ε = ρ / mean(Σ u)`.
pub fn scale_weights_multi(
    current: &ImportanceVector,
    history: &[&ImportanceVector],
    rho: f64,
) -> Result<ConsensusWeights> {
    if !(rho > 0.0) {
        return Err(MapError::Config(format!("rho must be positive, got {rho}")));
    }
    if history.iter().any(|h| h.len() != current.len()) {
        return Err(MapError::Dimension(
            "importance vectors differ in length".into(),
        ));
    }
    let n = current.len();
    let mut sum = current.values.iter().sum::<f64>();
    for h in history {
        sum += h.values.iter().sum::<f64>();
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    if !(mean > 0.0) {
        log::warn!("all importances are zero; consensus weights set to zero");
        return Ok(ConsensusWeights {
            current: vec![0.0; n],
            history: vec![vec![0.0; n]; history.len()],
            epsilon: None,
        });
    }
    let eps = rho / mean;
    let scale = |u: &ImportanceVector| u.values.iter().map(|v| eps * v).collect::<Vec<_>>();
    Ok(ConsensusWeights {
        current: scale(current),
        history: history.iter().map(|h| scale(h)).collect(),
        epsilon: Some(eps),
    })
}

/// Two-model form: `(W_t, W_{t−1})`.
pub fn scale_weights(
    current: &ImportanceVector,
    hist: &ImportanceVector,
    rho: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut w = scale_weights_multi(current, &[hist], rho)?;
    Ok((w.current, w.history.pop().expect("one history entry")))
}

/// Zeroes entries strictly below `beta`.
pub fn mask_weights(weights: &[f64], beta: f64) -> Vec<f64> {
    weights
        .iter()
        .map(|&w| if w < beta { 0.0 } else { w })
        .collect()
}

/// Entrywise weighted mean of the current and historical grid parameters.
/// Entries with zero total weight, and every decoder entry, keep the
/// current value.
pub fn consensus_target(
    current: &ParamVector,
    history: &[&ParamVector],
    w_current: &[f64],
    w_history: &[Vec<f64>],
) -> Result<ParamVector> {
    let g = current.layout().grid_len();
    if history.len() != w_history.len()
        || w_current.len() != g
        || w_history.iter().any(|w| w.len() != g)
        || history.iter().any(|h| h.len() != current.len())
    {
        return Err(MapError::Dimension(
            "consensus inputs are misaligned".into(),
        ));
    }
    let mut z = current.clone();
    let theta = current.values();
    let out = z.values_mut();
    for i in 0..g {
        let mut num = w_current[i] * theta[i];
        let mut den = w_current[i];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        if w_current[i] > 0.0 {
            lo = theta[i];
            hi = theta[i];
        }
        for (h, w) in history.iter().zip(w_history) {
            let v = h.values()[i];
            num += w[i] * v;
            den += w[i];
            if w[i] > 0.0 {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if den > 0.0 {
            out[i] = (num / den).clamp(lo, hi);
        }
    }
    Ok(z)
}

/// Gradient steps on `L(Θ) + Θᵀp + (c/2)‖Θ − z‖²` where `c` is `ρ` or `2ρ`
/// by `form`; the penalty and dual term touch grid entries only.
#[allow(clippy::too_many_arguments)]
pub fn primal_update<O: DataObjective + ?Sized>(
    objective: &mut O,
    theta: &[f64],
    z: &[f64],
    dual: &DualState,
    rho: f64,
    form: PenaltyForm,
    inner_steps: usize,
    descent: &DescentConfig,
    first_iter: u64,
) -> Result<(Vec<f64>, f64)> {
    let c = form.curvature(rho);
    let mut th = theta.to_vec();
    let mut value = f64::NAN;
    for i in 0..inner_steps {
        let (v, mut grad) = objective.value_and_grad(&th, first_iter + i as u64)?;
        value = v;
        let g = objective.layout().grid_len();
        for j in 0..g {
            grad[j] += dual.p[j] + c * (th[j] - z[j]);
        }
        descent.apply(objective.layout(), &mut th, &grad);
        if let Some(bad) = th.iter().find(|v| !v.is_finite()) {
            return Err(MapError::numerical("primal update", *bad));
        }
    }
    Ok((th, value))
}

/// `p += ρ(Θ − z)` on grid entries.
pub fn dual_update(dual: &mut DualState, layout: &ParamLayout, theta: &[f64], z: &[f64], rho: f64) {
    for j in 0..layout.grid_len() {
        dual.p[j] += rho * (theta[j] - z[j]);
    }
}

/// Grid-only Euclidean distance between `theta` and `z`.
pub fn grid_residual(layout: &ParamLayout, theta: &[f64], z: &[f64]) -> f64 {
    let g = layout.grid_len();
    theta[..g]
        .iter()
        .zip(&z[..g])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub residual: f64,
    pub mean_w_current: f64,
    pub mean_w_history: f64,
    pub masked_fraction: f64,
    pub breakdown: LossBreakdown,
}

/// Weights and target for one step, before any optimization.
#[derive(Debug, Clone)]
pub struct ConsensusPlan {
    pub weights: ConsensusWeights,
    pub target: ParamVector,
    pub masked_fraction: f64,
}

/// The consensus optimizer's full state.
#[derive(Debug, Clone)]
pub struct TacoState {
    pub model: FieldModel,
    pub importance: ImportanceVector,
    pub snapshots: VecDeque<Snapshot>,
    pub config: ConsensusConfig,
    step: u64,
}

impl TacoState {
    pub fn new(model: FieldModel, config: ConsensusConfig) -> Result<Self> {
        config.validate()?;
        let g = model.layout().grid_len();
        Ok(Self {
            model,
            importance: ImportanceVector::zeros(g),
            snapshots: VecDeque::new(),
            config,
            step: 0,
        })
    }

    /// Builds the masked weights and consensus target from the current state.
    /// `None` while no snapshot exists.
    pub fn plan(&self) -> Result<Option<ConsensusPlan>> {
        if self.snapshots.is_empty() {
            return Ok(None);
        }
        let hist: Vec<&ImportanceVector> = self.snapshots.iter().map(|s| &s.importance).collect();
        let mut weights = scale_weights_multi(&self.importance, &hist, self.config.rho)?;
        let (mut masked, mut total) = (0usize, 0usize);
        for w in &mut weights.history {
            masked += w.iter().filter(|v| **v < self.config.beta).count();
            total += w.len();
            *w = mask_weights(w, self.config.beta);
        }
        let params: Vec<&ParamVector> = self.snapshots.iter().map(|s| &s.params).collect();
        let target = consensus_target(
            self.model.params(),
            &params,
            &weights.current,
            &weights.history,
        )?;
        let masked_fraction = if total == 0 {
            0.0
        } else {
            masked as f64 / total as f64
        };
        Ok(Some(ConsensusPlan {
            weights,
            target,
            masked_fraction,
        }))
    }

    /// Advances `Θ_t → Θ_{t+1}` on `batch`. A failure leaves the state as it was.
    pub fn step(&mut self, batch: &RayBatch, ctx: &StepContext) -> Result<StepReport> {
        let cfg = self.config;
        let plan = self.plan()?;
        let layout = self.model.layout().clone();
        let theta_t = self.model.params().clone();
        let mut objective = FieldObjective::new(&self.model, batch, *ctx);
        let mut report = StepReport::default();

        let theta_next = match &plan {
            None => {
                let steps = cfg.rounds * cfg.inner_steps;
                descend(
                    &mut objective,
                    theta_t.values(),
                    &ctx.train.descent,
                    steps,
                    0,
                )?
                .0
            }
            Some(plan) => {
                let z = plan.target.values();
                let mut dual = DualState::zeros(theta_t.len());
                let mut th = theta_t.values().to_vec();
                for k in 0..cfg.rounds {
                    th = primal_update(
                        &mut objective,
                        &th,
                        z,
                        &dual,
                        cfg.rho,
                        cfg.penalty_form,
                        cfg.inner_steps,
                        &ctx.train.descent,
                        (k * cfg.inner_steps) as u64,
                    )?
                    .0;
                    dual_update(&mut dual, &layout, &th, z, cfg.rho);
                }
                let g = layout.grid_len().max(1) as f64;
                report.residual = grid_residual(&layout, &th, z);
                report.mean_w_current = plan.weights.current.iter().sum::<f64>() / g;
                report.mean_w_history = plan.weights.history.iter().flatten().sum::<f64>() / g;
                report.masked_fraction = plan.masked_fraction;
                th
            }
        };
        report.breakdown = objective.last_breakdown();

        let mut next_model = self.model.clone();
        next_model.set_params(ParamVector::new(layout.clone(), theta_next)?)?;
        let mut rng = ctx.seeds.rng(batch.step, Purpose::Proxy, 0);
        let next_importance = accumulate_importance(
            &self.importance,
            &next_model,
            &batch.rays,
            ctx.train.proxy_samples,
            ctx.train.sampling.truncation,
            &mut rng,
        )?;

        let previous = std::mem::replace(&mut self.importance, next_importance);
        self.snapshots
            .push_back(Snapshot::new(theta_t, previous, self.step));
        while self.snapshots.len() > cfg.snapshots_kept {
            self.snapshots.pop_front();
        }
        self.model = next_model;
        self.step += 1;
        Ok(report)
    }

    /// Words of persistent state: parameters, importance, and snapshots.
    pub fn tracked_state_words(&self) -> usize {
        let own = self.model.params().len() + self.importance.len();
        let snaps: usize = self
            .snapshots
            .iter()
            .map(|s| s.params.len() + s.importance.len())
            .sum();
        own + snaps
    }

    /// Upper bound of [`Self::tracked_state_words`] once the snapshot queue is full.
    pub fn state_words_bound(&self) -> usize {
        (self.config.snapshots_kept + 1) * (self.model.params().len() + self.importance.len())
    }
}
