//! Continual-learning strategies behind one step interface: the consensus
//! optimizer and the naive, replay, MAS and EWC baselines.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    accumulate_importance, ConsensusConfig, ImportanceVector, StepReport, TacoState,
};
use crate::error::{MapError, Result};
use crate::field::{FieldModel, ParamVector};
use crate::loss::{LossBreakdown, RayBatch};
use crate::rng::Purpose;
use crate::train::{descend, DataObjective, FieldObjective, StepContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Taco,
    Naive,
    Replay,
    Mas,
    Ewc,
    ReplayUpper,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Taco,
        StrategyKind::Naive,
        StrategyKind::Replay,
        StrategyKind::Mas,
        StrategyKind::Ewc,
        StrategyKind::ReplayUpper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Taco => "taco",
            StrategyKind::Naive => "naive",
            StrategyKind::Replay => "replay",
            StrategyKind::Mas => "mas",
            StrategyKind::Ewc => "ewc",
            StrategyKind::ReplayUpper => "replay_upper",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MapError::Config(format!("unknown strategy {s:?}")))
    }
}

/// Baseline hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Stored batches for `replay`.
    pub replay_capacity: usize,
    /// Replayed rays per step, as a multiple of the incoming batch size.
    pub replay_ratio: f64,
    /// `replay_upper` trains on every stored ray instead of a sample.
    pub replay_upper_full: bool,
    pub mas_lambda: f64,
    pub ewc_lambda: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            replay_capacity: 10,
            replay_ratio: 1.0,
            replay_upper_full: false,
            mas_lambda: 10.0,
            ewc_lambda: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replay_capacity == 0 {
            return Err(MapError::Config(
                "replay_capacity must be at least 1".into(),
            ));
        }
        if !(self.replay_ratio >= 0.0 && self.replay_ratio.is_finite()) {
            return Err(MapError::Config(
                "replay_ratio must be finite and non-negative".into(),
            ));
        }
        for (name, v) in [
            ("mas_lambda", self.mas_lambda),
            ("ewc_lambda", self.ewc_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MapError::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Past batches kept for rehearsal. `capacity = None` never evicts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBuffer {
    capacity: Option<usize>,
    stored: VecDeque<RayBatch>,
}

impl ReplayBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            stored: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn ray_count(&self) -> usize {
        self.stored.iter().map(RayBatch::len).sum()
    }

    pub fn batches(&self) -> impl Iterator<Item = &RayBatch> {
        self.stored.iter()
    }

    pub fn push(&mut self, batch: RayBatch) {
        self.stored.push_back(batch);
        if let Some(cap) = self.capacity {
            while self.stored.len() > cap {
                self.stored.pop_front();
            }
        }
    }

    /// `batch` extended with `count` distinct stored rays drawn uniformly,
    /// or with every stored ray when `count` is `None`.
    pub fn augment(
        &self,
        batch: &RayBatch,
        count: Option<usize>,
        rng: &mut crate::rng::Rng,
    ) -> RayBatch {
        let total = self.ray_count();
        if total == 0 {
            return batch.clone();
        }
        let all = || {
            self.stored.iter().flat_map(|b| {
                b.rays
                    .iter()
                    .zip(&b.colors)
                    .zip(&b.depths)
                    .map(|((r, c), d)| (r, c, d))
            })
        };
        match count {
            None => batch.union(all()),
            Some(n) => {
                let mut picks = sample(rng, total, n.min(total)).into_vec();
                picks.sort_unstable();
                let mut it = picks.into_iter().peekable();
                let chosen = all().enumerate().filter_map(|(i, x)| {
                    if it.peek() == Some(&i) {
                        it.next();
                        Some(x)
                    } else {
                        None
                    }
                });
                batch.union(chosen)
            }
        }
    }

    pub fn storage_words(&self) -> usize {
        self.stored.iter().map(RayBatch::storage_words).sum()
    }
}

/// Quadratic anchor `(λ/2) Σ Ω_i (θ_i − θ*_i)²` over grid entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyState {
    pub anchor: ParamVector,
    pub omega: Vec<f64>,
    pub lambda: f64,
}

impl PenaltyState {
    pub fn value(&self, params: &[f64]) -> f64 {
        let a = self.anchor.values();
        0.5 * self.lambda
            * self
                .omega
                .iter()
                .enumerate()
                .map(|(i, w)| w * (params[i] - a[i]).powi(2))
                .sum::<f64>()
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let a = self.anchor.values();
        let mut g = vec![0.0; params.len()];
        for (i, w) in self.omega.iter().enumerate() {
            g[i] = self.lambda * w * (params[i] - a[i]);
        }
        g
    }

    /// Per-entry stiffness `λ Ω_i`; zero beyond the grid.
    pub fn stiffness(&self, len: usize) -> Vec<f64> {
        let mut k = vec![0.0; len];
        for (s, w) in k.iter_mut().zip(&self.omega) {
            *s = self.lambda * w;
        }
        k
    }
}

/// Plain descent on the batch for `steps_per_batch` steps.
pub fn naive_step(
    model: &mut FieldModel,
    batch: &RayBatch,
    ctx: &StepContext,
) -> Result<LossBreakdown> {
    let mut obj = FieldObjective::new(model, batch, *ctx);
    let (theta, _) = descend(
        &mut obj,
        model.params().values(),
        &ctx.train.descent,
        ctx.train.steps_per_batch,
        0,
    )?;
    model.params_mut().values_mut().copy_from_slice(&theta);
    Ok(obj.last_breakdown())
}

/// Descent on the batch joined with replayed rays, then stores the batch.
pub fn replay_step(
    model: &mut FieldModel,
    batch: &RayBatch,
    buffer: &mut ReplayBuffer,
    count: Option<usize>,
    ctx: &StepContext,
) -> Result<LossBreakdown> {
    let mut rng = ctx.seeds.rng(batch.step, Purpose::Replay, 0);
    let joint = buffer.augment(batch, count, &mut rng);
    let out = naive_step(model, &joint, ctx)?;
    buffer.push(batch.clone());
    Ok(out)
}

fn anchored_descent<'b>(
    model: &mut FieldModel,
    batch: &'b RayBatch,
    penalty: Option<&PenaltyState>,
    ctx: &StepContext,
) -> Result<(LossBreakdown, FieldObjective<'b>)> {
    let mut obj = FieldObjective::new(model, batch, *ctx);
    let mut theta = model.params().values().to_vec();
    let layout = model.layout().clone();
    let stiffness = penalty.map(|p| p.stiffness(theta.len()));
    for i in 0..ctx.train.steps_per_batch {
        let (_, g) = obj.value_and_grad(&theta, i as u64)?;
        match (penalty, &stiffness) {
            (Some(p), Some(k)) => {
                ctx.train
                    .descent
                    .apply_anchored(&layout, &mut theta, &g, p.anchor.values(), k)
            }
            _ => ctx.train.descent.apply(&layout, &mut theta, &g),
        }
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(MapError::numerical("anchored update", *bad));
        }
    }
    model.params_mut().values_mut().copy_from_slice(&theta);
    Ok((obj.last_breakdown(), obj))
}

/// Online MAS: anchored descent, then proxy-loss importance accumulation
/// shared with the consensus optimizer and an anchor refresh.
pub fn mas_step(
    model: &mut FieldModel,
    batch: &RayBatch,
    omega: &mut ImportanceVector,
    penalty: &mut Option<PenaltyState>,
    lambda: f64,
    ctx: &StepContext,
) -> Result<LossBreakdown> {
    let mut trial = model.clone();
    let (breakdown, _) = anchored_descent(&mut trial, batch, penalty.as_ref(), ctx)?;
    let mut rng = ctx.seeds.rng(batch.step, Purpose::Proxy, 0);
    let next = accumulate_importance(
        omega,
        &trial,
        &batch.rays,
        ctx.train.proxy_samples,
        ctx.train.sampling.truncation,
        &mut rng,
    )?;
    *penalty = Some(PenaltyState {
        anchor: trial.params().clone(),
        omega: next.values().to_vec(),
        lambda,
    });
    *omega = next;
    *model = trial;
    Ok(breakdown)
}

/// EWC with an empirical-Fisher diagonal: squared data gradients at the
/// post-step parameters, accumulated over time.
pub fn ewc_step(
    model: &mut FieldModel,
    batch: &RayBatch,
    fisher: &mut Vec<f64>,
    penalty: &mut Option<PenaltyState>,
    lambda: f64,
    ctx: &StepContext,
) -> Result<LossBreakdown> {
    let mut trial = model.clone();
    let (breakdown, mut obj) = anchored_descent(&mut trial, batch, penalty.as_ref(), ctx)?;
    let (_, g) = obj.value_and_grad(trial.params().values(), ctx.train.steps_per_batch as u64)?;
    let grid = trial.layout().grid_len();
    let mut next = fisher.clone();
    next.resize(grid, 0.0);
    for (f, d) in next.iter_mut().zip(&g[..grid]) {
        *f += d * d;
    }
    *penalty = Some(PenaltyState {
        anchor: trial.params().clone(),
        omega: next.clone(),
        lambda,
    });
    *fisher = next;
    *model = trial;
    Ok(breakdown)
}

/// What one step produced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub consensus: Option<StepReport>,
    /// Importance entries that decreased during the step.
    pub importance_violations: usize,
}

/// A strategy together with its state.
#[derive(Debug, Clone)]
pub enum Strategy {
    Taco(TacoState),
    Naive {
        model: FieldModel,
    },
    Replay {
        model: FieldModel,
        buffer: ReplayBuffer,
        count_ratio: f64,
        full: bool,
    },
    Mas {
        model: FieldModel,
        omega: ImportanceVector,
        penalty: Option<PenaltyState>,
        lambda: f64,
    },
    Ewc {
        model: FieldModel,
        fisher: Vec<f64>,
        penalty: Option<PenaltyState>,
        lambda: f64,
    },
}

impl Strategy {
    pub fn new(
        kind: StrategyKind,
        model: FieldModel,
        consensus: ConsensusConfig,
        baseline: BaselineConfig,
    ) -> Result<Self> {
        baseline.validate()?;
        Ok(match kind {
            StrategyKind::Taco => Strategy::Taco(TacoState::new(model, consensus)?),
            StrategyKind::Naive => Strategy::Naive { model },
            StrategyKind::Replay => Strategy::Replay {
                model,
                buffer: ReplayBuffer::new(Some(baseline.replay_capacity)),
                count_ratio: baseline.replay_ratio,
                full: false,
            },
            StrategyKind::ReplayUpper => Strategy::Replay {
                model,
                buffer: ReplayBuffer::new(None),
                count_ratio: baseline.replay_ratio,
                full: baseline.replay_upper_full,
            },
            StrategyKind::Mas => {
                let g = model.layout().grid_len();
                Strategy::Mas {
                    model,
                    omega: ImportanceVector::zeros(g),
                    penalty: None,
                    lambda: baseline.mas_lambda,
                }
            }
            StrategyKind::Ewc => Strategy::Ewc {
                model,
                fisher: Vec::new(),
                penalty: None,
                lambda: baseline.ewc_lambda,
            },
        })
    }

    pub fn model(&self) -> &FieldModel {
        match self {
            Strategy::Taco(s) => &s.model,
            Strategy::Naive { model }
            | Strategy::Replay { model, .. }
            | Strategy::Mas { model, .. }
            | Strategy::Ewc { model, .. } => model,
        }
    }

    /// Importance vector, for strategies that keep one.
    pub fn importance(&self) -> Option<&ImportanceVector> {
        match self {
            Strategy::Taco(s) => Some(&s.importance),
            Strategy::Mas { omega, .. } => Some(omega),
            _ => None,
        }
    }

    pub fn step(&mut self, batch: &RayBatch, ctx: &StepContext) -> Result<StepOutcome> {
        let before = self.importance().cloned();
        let mut out = StepOutcome::default();
        match self {
            Strategy::Taco(s) => {
                let report = s.step(batch, ctx)?;
                out.breakdown = report.breakdown;
                out.consensus = Some(report);
            }
            Strategy::Naive { model } => out.breakdown = naive_step(model, batch, ctx)?,
            Strategy::Replay {
                model,
                buffer,
                count_ratio,
                full,
            } => {
                let count = if *full {
                    None
                } else {
                    Some((batch.len() as f64 * *count_ratio).round() as usize)
                };
                out.breakdown = replay_step(model, batch, buffer, count, ctx)?;
            }
            Strategy::Mas {
                model,
                omega,
                penalty,
                lambda,
            } => {
                out.breakdown = mas_step(model, batch, omega, penalty, *lambda, ctx)?;
            }
            Strategy::Ewc {
                model,
                fisher,
                penalty,
                lambda,
            } => {
                out.breakdown = ewc_step(model, batch, fisher, penalty, *lambda, ctx)?;
            }
        }
        if let (Some(prev), Some(next)) = (before, self.importance()) {
            out.importance_violations = prev.decreases_to(next);
        }
        Ok(out)
    }

    /// Persistent words held between steps.
    pub fn tracked_state_words(&self) -> usize {
        match self {
            Strategy::Taco(s) => s.tracked_state_words(),
            Strategy::Naive { model } => model.params().len(),
            Strategy::Replay { model, buffer, .. } => model.params().len() + buffer.storage_words(),
            Strategy::Mas {
                model,
                omega,
                penalty,
                ..
            } => {
                model.params().len()
                    + omega.len()
                    + penalty
                        .as_ref()
                        .map_or(0, |p| p.anchor.len() + p.omega.len())
            }
            Strategy::Ewc {
                model,
                fisher,
                penalty,
                ..
            } => {
                model.params().len()
                    + fisher.len()
                    + penalty
                        .as_ref()
                        .map_or(0, |p| p.anchor.len() + p.omega.len())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("mystery".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn penalty_gradient_matches_differences() {
        let layout = crate::train::flat_layout(3);
        let anchor = ParamVector::new(layout, vec![0.5, -1.0, 2.0]).unwrap();
        let p = PenaltyState {
            anchor,
            omega: vec![1.0, 0.0, 3.0],
            lambda: 0.7,
        };
        let x = [1.0, 2.0, -0.5];
        let g = p.gradient(&x);
        for i in 0..3 {
            let h = 1e-5;
            let mut a = x;
            let mut b = x;
            a[i] += h;
            b[i] -= h;
            let fd = (p.value(&a) - p.value(&b)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-8),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }
}
