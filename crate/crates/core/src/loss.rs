//! The mapping objective over a ray batch: photometric, depth, SDF,
//! free-space, and grid-smoothness terms.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, MapError, Result};
use crate::field::grad::{eval_objective, grad_objective, RayAdjoint, RayBatchLoss};
use crate::field::{FeatureGrid, FieldModel, GradientVector, PointTape, Rgb};
use crate::render::{sample_ray, Ray, RayTrace, RenderResult, SampleSet};
use crate::rng::{Purpose, Rng, SeedStream};
use rand::{Rng as _, SeedableRng};

/// Observations arriving at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub colors: Vec<Rgb>,
    pub depths: Vec<Option<f64>>,
    pub step: u64,
}

impl RayBatch {
    pub fn new(
        rays: Vec<Ray>,
        colors: Vec<Rgb>,
        depths: Vec<Option<f64>>,
        step: u64,
    ) -> Result<Self> {
        if rays.is_empty() {
            return Err(MapError::Empty("ray batch"));
        }
        if rays.len() != colors.len() || rays.len() != depths.len() {
            return Err(MapError::Dimension("batch columns differ in length".into()));
        }
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(MapError::Config(
                "observed colours must lie in [0, 1]".into(),
            ));
        }
        for (ray, d) in rays.iter().zip(&depths) {
            if let Some(d) = d {
                if !(*d > 0.0 && *d <= ray.max_range) {
                    return Err(MapError::Config(format!(
                        "observed depth {d} outside (0, {}]",
                        ray.max_range
                    )));
                }
            }
        }
        Ok(Self {
            rays,
            colors,
            depths,
            step,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// This batch followed by the rays of `others`; keeps this batch's step.
    pub fn union<'a>(
        &self,
        others: impl IntoIterator<Item = (&'a Ray, &'a Rgb, &'a Option<f64>)>,
    ) -> Self {
        let mut out = self.clone();
        for (r, c, d) in others {
            out.rays.push(r.clone());
            out.colors.push(*c);
            out.depths.push(*d);
        }
        out
    }

    /// Number of `f64` words held by this batch, for memory accounting.
    pub fn storage_words(&self) -> usize {
        self.rays.iter().map(|r| 2 * r.dim() + 1).sum::<usize>() + self.len() * (3 + 2) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub sdf: f64,
    pub fs: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            depth: 0.1,
            sdf: 10.0,
            fs: 1.0,
            smooth: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            rgb: 0.0,
            depth: 0.0,
            sdf: 0.0,
            fs: 0.0,
            smooth: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MapError::Config(format!(
                    "loss weight {name} = {v} is invalid"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rgb: self.rgb * k,
            depth: self.depth * k,
            sdf: self.sdf * k,
            fs: self.fs * k,
            smooth: self.smooth * k,
        }
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("rgb", self.rgb),
            ("depth", self.depth),
            ("sdf", self.sdf),
            ("fs", self.fs),
            ("smooth", self.smooth),
        ]
    }
}

/// How rays are sampled for the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples: usize,
    pub near_samples: usize,
    pub truncation: f64,
    /// Adjacent grid-node pairs drawn per level for the smoothness term.
    pub smooth_pairs: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            near_samples: 8,
            truncation: 0.1,
            smooth_pairs: 64,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.near_samples >= self.samples {
            return Err(MapError::Config(
                "need samples >= 2 and near_samples < samples".into(),
            ));
        }
        if !(self.truncation > 0.0) {
            return Err(MapError::Config("truncation must be positive".into()));
        }
        if self.smooth_pairs == 0 {
            return Err(MapError::Config("smooth_pairs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub depth: f64,
    pub sdf: f64,
    pub fs: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 6] = ["rgb", "depth", "sdf", "fs", "smooth", "total"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.rgb,
            self.depth,
            self.sdf,
            self.fs,
            self.smooth,
            self.total,
        ]
    }
}

fn squared_norm(a: &Rgb, b: &Rgb) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared colour error over valid rays.
pub fn loss_rgb(batch: &RayBatch, renders: &[RenderResult]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, c) in renders.iter().zip(&batch.colors) {
        if r.is_valid() {
            sum += squared_norm(&r.color, c);
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("loss_rgb: every ray in the batch is degenerate");
        return 0.0;
    }
    sum / n as f64
}

/// Mean squared depth error over valid rays with an observed depth.
pub fn loss_depth(batch: &RayBatch, renders: &[RenderResult]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, d) in renders.iter().zip(&batch.depths) {
        if let (true, Some(d)) = (r.is_valid(), d) {
            sum += (r.depth - d) * (r.depth - d);
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("loss_depth: no valid ray carries a depth");
        return 0.0;
    }
    sum / n as f64
}

/// Whether a sample at `depth` is supervised by the SDF term, and its target.
#[inline]
fn sdf_target(observed: f64, depth: f64, tr: f64) -> Option<f64> {
    ((observed - depth).abs() <= tr).then(|| (observed - depth) / tr)
}

#[inline]
fn is_free_space(observed: f64, depth: f64, tr: f64) -> bool {
    depth < observed - tr
}

fn sample_sdfs(model: &FieldModel, batch: &RayBatch, samples: &[SampleSet]) -> Vec<Vec<f64>> {
    let mut tape = PointTape::default();
    batch
        .rays
        .iter()
        .zip(samples)
        .map(|(ray, set)| {
            set.depths
                .iter()
                .map(|&d| model.eval_sdf(&ray.at(d), &mut tape))
                .collect()
        })
        .collect()
}

fn sdf_term(batch: &RayBatch, samples: &[SampleSet], sdf: &[Vec<f64>], tr: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((obs, set), s) in batch.depths.iter().zip(samples).zip(sdf) {
        let Some(obs) = obs else { continue };
        for (&d, &s) in set.depths.iter().zip(s) {
            if let Some(t) = sdf_target(*obs, d, tr) {
                sum += (s - t) * (s - t);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn fs_term(batch: &RayBatch, samples: &[SampleSet], sdf: &[Vec<f64>], tr: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((obs, set), s) in batch.depths.iter().zip(samples).zip(sdf) {
        let Some(obs) = obs else { continue };
        for (&d, &s) in set.depths.iter().zip(s) {
            if is_free_space(*obs, d, tr) {
                sum += (s - 1.0) * (s - 1.0);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean squared residual between predicted SDF and the truncation-normalized
/// signed distance to the observed surface, over samples within `tr` of it.
pub fn loss_sdf(batch: &RayBatch, samples: &[SampleSet], model: &FieldModel, tr: f64) -> f64 {
    sdf_term(batch, samples, &sample_sdfs(model, batch, samples), tr)
}

/// Mean of `(s - 1)^2` over samples more than `tr` in front of the surface.
pub fn loss_freespace(batch: &RayBatch, samples: &[SampleSet], model: &FieldModel, tr: f64) -> f64 {
    fs_term(batch, samples, &sample_sdfs(model, batch, samples), tr)
}

/// Draws `patch_count` adjacent node pairs on every grid level.
pub fn smooth_pairs(grid: &FeatureGrid, rng: &mut Rng, patch_count: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(patch_count * grid.levels.len());
    for level in 0..grid.levels.len() {
        for _ in 0..patch_count {
            pairs.push(grid.random_adjacent_pair(level, rng));
        }
    }
    pairs
}

fn smooth_value(params: &[f64], features: usize, pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            (0..features)
                .map(|f| (params[a + f] - params[b + f]).powi(2))
                .sum::<f64>()
        })
        .sum();
    sum / pairs.len() as f64
}

/// Mean squared feature difference over randomly drawn adjacent node pairs.
pub fn loss_smooth(model: &FieldModel, rng: &mut Rng, patch_count: usize) -> f64 {
    let grid = &model.arch().grid;
    let pairs = smooth_pairs(grid, rng, patch_count);
    smooth_value(model.params().values(), grid.features, &pairs)
}

/// Every random choice the objective needs, drawn up front so the objective
/// is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct ObjectivePlan<'a> {
    pub batch: &'a RayBatch,
    pub samples: Vec<SampleSet>,
    pub pairs: Vec<(usize, usize)>,
    pub weights: LossWeights,
    pub truncation: f64,
    features: usize,
    last: Cell<LossBreakdown>,
}

impl<'a> ObjectivePlan<'a> {
    pub fn draw(
        batch: &'a RayBatch,
        grid: &FeatureGrid,
        weights: LossWeights,
        sampling: &SamplingConfig,
        ray_rng: &mut Rng,
        smooth_rng: &mut Rng,
    ) -> Self {
        let samples = batch
            .rays
            .iter()
            .zip(&batch.depths)
            .map(|(ray, d)| {
                sample_ray(
                    ray,
                    *d,
                    sampling.samples,
                    sampling.near_samples,
                    sampling.truncation,
                    ray_rng,
                )
            })
            .collect();
        let pairs = smooth_pairs(grid, smooth_rng, sampling.smooth_pairs);
        Self {
            batch,
            samples,
            pairs,
            weights,
            truncation: sampling.truncation,
            features: grid.features,
            last: Cell::new(LossBreakdown::default()),
        }
    }

    /// Plan keyed on `(step, inner)` of a seed stream.
    pub fn for_step(
        batch: &'a RayBatch,
        grid: &FeatureGrid,
        weights: LossWeights,
        sampling: &SamplingConfig,
        seeds: &SeedStream,
        step: u64,
        inner: u64,
    ) -> Self {
        let mut ray_rng = seeds.rng(step, Purpose::RaySamples, inner);
        let mut smooth_rng = seeds.rng(step, Purpose::Smoothness, inner);
        Self::draw(
            batch,
            grid,
            weights,
            sampling,
            &mut ray_rng,
            &mut smooth_rng,
        )
    }

    /// Breakdown recorded by the most recent evaluation.
    pub fn last_breakdown(&self) -> LossBreakdown {
        self.last.get()
    }

    pub fn value(&self, model: &FieldModel) -> Result<(f64, LossBreakdown)> {
        let v = eval_objective(model, self)?;
        Ok((v, self.last.get()))
    }

    pub fn value_and_grad(
        &self,
        model: &FieldModel,
    ) -> Result<(f64, LossBreakdown, GradientVector)> {
        let (v, g) = grad_objective(model, self)?;
        Ok((v, self.last.get(), g))
    }
}

impl RayBatchLoss for ObjectivePlan<'_> {
    fn rays(&self) -> &[Ray] {
        &self.batch.rays
    }

    fn samples(&self) -> &[SampleSet] {
        &self.samples
    }

    fn truncation(&self) -> f64 {
        self.truncation
    }

    fn ray_terms(&self, traces: &[RayTrace], adjoints: &mut [RayAdjoint]) -> Result<f64> {
        let w = &self.weights;
        let tr = self.truncation;
        let batch = self.batch;
        let renders: Vec<RenderResult> = traces.iter().map(RayTrace::render).collect();
        let sdf: Vec<Vec<f64>> = traces.iter().map(|t| t.sdf.clone()).collect();

        let rgb = ensure_finite("rgb", loss_rgb(batch, &renders))?;
        let depth = ensure_finite("depth", loss_depth(batch, &renders))?;
        let sdf_v = ensure_finite("sdf", sdf_term(batch, &self.samples, &sdf, tr))?;
        let fs = ensure_finite("fs", fs_term(batch, &self.samples, &sdf, tr))?;

        let n_rgb = renders.iter().filter(|r| r.is_valid()).count();
        let n_depth = renders
            .iter()
            .zip(&batch.depths)
            .filter(|(r, d)| r.is_valid() && d.is_some())
            .count();
        let (mut n_sdf, mut n_fs) = (0usize, 0usize);
        for (obs, set) in batch.depths.iter().zip(&self.samples) {
            if let Some(obs) = obs {
                for &d in &set.depths {
                    n_sdf += sdf_target(*obs, d, tr).is_some() as usize;
                    n_fs += is_free_space(*obs, d, tr) as usize;
                }
            }
        }

        for (i, adj) in adjoints.iter_mut().enumerate() {
            let r = &renders[i];
            if r.is_valid() {
                if n_rgb > 0 && w.rgb != 0.0 {
                    let k = 2.0 * w.rgb / n_rgb as f64;
                    for ch in 0..3 {
                        adj.d_color[ch] = k * (r.color[ch] - batch.colors[i][ch]);
                    }
                }
                if let (Some(d), true) = (batch.depths[i], n_depth > 0 && w.depth != 0.0) {
                    adj.d_depth = 2.0 * w.depth * (r.depth - d) / n_depth as f64;
                }
            }
            let Some(obs) = batch.depths[i] else { continue };
            for (j, &d) in self.samples[i].depths.iter().enumerate() {
                let s = sdf[i][j];
                if let Some(t) = sdf_target(obs, d, tr) {
                    adj.d_sdf[j] += 2.0 * w.sdf * (s - t) / n_sdf as f64;
                }
                if is_free_space(obs, d, tr) {
                    adj.d_sdf[j] += 2.0 * w.fs * (s - 1.0) / n_fs as f64;
                }
            }
        }

        let partial = LossBreakdown {
            rgb,
            depth,
            sdf: sdf_v,
            fs,
            smooth: 0.0,
            total: w.rgb * rgb + w.depth * depth + w.sdf * sdf_v + w.fs * fs,
        };
        self.last.set(partial);
        Ok(partial.total)
    }

    fn param_terms(&self, model: &FieldModel, grad: &mut [f64]) -> Result<f64> {
        let params = model.params().values();
        let smooth = ensure_finite("smooth", smooth_value(params, self.features, &self.pairs))?;
        let lam = self.weights.smooth;
        if lam != 0.0 && !self.pairs.is_empty() {
            let k = 2.0 * lam / self.pairs.len() as f64;
            for &(a, b) in &self.pairs {
                for f in 0..self.features {
                    let diff = params[a + f] - params[b + f];
                    grad[a + f] += k * diff;
                    grad[b + f] -= k * diff;
                }
            }
        }
        let mut last = self.last.get();
        last.smooth = smooth;
        last.total += lam * smooth;
        self.last.set(last);
        Ok(lam * smooth)
    }
}

/// Samples the batch with `rng` and evaluates the weighted objective.
pub fn objective(
    model: &FieldModel,
    batch: &RayBatch,
    weights: &LossWeights,
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> Result<(f64, LossBreakdown)> {
    weights.validate()?;
    let mut smooth_rng = Rng::seed_from_u64(rng.random());
    let plan = ObjectivePlan::draw(
        batch,
        &model.arch().grid,
        *weights,
        sampling,
        rng,
        &mut smooth_rng,
    );
    plan.value(model)
}
