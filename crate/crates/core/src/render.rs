//! Ray sampling and SDF-weighted volume rendering.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::field::mlp::sigmoid;
use crate::field::{FieldModel, PointTape, Rgb, COLOR_CHANNELS};
use crate::rng::Rng;

/// Renders whose total weight is below this are treated as degenerate.
pub const MIN_WEIGHT_SUM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec<f64>,
    pub direction: Vec<f64>,
    pub max_range: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec<f64>, direction: Vec<f64>, max_range: f64) -> Result<Self> {
        if origin.len() != direction.len() {
            return Err(MapError::Dimension(
                "ray origin and direction differ in length".into(),
            ));
        }
        let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(MapError::Config("ray direction must be non-zero".into()));
        }
        if !(max_range > 0.0) {
            return Err(MapError::Config("ray range must be positive".into()));
        }
        let direction = direction.into_iter().map(|d| d / norm).collect();
        Ok(Self {
            origin,
            direction,
            max_range,
        })
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn point_at(&self, depth: f64, out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.origin[a] + depth * self.direction[a];
        }
    }

    pub fn at(&self, depth: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_at(depth, &mut p);
        p
    }
}

/// Strictly increasing sample depths along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
}

impl SampleSet {
    pub fn new(depths: Vec<f64>) -> Result<Self> {
        if depths.len() < 2 {
            return Err(MapError::Config(
                "a sample set needs at least two depths".into(),
            ));
        }
        if depths.windows(2).any(|w| !(w[1] > w[0])) || !(depths[0] > 0.0) {
            return Err(MapError::Config(
                "sample depths must be positive and increasing".into(),
            ));
        }
        Ok(Self { depths })
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Rendered colour and depth of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderResult {
    pub color: Rgb,
    pub depth: f64,
    pub weight_sum: f64,
}

impl RenderResult {
    /// False when the ray is degenerate and must be left out of losses.
    pub fn is_valid(&self) -> bool {
        self.weight_sum >= MIN_WEIGHT_SUM
    }
}

/// Draws `m - m_near` stratified depths on `(0, max_range]` plus, when a depth
/// was observed, `m_near` uniform depths within `±tr` of it.
pub fn sample_ray(
    ray: &Ray,
    observed_depth: Option<f64>,
    m: usize,
    m_near: usize,
    tr: f64,
    rng: &mut Rng,
) -> SampleSet {
    assert!(m >= 2, "at least two samples per ray");
    let near = if observed_depth.is_some() {
        m_near.min(m - 1)
    } else {
        0
    };
    let strat = m - near;
    let width = ray.max_range / strat as f64;
    let mut depths = Vec::with_capacity(m);
    for k in 0..strat {
        let jitter = 1.0 - rng.random::<f64>();
        depths.push(((k as f64 + jitter) * width).min(ray.max_range));
    }
    if let Some(d) = observed_depth {
        let lo = (d - tr).max(0.0);
        let hi = (d + tr).min(ray.max_range);
        for _ in 0..near {
            let t = 1.0 - rng.random::<f64>();
            depths.push(lo + (hi - lo) * t);
        }
    }
    depths.sort_by(f64::total_cmp);
    for i in 1..depths.len() {
        if depths[i] <= depths[i - 1] {
            depths[i] = depths[i - 1].next_up();
        }
    }
    SampleSet { depths }
}

/// Bell-shaped render weight `σ(s/tr)·σ(−s/tr)`, peaking at 1/4 when `s = 0`.
pub fn render_weight(s: f64, tr: f64) -> f64 {
    let e = (-(s / tr).abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Derivative of [`render_weight`] with respect to `s`.
pub fn render_weight_grad(s: f64, tr: f64) -> f64 {
    let a = s / tr;
    render_weight(s, tr) * (1.0 - 2.0 * sigmoid(a)) / tr
}

/// Per-sample predictions of one rendered ray.
#[derive(Debug, Clone, Default)]
pub struct RayTrace {
    pub depths: Vec<f64>,
    pub sdf: Vec<f64>,
    pub colors: Vec<Rgb>,
    pub weights: Vec<f64>,
    pub tapes: Vec<PointTape>,
    pub result: Option<RenderResult>,
}

impl RayTrace {
    pub fn render(&self) -> RenderResult {
        self.result.expect("trace rendered")
    }
}

pub(crate) fn combine(depths: &[f64], colors: &[Rgb], weights: &[f64]) -> RenderResult {
    let weight_sum: f64 = weights.iter().sum();
    let mut color = [0.0; COLOR_CHANNELS];
    let mut depth = 0.0;
    if weight_sum >= MIN_WEIGHT_SUM {
        for ((w, c), d) in weights.iter().zip(colors).zip(depths) {
            for ch in 0..COLOR_CHANNELS {
                color[ch] += w * c[ch];
            }
            depth += w * d;
        }
        for c in &mut color {
            *c /= weight_sum;
        }
        depth /= weight_sum;
    }
    RenderResult {
        color,
        depth,
        weight_sum,
    }
}

/// Renders a ray and keeps every intermediate needed for backpropagation.
pub fn trace_ray(model: &FieldModel, ray: &Ray, samples: &SampleSet, tr: f64) -> RayTrace {
    let m = samples.len();
    let mut trace = RayTrace {
        depths: samples.depths.clone(),
        sdf: Vec::with_capacity(m),
        colors: Vec::with_capacity(m),
        weights: Vec::with_capacity(m),
        tapes: Vec::with_capacity(m),
        result: None,
    };
    let mut x = vec![0.0; ray.dim()];
    for &d in &samples.depths {
        ray.point_at(d, &mut x);
        let mut tape = PointTape::default();
        model.forward_point(&x, &mut tape);
        let s = tape.sdf();
        trace.sdf.push(s);
        trace.colors.push(tape.color());
        trace.weights.push(render_weight(s, tr));
        trace.tapes.push(tape);
    }
    trace.result = Some(combine(&trace.depths, &trace.colors, &trace.weights));
    trace
}

/// Weighted colour and depth of a ray through `model`.
pub fn render_ray(model: &FieldModel, ray: &Ray, samples: &SampleSet, tr: f64) -> RenderResult {
    let mut x = vec![0.0; ray.dim()];
    let mut colors = Vec::with_capacity(samples.len());
    let mut weights = Vec::with_capacity(samples.len());
    for &d in &samples.depths {
        ray.point_at(d, &mut x);
        let (s, c) = model.eval_point(&x);
        colors.push(c);
        weights.push(render_weight(s, tr));
    }
    combine(&samples.depths, &colors, &weights)
}

/// Adjoints of a ray's rendered outputs, pushed back to per-sample adjoints
/// of `s` and `c`. Returns `(d_s, d_c)` per sample, adding `direct_ds`.
pub(crate) fn backprop_render(
    trace: &RayTrace,
    d_color: &Rgb,
    d_depth: f64,
    tr: f64,
) -> (Vec<f64>, Vec<Rgb>) {
    let m = trace.depths.len();
    let r = trace.render();
    let mut d_s = vec![0.0; m];
    let mut d_c = vec![[0.0; COLOR_CHANNELS]; m];
    if !r.is_valid() {
        return (d_s, d_c);
    }
    let inv = 1.0 / r.weight_sum;
    for i in 0..m {
        let w = trace.weights[i];
        let mut d_w = d_depth * (trace.depths[i] - r.depth) * inv;
        for ch in 0..COLOR_CHANNELS {
            d_w += d_color[ch] * (trace.colors[i][ch] - r.color[ch]) * inv;
            d_c[i][ch] = d_color[ch] * w * inv;
        }
        d_s[i] = d_w * render_weight_grad(trace.sdf[i], tr);
    }
    (d_s, d_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ray() -> Ray {
        Ray::new(vec![0.0, 0.0], vec![1.0, 1.0], 2.0).unwrap()
    }

    #[test]
    fn weight_peak_and_tails() {
        assert_eq!(render_weight(0.0, 0.1), 0.25);
        assert!(render_weight(1.0, 0.1) < 1e-4);
        assert!(render_weight(-1.0, 0.1) < 1e-4);
        let expected = sigmoid(1.0) * sigmoid(-1.0);
        assert!((render_weight(0.1, 0.1) - expected).abs() < 1e-15);
        assert!((expected - 0.19661).abs() < 1e-5);
    }

    #[test]
    fn weight_gradient_matches_difference_quotient() {
        for &s in &[-0.3, -0.05, 0.0, 0.02, 0.17] {
            let h = 1e-7;
            let fd = (render_weight(s + h, 0.1) - render_weight(s - h, 0.1)) / (2.0 * h);
            assert!((fd - render_weight_grad(s, 0.1)).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_weighted_depth() {
        let r = combine(&[1.0, 2.0], &[[0.0; 3], [0.0; 3]], &[1.0, 3.0]);
        assert!((r.depth - 1.75).abs() < 1e-15);
        assert_eq!(r.weight_sum, 4.0);
    }

    #[test]
    fn constant_colour_is_reproduced() {
        let c = [0.2, 0.4, 0.9];
        let r = combine(&[0.5, 0.6, 0.9], &[c, c, c], &[0.01, 0.2, 0.003]);
        for ch in 0..3 {
            assert!((r.color[ch] - c[ch]).abs() < 1e-15);
        }
    }

    #[test]
    fn concentrated_weight_picks_its_depth() {
        let r = combine(&[0.5, 0.7, 0.9], &[[0.0; 3]; 3], &[1e-17, 0.25, 1e-17]);
        assert!((r.depth - 0.7).abs() < 1e-9);
    }

    #[test]
    fn degenerate_render_is_flagged() {
        let r = combine(&[0.5, 0.7], &[[0.0; 3]; 2], &[1e-14, 1e-14]);
        assert!(!r.is_valid());
    }

    #[test]
    fn sampling_is_seeded_sorted_and_in_range() {
        let r = ray();
        let a = sample_ray(&r, Some(1.2), 32, 8, 0.1, &mut Rng::seed_from_u64(9));
        let b = sample_ray(&r, Some(1.2), 32, 8, 0.1, &mut Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert!(a.depths.windows(2).all(|w| w[1] > w[0]));
        assert!(a.depths.iter().all(|&d| d > 0.0 && d <= 2.0));
        let near = a.depths.iter().filter(|&&d| (d - 1.2).abs() <= 0.1).count();
        assert!(near >= 8);
    }

    #[test]
    fn sampling_without_depth_is_stratified() {
        let s = sample_ray(&ray(), None, 16, 8, 0.1, &mut Rng::seed_from_u64(1));
        assert_eq!(s.len(), 16);
        for (k, d) in s.depths.iter().enumerate() {
            assert!(*d > k as f64 * 0.125 && *d <= (k + 1) as f64 * 0.125);
        }
    }

    #[test]
    fn ray_direction_is_normalized() {
        let r = ray();
        let n: f64 = r.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(Ray::new(vec![0.0, 0.0], vec![0.0, 0.0], 1.0).is_err());
    }
}
