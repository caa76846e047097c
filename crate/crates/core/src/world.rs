//! Synthetic 2D world: analytic-SDF shapes arranged in stages, a scripted
//! sensor, and exact ray observations.

use std::f64::consts::TAU;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::field::Rgb;
use crate::loss::RayBatch;
use crate::render::Ray;
use crate::rng::{Purpose, SeedStream};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Sphere tracing stops once `|sdf|` falls below this.
pub const HIT_EPSILON: f64 = 1e-6;
const MAX_MARCH_STEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Disk {
        center: Vec<f64>,
        radius: f64,
        color: Rgb,
    },
    Box {
        center: Vec<f64>,
        half_extents: Vec<f64>,
        color: Rgb,
    },
}

impl Shape {
    pub fn color(&self) -> Rgb {
        match self {
            Shape::Disk { color, .. } | Shape::Box { color, .. } => *color,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Shape::Disk { center, .. } | Shape::Box { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.color().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(MapError::Config("shape colour must lie in [0, 1]".into()));
        }
        match self {
            Shape::Disk { radius, .. } if !(*radius > 0.0) => Err(MapError::Config(format!(
                "disk radius must be positive, got {radius}"
            ))),
            Shape::Box {
                center,
                half_extents,
                ..
            } => {
                if half_extents.len() != center.len() {
                    return Err(MapError::Dimension(
                        "box extents and centre differ in length".into(),
                    ));
                }
                if half_extents.iter().any(|h| !(*h > 0.0)) {
                    return Err(MapError::Config("box half-extents must be positive".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Exact signed distance from `x`.
    pub fn sdf(&self, x: &[f64]) -> f64 {
        match self {
            Shape::Disk { center, radius, .. } => {
                x.iter()
                    .zip(center)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt()
                    - radius
            }
            Shape::Box {
                center,
                half_extents,
                ..
            } => {
                let mut outside = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for ((a, c), h) in x.iter().zip(center).zip(half_extents) {
                    let q = (a - c).abs() - h;
                    outside += q.max(0.0).powi(2);
                    inside = inside.max(q);
                }
                outside.sqrt() + inside.min(0.0)
            }
        }
    }

    /// Total boundary length (2D only).
    pub fn perimeter(&self) -> f64 {
        match self {
            Shape::Disk { radius, .. } => TAU * radius,
            Shape::Box { half_extents, .. } => 4.0 * (half_extents[0] + half_extents[1]),
        }
    }

    /// Boundary point at arc-length fraction `t ∈ [0, 1)` (2D only).
    pub fn boundary_point(&self, t: f64) -> [f64; 2] {
        match self {
            Shape::Disk { center, radius, .. } => {
                let a = TAU * t;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
            Shape::Box {
                center,
                half_extents,
                ..
            } => {
                let (hx, hy) = (half_extents[0], half_extents[1]);
                let mut s = t * self.perimeter();
                let (x0, y0) = (center[0] - hx, center[1] - hy);
                let (x1, y1) = (center[0] + hx, center[1] + hy);
                if s < 2.0 * hx {
                    return [x0 + s, y0];
                }
                s -= 2.0 * hx;
                if s < 2.0 * hy {
                    return [x1, y0 + s];
                }
                s -= 2.0 * hy;
                if s < 2.0 * hx {
                    return [x1 - s, y1];
                }
                s -= 2.0 * hx;
                [x0, y1 - s]
            }
        }
    }
}

/// The shapes present from `active_from` until the next stage begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneStage {
    pub active_from: u64,
    #[serde(default)]
    pub shapes: Vec<Shape>,
}

/// Union distance and the colour of the closest shape. An empty scene
/// reports `far` and `background`.
pub fn scene_sdf(shapes: &[Shape], x: &[f64], far: f64, background: Rgb) -> (f64, Rgb) {
    let mut best = (far, background);
    let mut found = false;
    for s in shapes {
        let d = s.sdf(x);
        if !found || d < best.0 {
            best = (d, s.color());
            found = true;
        }
    }
    best
}

/// Sphere-traced first hit along `ray` within its range.
pub fn raycast(shapes: &[Shape], ray: &Ray) -> Option<(f64, Rgb)> {
    let mut t = 0.0;
    let mut p = vec![0.0; ray.dim()];
    for _ in 0..MAX_MARCH_STEPS {
        ray.point_at(t, &mut p);
        let (d, c) = scene_sdf(shapes, &p, f64::INFINITY, [0.0; 3]);
        if d.abs() < HIT_EPSILON {
            return (t > 0.0 && t <= ray.max_range).then_some((t, c));
        }
        t += d;
        if t > ray.max_range || !t.is_finite() {
            return None;
        }
    }
    None
}

/// One arc of the sensor path. Position is `center + radius·(cos a, sin a)`
/// with `a` swept linearly from `angle_start` to `angle_end`; the sensor
/// looks along `a + heading_offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryLeg {
    pub steps: u64,
    pub center: [f64; 2],
    #[serde(default)]
    pub radius: f64,
    pub angle_start: f64,
    pub angle_end: f64,
    #[serde(default)]
    pub heading_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 2],
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    pub fov: f64,
    pub rays_per_frame: usize,
    pub depth_noise_sigma: f64,
    pub max_range: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            fov: std::f64::consts::FRAC_PI_2,
            rays_per_frame: 64,
            depth_noise_sigma: 0.002,
            max_range: 1.5,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_frame == 0 {
            return Err(MapError::Config("rays_per_frame must be at least 1".into()));
        }
        if !(self.fov > 0.0 && self.fov <= TAU) {
            return Err(MapError::Config(format!(
                "fov must lie in (0, 2π], got {}",
                self.fov
            )));
        }
        if !(self.depth_noise_sigma >= 0.0 && self.depth_noise_sigma.is_finite()) {
            return Err(MapError::Config(
                "depth_noise_sigma must be finite and non-negative".into(),
            ));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(MapError::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    /// Unit ray directions fanned evenly across the field of view.
    pub fn ray_angles(&self, heading: f64) -> Vec<f64> {
        let n = self.rays_per_frame as f64;
        (0..self.rays_per_frame)
            .map(|k| heading - 0.5 * self.fov + self.fov * (k as f64 + 0.5) / n)
            .collect()
    }
}

/// A complete scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_background")]
    pub background: Rgb,
    /// Shapes present in every stage, such as walls.
    #[serde(default)]
    pub static_shapes: Vec<Shape>,
    pub stages: Vec<SceneStage>,
    #[serde(default)]
    pub sensor: SensorSpec,
    pub trajectory: Vec<TrajectoryLeg>,
}

fn default_background() -> Rgb {
    [0.0; 3]
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| MapError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MapError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            MapError::Config(m) => MapError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(MapError::Config(format!(
                "scenario schema_version {} is not supported (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.stages.is_empty() {
            return Err(MapError::Config("scenario needs at least one stage".into()));
        }
        if self.stages[0].active_from != 0 {
            return Err(MapError::Config(
                "the first stage must start at step 0".into(),
            ));
        }
        if self
            .stages
            .windows(2)
            .any(|w| w[1].active_from <= w[0].active_from)
        {
            return Err(MapError::Config(
                "stage start steps must strictly increase".into(),
            ));
        }
        for s in self
            .static_shapes
            .iter()
            .chain(self.stages.iter().flat_map(|s| &s.shapes))
        {
            s.validate()?;
            if s.dim() != 2 {
                return Err(MapError::Dimension(
                    "scenario shapes must be two-dimensional".into(),
                ));
            }
        }
        if self.trajectory.is_empty() || self.total_steps() == 0 {
            return Err(MapError::Config(
                "trajectory must contain at least one step".into(),
            ));
        }
        self.sensor.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.trajectory.iter().map(|l| l.steps).sum()
    }

    /// Index of the stage active at `step`.
    pub fn stage_index(&self, step: u64) -> usize {
        self.stages
            .iter()
            .rposition(|s| s.active_from <= step)
            .unwrap_or(0)
    }

    pub fn stage_at(&self, step: u64) -> &SceneStage {
        &self.stages[self.stage_index(step)]
    }

    /// Static shapes followed by those of stage `index`.
    pub fn shapes_of_stage(&self, index: usize) -> Vec<Shape> {
        self.static_shapes
            .iter()
            .chain(&self.stages[index].shapes)
            .cloned()
            .collect()
    }

    pub fn shapes_at(&self, step: u64) -> Vec<Shape> {
        self.shapes_of_stage(self.stage_index(step))
    }

    pub fn pose_at(&self, step: u64) -> Result<Pose> {
        let mut rest = step;
        for leg in &self.trajectory {
            if rest < leg.steps {
                let f = if leg.steps > 1 {
                    rest as f64 / (leg.steps - 1) as f64
                } else {
                    0.0
                };
                let a = leg.angle_start + (leg.angle_end - leg.angle_start) * f;
                return Ok(Pose {
                    position: [
                        leg.center[0] + leg.radius * a.cos(),
                        leg.center[1] + leg.radius * a.sin(),
                    ],
                    heading: a + leg.heading_offset,
                });
            }
            rest -= leg.steps;
        }
        Err(MapError::Config(format!(
            "step {step} is beyond the trajectory ({} steps)",
            self.total_steps()
        )))
    }

    /// Sensor rays of `step`, before any raycasting.
    pub fn rays_at(&self, step: u64) -> Result<Vec<Ray>> {
        let pose = self.pose_at(step)?;
        self.sensor
            .ray_angles(pose.heading)
            .into_iter()
            .map(|a| {
                Ray::new(
                    pose.position.to_vec(),
                    vec![a.cos(), a.sin()],
                    self.sensor.max_range,
                )
            })
            .collect()
    }

    /// The observation batch of `step`.
    pub fn observe(&self, step: u64, seeds: &SeedStream) -> Result<RayBatch> {
        let shapes = self.shapes_at(step);
        let rays = self.rays_at(step)?;
        let mut rng = seeds.rng(step, Purpose::Observe, 0);
        let noise = Normal::new(0.0, self.sensor.depth_noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| MapError::Config(e.to_string()))?;
        let mut colors = Vec::with_capacity(rays.len());
        let mut depths = Vec::with_capacity(rays.len());
        for ray in &rays {
            match raycast(&shapes, ray) {
                Some((d, c)) => {
                    let d = if self.sensor.depth_noise_sigma > 0.0 {
                        d + noise.sample(&mut rng)
                    } else {
                        d
                    };
                    depths.push(Some(d.clamp(1e-6, ray.max_range)));
                    colors.push(c);
                }
                None => {
                    depths.push(None);
                    colors.push(self.background);
                }
            }
        }
        RayBatch::new(rays, colors, depths, step)
    }

    /// `count` points spread evenly by arc length over every shape of stage
    /// `index`, keeping those on the union boundary.
    pub fn boundary_points(&self, index: usize, count: usize) -> Vec<[f64; 2]> {
        boundary_points(&self.shapes_of_stage(index), count)
    }
}

/// Evenly spaced perimeter samples of `shapes` lying on their union boundary.
pub fn boundary_points(shapes: &[Shape], count: usize) -> Vec<[f64; 2]> {
    let total: f64 = shapes.iter().map(Shape::perimeter).sum();
    if count == 0 || !(total > 0.0) {
        return Vec::new();
    }
    let spacing = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut offset = 0.0;
    for (k, shape) in shapes.iter().enumerate() {
        let p = shape.perimeter();
        // Global arc positions (i + 0.5)·spacing that fall on this shape.
        let first = ((offset / spacing) - 0.5).ceil().max(0.0) as usize;
        let mut i = first;
        loop {
            let s = (i as f64 + 0.5) * spacing - offset;
            if s >= p || i >= count {
                break;
            }
            let x = shape.boundary_point(s / p);
            let covered = shapes
                .iter()
                .enumerate()
                .any(|(j, o)| j != k && o.sdf(&x) < -1e-9);
            if !covered {
                out.push(x);
            }
            i += 1;
        }
        offset += p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(c: [f64; 2], r: f64) -> Shape {
        Shape::Disk {
            center: c.to_vec(),
            radius: r,
            color: [1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn disk_distance() {
        let d = disk([0.0, 0.0], 1.0);
        assert_eq!(d.sdf(&[2.0, 0.0]), 1.0);
        assert_eq!(d.sdf(&[0.0, 0.0]), -1.0);
    }

    #[test]
    fn box_distance() {
        let b = Shape::Box {
            center: vec![0.0, 0.0],
            half_extents: vec![1.0, 2.0],
            color: [0.0; 3],
        };
        assert_eq!(b.sdf(&[3.0, 0.0]), 2.0);
        assert_eq!(b.sdf(&[0.0, 0.0]), -1.0);
        assert!((b.sdf(&[4.0, 6.0]) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn box_perimeter_walk_stays_on_boundary() {
        let b = Shape::Box {
            center: vec![0.3, 0.4],
            half_extents: vec![0.1, 0.2],
            color: [0.0; 3],
        };
        for k in 0..100 {
            let p = b.boundary_point(k as f64 / 100.0);
            assert!(b.sdf(&p).abs() < 1e-12);
        }
    }

    #[test]
    fn raycast_through_disk_centre() {
        let shapes = [disk([2.0, 0.0], 0.5)];
        let ray = Ray::new(vec![0.0, 0.0], vec![1.0, 0.0], 10.0).unwrap();
        let (d, c) = raycast(&shapes, &ray).unwrap();
        assert!((d - 1.5).abs() < 1e-5);
        assert_eq!(c, [1.0, 0.0, 0.0]);
        let away = Ray::new(vec![0.0, 0.0], vec![-1.0, 0.0], 10.0).unwrap();
        assert!(raycast(&shapes, &away).is_none());
    }

    #[test]
    fn empty_scene_reports_far() {
        assert_eq!(scene_sdf(&[], &[0.0, 0.0], 3.0, [0.5; 3]), (3.0, [0.5; 3]));
    }

    #[test]
    fn union_boundary_drops_covered_points() {
        let shapes = [disk([0.0, 0.0], 1.0), disk([1.0, 0.0], 1.0)];
        let pts = boundary_points(&shapes, 1000);
        assert!(pts.len() < 1000 && pts.len() > 500);
        for p in pts {
            let (d, _) = scene_sdf(&shapes, &p, 1.0, [0.0; 3]);
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_sampling_counts() {
        let pts = boundary_points(&[disk([0.0, 0.0], 1.0)], 2000);
        assert_eq!(pts.len(), 2000);
    }
}
