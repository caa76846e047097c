//! Geometry evaluation: zero-level-set extraction, ground-truth comparison,
//! and the observed-region mask both point sets are culled to.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};
use crate::field::FieldModel;
use crate::loss::RayBatch;

/// Distances reported when the reconstruction has no surface at all.
pub const EMPTY_SENTINEL: f64 = 1.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Reconstructed,
    GroundTruth,
}

impl PointSource {
    pub fn name(self) -> &'static str {
        match self {
            PointSource::Reconstructed => "reconstructed",
            PointSource::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
    pub source: PointSource,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 2]>, source: PointSource) -> Self {
        Self { points, source }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn filtered(&self, keep: impl Fn(&[f64; 2]) -> bool) -> Self {
        Self {
            points: self.points.iter().copied().filter(|p| keep(p)).collect(),
            source: self.source,
        }
    }
}

/// Zero crossings of `f` along every edge of a `resolution × resolution`
/// node lattice spanning `[lo, hi]`, located by linear interpolation.
pub fn extract_zero_set_fn(
    f: impl Fn(&[f64; 2]) -> f64,
    lo: [f64; 2],
    hi: [f64; 2],
    resolution: usize,
) -> Result<Vec<[f64; 2]>> {
    if resolution < 8 {
        return Err(MapError::Config(format!(
            "evaluation resolution must be at least 8, got {resolution}"
        )));
    }
    let n = resolution;
    let step = [
        (hi[0] - lo[0]) / (n - 1) as f64,
        (hi[1] - lo[1]) / (n - 1) as f64,
    ];
    let node = |i: usize, j: usize| [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
    let values: Vec<f64> = (0..n * n).map(|k| f(&node(k % n, k / n))).collect();
    let mut out = Vec::new();
    let mut crossing = |a: [f64; 2], va: f64, b: [f64; 2], vb: f64| {
        if (va < 0.0) != (vb < 0.0) {
            let t = va / (va - vb);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    };
    for j in 0..n {
        for i in 0..n {
            let v = values[j * n + i];
            if i + 1 < n {
                crossing(node(i, j), v, node(i + 1, j), values[j * n + i + 1]);
            }
            if j + 1 < n {
                crossing(node(i, j), v, node(i, j + 1), values[(j + 1) * n + i]);
            }
        }
    }
    Ok(out)
}

/// Reconstructed surface points of a 2D field over its domain.
pub fn extract_zero_set(model: &FieldModel, resolution: usize) -> Result<PointSet> {
    if model.dim() != 2 {
        return Err(MapError::Dimension(
            "zero-set extraction is two-dimensional".into(),
        ));
    }
    let d = model.domain();
    let pts = extract_zero_set_fn(
        |x| model.eval_point(x).0,
        [d.lo[0], d.lo[1]],
        [d.hi[0], d.hi[1]],
        resolution,
    )?;
    if pts.is_empty() {
        log::warn!("reconstruction has no zero crossing");
    }
    Ok(PointSet::new(pts, PointSource::Reconstructed))
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from each point of `a` to its nearest neighbour in `b`.
pub fn nearest_distances(a: &PointSet, b: &PointSet) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(MapError::Empty("point set"));
    }
    Ok(a.points
        .iter()
        .map(|p| {
            b.points
                .iter()
                .map(|q| dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Mean nearest-neighbour distance from `a` to `b`.
pub fn directed_distance(a: &PointSet, b: &PointSet) -> Result<f64> {
    let d = nearest_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub artifacts: f64,
    pub holes: f64,
    pub chamfer: f64,
    pub completion: f64,
    pub precision: f64,
    pub f1: f64,
    pub tau: f64,
    pub recon_points: usize,
    pub gt_points: usize,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 9] = [
        "artifacts",
        "holes",
        "chamfer",
        "completion",
        "precision",
        "f1",
        "tau",
        "recon_points",
        "gt_points",
    ];

    /// Report for an empty reconstruction.
    pub fn empty(gt_points: usize, tau: f64) -> Self {
        Self {
            artifacts: 0.0,
            holes: EMPTY_SENTINEL,
            chamfer: EMPTY_SENTINEL,
            completion: 0.0,
            precision: 0.0,
            f1: 0.0,
            tau,
            recon_points: 0,
            gt_points,
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn report(recon: &PointSet, gt: &PointSet, tau: f64) -> Result<MetricsReport> {
    if !(tau > 0.0) {
        return Err(MapError::Config(format!("tau must be positive, got {tau}")));
    }
    if gt.is_empty() {
        return Err(MapError::Empty("ground-truth point set"));
    }
    if recon.is_empty() {
        return Ok(MetricsReport::empty(gt.len(), tau));
    }
    let to_gt = nearest_distances(recon, gt)?;
    let to_recon = nearest_distances(gt, recon)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within = |v: &[f64]| v.iter().filter(|d| **d <= tau).count() as f64 / v.len() as f64;
    let artifacts = mean(&to_gt);
    let holes = mean(&to_recon);
    let precision = within(&to_gt);
    let completion = within(&to_recon);
    Ok(MetricsReport {
        artifacts,
        holes,
        chamfer: 0.5 * (artifacts + holes),
        completion,
        precision,
        f1: f1_score(precision, completion),
        tau,
        recon_points: recon.len(),
        gt_points: gt.len(),
    })
}

/// Raster of every cell any sensor ray has passed through, up to `margin`
/// beyond its hit.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMask {
    lo: [f64; 2],
    hi: [f64; 2],
    resolution: usize,
    cells: Vec<bool>,
}

impl ObservedMask {
    pub fn new(lo: [f64; 2], hi: [f64; 2], resolution: usize) -> Result<Self> {
        if resolution == 0 || !(hi[0] > lo[0] && hi[1] > lo[1]) {
            return Err(MapError::Config(
                "observed mask needs a non-empty box and resolution".into(),
            ));
        }
        Ok(Self {
            lo,
            hi,
            resolution,
            cells: vec![false; resolution * resolution],
        })
    }

    fn cell_size(&self) -> [f64; 2] {
        let n = self.resolution as f64;
        [(self.hi[0] - self.lo[0]) / n, (self.hi[1] - self.lo[1]) / n]
    }

    fn cell_of(&self, p: &[f64]) -> Option<usize> {
        let s = self.cell_size();
        let i = ((p[0] - self.lo[0]) / s[0]).floor();
        let j = ((p[1] - self.lo[1]) / s[1]).floor();
        let n = self.resolution as f64;
        (i >= 0.0 && j >= 0.0 && i < n && j < n).then(|| j as usize * self.resolution + i as usize)
    }

    pub fn mark_batch(&mut self, batch: &RayBatch, margin: f64) {
        let s = self.cell_size();
        let step = 0.25 * s[0].min(s[1]);
        for (ray, d) in batch.rays.iter().zip(&batch.depths) {
            let end = d.map_or(ray.max_range, |d| (d + margin).min(ray.max_range));
            let mut t = 0.0;
            let mut p = vec![0.0; ray.dim()];
            while t <= end {
                ray.point_at(t, &mut p);
                if let Some(c) = self.cell_of(&p) {
                    self.cells[c] = true;
                }
                t += step;
            }
            ray.point_at(end, &mut p);
            if let Some(c) = self.cell_of(&p) {
                self.cells[c] = true;
            }
        }
    }

    /// Grows the marked region by `cells` in the 8-neighbourhood sense.
    pub fn dilated(&self, cells: usize) -> Self {
        let n = self.resolution as isize;
        let r = cells as isize;
        let mut out = self.clone();
        for j in 0..n {
            for i in 0..n {
                if !self.cells[(j * n + i) as usize] {
                    continue;
                }
                for dj in -r..=r {
                    for di in -r..=r {
                        let (a, b) = (i + di, j + dj);
                        if a >= 0 && b >= 0 && a < n && b < n {
                            out.cells[(b * n + a) as usize] = true;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn contains(&self, p: &[f64; 2]) -> bool {
        self.cell_of(p).is_some_and(|c| self.cells[c])
    }

    pub fn observed_fraction(&self) -> f64 {
        self.cells.iter().filter(|c| **c).count() as f64 / self.cells.len() as f64
    }
}

/// Writes `x,y,source` rows for every point of every set.
pub fn write_points(path: &Path, sets: &[&PointSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MapError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    w.write_record(["x", "y", "source"])?;
    for set in sets {
        for p in &set.points {
            w.write_record([
                format!("{}", p[0]),
                format!("{}", p[1]),
                set.source.name().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| MapError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(p: &[[f64; 2]]) -> PointSet {
        PointSet::new(p.to_vec(), PointSource::Reconstructed)
    }

    #[test]
    fn single_pair_distance() {
        assert_eq!(
            directed_distance(&set(&[[0.0, 0.0]]), &set(&[[3.0, 4.0]])).unwrap(),
            5.0
        );
        assert!(directed_distance(&set(&[]), &set(&[[0.0, 0.0]])).is_err());
    }

    #[test]
    fn perfect_reconstruction() {
        let a = set(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]]);
        let r = report(&a, &a, 0.05).unwrap();
        assert_eq!((r.artifacts, r.holes, r.chamfer), (0.0, 0.0, 0.0));
        assert_eq!((r.completion, r.precision, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_reconstruction_is_sentinel() {
        let r = report(&set(&[]), &set(&[[0.0, 0.0]]), 0.05).unwrap();
        assert_eq!(r.holes, EMPTY_SENTINEL);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn positive_field_has_no_surface() {
        let pts = extract_zero_set_fn(|_| 1.0, [0.0, 0.0], [1.0, 1.0], 16).unwrap();
        assert!(pts.is_empty());
        assert!(extract_zero_set_fn(|_| 1.0, [0.0, 0.0], [1.0, 1.0], 4).is_err());
    }

    #[test]
    fn mask_marks_ray_path_and_dilates() {
        use crate::render::Ray;
        let ray = Ray::new(vec![0.05, 0.5], vec![1.0, 0.0], 2.0).unwrap();
        let batch = RayBatch::new(vec![ray], vec![[0.0; 3]], vec![Some(0.5)], 0).unwrap();
        let mut m = ObservedMask::new([0.0, 0.0], [1.0, 1.0], 20).unwrap();
        m.mark_batch(&batch, 0.05);
        assert!(m.contains(&[0.3, 0.51]));
        assert!(m.contains(&[0.59, 0.51]));
        assert!(!m.contains(&[0.8, 0.51]));
        assert!(!m.contains(&[0.3, 0.6]));
        assert!(m.dilated(2).contains(&[0.3, 0.6]));
    }
}
