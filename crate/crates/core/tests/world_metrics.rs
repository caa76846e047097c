mod common;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use std::f64::consts::TAU;
use taco_core::metrics::{extract_zero_set_fn, nearest_distances, report, PointSet, PointSource};
use taco_core::render::Ray;
use taco_core::rng::{Rng, SeedStream};
use taco_core::world::{raycast, scene_sdf, Scenario, Shape};

fn disk(c: [f64; 2], r: f64) -> Shape {
    Shape::Disk {
        center: c.to_vec(),
        radius: r,
        color: [0.5; 3],
    }
}

fn boxed(c: [f64; 2], h: [f64; 2]) -> Shape {
    Shape::Box {
        center: c.to_vec(),
        half_extents: h.to_vec(),
        color: [0.2; 3],
    }
}

fn set(points: Vec<[f64; 2]>, source: PointSource) -> PointSet {
    PointSet::new(points, source)
}

#[test]
fn union_is_the_minimum_of_member_distances() {
    let shapes = vec![
        disk([0.3, 0.4], 0.1),
        boxed([0.7, 0.6], [0.1, 0.05]),
        disk([0.5, 0.8], 0.05),
    ];
    let mut rng = Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let x = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let oracle = shapes
            .iter()
            .map(|s| s.sdf(&x))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(scene_sdf(&shapes, &x, 10.0, [0.0; 3]).0, oracle);
    }
}

#[test]
fn box_distance_matches_closest_point_oracle() {
    let b = boxed([0.5, 0.5], [0.2, 0.1]);
    let mut rng = Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let x = [rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2)];
        // Dense walk of the boundary; inside points are negative.
        let mut best = f64::INFINITY;
        for k in 0..20_000 {
            let p = b.boundary_point(k as f64 / 20_000.0);
            best = best.min(((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2)).sqrt());
        }
        let inside = (x[0] - 0.5).abs() < 0.2 && (x[1] - 0.5).abs() < 0.1;
        let oracle = if inside { -best } else { best };
        assert!(
            (b.sdf(&x) - oracle).abs() < 1e-4,
            "{x:?}: {} vs {oracle}",
            b.sdf(&x)
        );
    }
}

proptest! {
    #[test]
    fn scene_distance_is_one_lipschitz(
        a in prop::array::uniform2(0.0..1.0f64),
        b in prop::array::uniform2(0.0..1.0f64),
    ) {
        let shapes = vec![disk([0.3, 0.4], 0.1), boxed([0.7, 0.6], [0.1, 0.05])];
        let fa = scene_sdf(&shapes, &a, 10.0, [0.0; 3]).0;
        let fb = scene_sdf(&shapes, &b, 10.0, [0.0; 3]).0;
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        prop_assert!((fa - fb).abs() <= d + 1e-12);
    }

    #[test]
    fn raycast_hits_a_disk_where_the_quadratic_says(
        angle in 0.0..TAU,
        r in 0.05..0.2f64,
    ) {
        let c = [0.5, 0.5];
        let origin = [0.1, 0.45];
        let dir = [angle.cos(), angle.sin()];
        let ray = Ray::new(origin.to_vec(), dir.to_vec(), 2.0).unwrap();
        // |o + t d − c|² = r²
        let oc = [origin[0] - c[0], origin[1] - c[1]];
        let bq = oc[0] * dir[0] + oc[1] * dir[1];
        let cq = oc[0] * oc[0] + oc[1] * oc[1] - r * r;
        let disc = bq * bq - cq;
        let expected = (disc >= 0.0).then(|| -bq - disc.sqrt()).filter(|t| *t > 0.0);
        let hit = raycast(&[disk(c, r)], &ray).map(|h| h.0);
        match (expected, hit) {
            (Some(t), Some(h)) => prop_assert!((t - h).abs() <= 1e-5, "{} vs {}", t, h),
            (None, None) => {}
            // Grazing rays may fall either side of the hit tolerance.
            (e, h) => prop_assert!(disc.abs() < 1e-9, "{:?} vs {:?}", e, h),
        }
    }
}

#[test]
fn circle_extraction_lies_on_the_circle() {
    let r = 0.3;
    let f = |x: &[f64; 2]| ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)).sqrt() - r;
    let pts = extract_zero_set_fn(f, [0.0, 0.0], [1.0, 1.0], 128).unwrap();
    assert!(pts.len() > 100);
    let h = 1.0 / 127.0;
    for p in &pts {
        let err = f(p).abs();
        // Linear interpolation of a circle's distance along an edge errs by
        // at most the chord sagitta, below h²/r.
        assert!(err <= h * h / r, "{p:?} off by {err}");
    }
    let gt: Vec<[f64; 2]> = (0..720)
        .map(|k| {
            let a = TAU * k as f64 / 720.0;
            [0.5 + r * a.cos(), 0.5 + r * a.sin()]
        })
        .collect();
    let m = report(
        &set(pts, PointSource::Reconstructed),
        &set(gt, PointSource::GroundTruth),
        0.01,
    )
    .unwrap();
    assert_eq!(m.precision, 1.0);
    assert_eq!(m.completion, 1.0);
}

#[test]
fn shifted_copy_has_known_distances() {
    let gt: Vec<[f64; 2]> = (0..50).map(|k| [k as f64 * 0.02, 0.0]).collect();
    let shift = 0.003;
    let recon: Vec<[f64; 2]> = gt.iter().map(|p| [p[0], p[1] + shift]).collect();
    let m = report(
        &set(recon, PointSource::Reconstructed),
        &set(gt, PointSource::GroundTruth),
        0.05,
    )
    .unwrap();
    assert!((m.artifacts - shift).abs() < 1e-15);
    assert!((m.holes - shift).abs() < 1e-15);
    assert!((m.chamfer - shift).abs() < 1e-15);
    assert_eq!(m.f1, 1.0);

    let tight = report(
        &set(vec![[0.0, shift]], PointSource::Reconstructed),
        &set(vec![[0.0, 0.0]], PointSource::GroundTruth),
        0.001,
    )
    .unwrap();
    assert_eq!(
        (tight.precision, tight.completion, tight.f1),
        (0.0, 0.0, 0.0)
    );
}

#[test]
fn one_outlier_in_a_hundred() {
    let gt: Vec<[f64; 2]> = (0..100).map(|k| [k as f64 * 0.01, 0.5]).collect();
    let mut recon = gt.clone();
    recon[99] = [0.5, 0.9];
    let m = report(
        &set(recon, PointSource::Reconstructed),
        &set(gt, PointSource::GroundTruth),
        0.05,
    )
    .unwrap();
    assert!((m.precision - 0.99).abs() < 1e-12);
    // The displaced point leaves gt[99] 0.01 from its neighbour gt[98].
    assert_eq!(m.completion, 1.0);
    assert!((m.artifacts - 0.4 / 100.0).abs() < 1e-12, "{}", m.artifacts);
}

#[test]
fn nearest_distances_match_sorted_sweep() {
    let mut rng = Rng::seed_from_u64(4);
    let a: Vec<[f64; 2]> = (0..300)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let mut b: Vec<[f64; 2]> = (0..400)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let got = nearest_distances(
        &set(a.clone(), PointSource::Reconstructed),
        &set(b.clone(), PointSource::GroundTruth),
    )
    .unwrap();
    b.sort_by(|p, q| p[0].total_cmp(&q[0]));
    for (p, d) in a.iter().zip(&got) {
        // Sweep outward in x from p until the x gap alone exceeds the best.
        let start = b.partition_point(|q| q[0] < p[0]);
        let mut best = f64::INFINITY;
        for q in b[start..].iter() {
            if q[0] - p[0] > best {
                break;
            }
            best = best.min(((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt());
        }
        for q in b[..start].iter().rev() {
            if p[0] - q[0] > best {
                break;
            }
            best = best.min(((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt());
        }
        assert_eq!(*d, best);
    }
}

#[test]
fn empty_reconstruction_reports_sentinels() {
    let m = report(
        &set(vec![], PointSource::Reconstructed),
        &set(vec![[0.0, 0.0]], PointSource::GroundTruth),
        0.05,
    )
    .unwrap();
    assert_eq!(m.f1, 0.0);
    assert!(m.chamfer >= taco_core::metrics::EMPTY_SENTINEL);
}

#[test]
fn shipped_scenarios_load_and_observe_deterministically() {
    for name in ["static-two-rooms", "move-one", "multi-stage"] {
        let s = Scenario::load(&common::scenario_path(name)).unwrap();
        assert!(s.total_steps() > 0);
        let seeds = SeedStream::new(7);
        let a = s.observe(3, &seeds).unwrap();
        let b = s.observe(3, &seeds).unwrap();
        assert_eq!(a.depths, b.depths);
        assert_eq!(a.rays.len(), s.sensor.rays_per_frame);
        let hit = a.depths.iter().filter(|d| d.is_some()).count();
        assert!(hit > a.rays.len() / 2, "{name}: only {hit} rays hit");
    }
}

#[test]
fn moving_disk_changes_stage_geometry() {
    let s = Scenario::load(&common::scenario_path("move-one")).unwrap();
    let last = s.stages.len() - 1;
    assert!(last >= 1);
    let before = s.boundary_points(0, 500);
    let after = s.boundary_points(last, 500);
    assert_ne!(before, after);
}
