//! Shared fixtures and oracle checks for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use taco_core::consensus::{
    consensus_target, dual_update, mask_weights, primal_update, scale_weights, DualState,
    ImportanceVector, PenaltyForm,
};
use taco_core::field::{DecoderSpec, FieldConfig, FieldModel, ParamLayout, ParamVector};
use taco_core::loss::{LossWeights, ObjectivePlan, SamplingConfig};
use taco_core::optim::DescentConfig;
use taco_core::render::render_weight;
use taco_core::rng::{Rng, SeedStream};
use taco_core::train::{flat_layout, FnObjective};
use taco_core::world::Scenario;

pub type Check = Result<(), String>;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios")).join(format!("{name}.toml"))
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
        .join(format!("{name}.toml"))
}

/// A model small enough for exhaustive checks, with both decoders.
pub fn tiny_model(seed: u64) -> FieldModel {
    let config = FieldConfig {
        levels: 2,
        base_resolution: 4,
        encoding_bins: 4,
        decoder: DecoderSpec {
            hidden_width: 4,
            latent_dim: 2,
            ..DecoderSpec::default()
        },
        ..FieldConfig::default()
    };
    FieldModel::new(config, &mut Rng::seed_from_u64(seed)).unwrap()
}

pub fn pv(v: &[f64]) -> ParamVector {
    ParamVector::new(flat_layout(v.len()), v.to_vec()).unwrap()
}

pub fn imp(v: &[f64]) -> ImportanceVector {
    ImportanceVector::from_values(v.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Check {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

pub fn equal_weight_target_is_mean() -> Check {
    let cur = [0.3, -1.7, 2.5, 1e-3];
    let old = [1.1, 0.4, -2.0, 5.0];
    let w = vec![0.7; 4];
    let z = consensus_target(&pv(&cur), &[&pv(&old)], &w, std::slice::from_ref(&w))
        .map_err(|e| e.to_string())?;
    for i in 0..4 {
        close(
            z.values()[i],
            0.5 * (cur[i] + old[i]),
            1e-12,
            "equal-weight mean",
        )?;
    }
    Ok(())
}

pub fn zero_history_weight_is_identity() -> Check {
    let cur = [0.3, -1.7, 2.5];
    let z = consensus_target(
        &pv(&cur),
        &[&pv(&[9.0, 9.0, 9.0])],
        &[0.2, 1.0, 3.0],
        &[vec![0.0; 3]],
    )
    .map_err(|e| e.to_string())?;
    for i in 0..3 {
        close(z.values()[i], cur[i], 1e-12, "identity")?;
    }
    Ok(())
}

pub fn scaling_is_invariant_and_mean_aligned() -> Check {
    let ut = [0.5, 2.0, 0.0, 7.5, 1.25];
    let uh = [0.25, 1.0, 3.0, 0.0, 0.5];
    let rho = 0.37;
    let (wt, wh) = scale_weights(&imp(&ut), &imp(&uh), rho).map_err(|e| e.to_string())?;
    let mean = wt.iter().zip(&wh).map(|(a, b)| a + b).sum::<f64>() / wt.len() as f64;
    close(mean, rho, 1e-12, "mean alignment")?;
    let k = 1234.5;
    let scaled = |u: &[f64]| imp(&u.iter().map(|v| v * k).collect::<Vec<_>>());
    let (st, sh) = scale_weights(&scaled(&ut), &scaled(&uh), rho).map_err(|e| e.to_string())?;
    for i in 0..ut.len() {
        close(st[i], wt[i], 1e-12, "rescaled current")?;
        close(sh[i], wh[i], 1e-12, "rescaled history")?;
    }
    Ok(())
}

pub fn mask_semantics() -> Check {
    let beta = 0.25;
    let w = [0.0, 0.1, 0.25 - 1e-15, 0.25, 0.3, 4.0];
    let m = mask_weights(&w, beta);
    let expect = [0.0, 0.0, 0.0, 0.25, 0.3, 4.0];
    for i in 0..w.len() {
        close(m[i], expect[i], 1e-12, "mask")?;
    }
    Ok(())
}

pub fn dual_fixed_point() -> Check {
    let layout = flat_layout(3);
    let mut d = DualState {
        p: vec![0.5, -1.0, 2.0],
    };
    let theta = [1.0, 2.0, 3.0];
    dual_update(&mut d, &layout, &theta, &theta, 0.9);
    for (a, b) in d.p.iter().zip([0.5, -1.0, 2.0]) {
        close(*a, b, 1e-12, "dual fixed point")?;
    }
    Ok(())
}

pub fn render_weight_peak_and_symmetry() -> Check {
    close(render_weight(0.0, 0.1), 0.25, 1e-12, "peak")?;
    for s in [1e-4, 0.03, 0.1, 0.7, 3.0] {
        close(
            render_weight(s, 0.1),
            render_weight(-s, 0.1),
            1e-12,
            "symmetry",
        )?;
        if render_weight(s, 0.1) >= 0.25 {
            return Err(format!("weight at {s} reaches the peak"));
        }
    }
    Ok(())
}

pub fn algebraic_suite() -> Vec<(&'static str, Check)> {
    vec![
        ("equal-weight mean", equal_weight_target_is_mean()),
        ("zero history weight", zero_history_weight_is_identity()),
        (
            "scale invariance and mean",
            scaling_is_invariant_and_mean_aligned(),
        ),
        ("mask threshold", mask_semantics()),
        ("dual fixed point", dual_fixed_point()),
        ("render weight", render_weight_peak_and_symmetry()),
    ]
}

/// Method of multipliers on `min (θ−a)²  s.t. θ = z`, with every primal
/// subproblem solved exactly. Returns `(θ, p, rounds)`.
pub fn multiplier_oracle(a: f64, z: f64, rho: f64, max_rounds: usize) -> (f64, f64, usize) {
    let layout: Arc<ParamLayout> = flat_layout(1);
    let mut obj = FnObjective::new(layout.clone(), move |t: &[f64]| {
        ((t[0] - a).powi(2), vec![2.0 * (t[0] - a)])
    });
    // The subproblem is quadratic with curvature 2 + ρ, so one step of
    // length 1/(2+ρ) lands on its minimizer.
    let descent = DescentConfig::uniform(1.0 / (2.0 + rho));
    let mut dual = DualState::zeros(1);
    let mut theta = vec![a];
    for k in 1..=max_rounds {
        theta = primal_update(
            &mut obj,
            &theta,
            &[z],
            &dual,
            rho,
            PenaltyForm::AugmentedLagrangian,
            1,
            &descent,
            0,
        )
        .unwrap()
        .0;
        dual_update(&mut dual, &layout, &theta, &[z], rho);
        if (theta[0] - z).abs() <= 1e-7 && (dual.p[0] - 2.0 * (a - z)).abs() <= 1e-7 {
            return (theta[0], dual.p[0], k);
        }
    }
    (theta[0], dual.p[0], max_rounds)
}

/// The gradient-check model: three grid levels and narrow decoders, under
/// five thousand parameters.
pub fn small_config() -> FieldConfig {
    FieldConfig {
        levels: 3,
        base_resolution: 4,
        encoding_bins: 8,
        decoder: DecoderSpec {
            hidden_width: 12,
            latent_dim: 4,
            ..DecoderSpec::default()
        },
        grid_init_scale: 0.3,
        sdf_init_bias: 0.2,
        ..FieldConfig::default()
    }
}

pub fn with_values(model: &FieldModel, p: &[f64]) -> FieldModel {
    model
        .with_params(ParamVector::new(model.layout().clone(), p.to_vec()).unwrap())
        .unwrap()
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Relative error with a floor of 1e-6 on the denominator, so entries whose
/// true gradient vanishes are judged on absolute error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences (step 1e-5) of the full weighted objective against
/// the analytic gradient on `probes` entries. Returns
/// `(worst relative error, parameter count)`.
pub fn objective_gradient_check(seed: u64, probes: usize) -> (f64, usize) {
    let mut rng = Rng::seed_from_u64(seed);
    let model = FieldModel::new(small_config(), &mut rng).unwrap();
    let seeds = SeedStream::new(seed + 8);
    let scenario = Scenario::load(&scenario_path("static-two-rooms")).unwrap();
    let batch = scenario.observe(4, &seeds).unwrap();
    let weights = LossWeights {
        smooth: 0.5,
        ..LossWeights::default()
    };
    let sampling = SamplingConfig {
        samples: 16,
        near_samples: 4,
        ..SamplingConfig::default()
    };
    let plan =
        ObjectivePlan::for_step(&batch, &model.arch().grid, weights, &sampling, &seeds, 4, 0);
    let (_, _, grad) = plan.value_and_grad(&model).unwrap();

    let x = model.params().values().to_vec();
    let f = |p: &[f64]| plan.value(&with_values(&model, p)).unwrap().0;
    // Half the probes go where the gradient is nonzero so the check is not
    // dominated by untouched grid cells.
    let active: Vec<usize> = (0..x.len()).filter(|&i| grad.values[i] != 0.0).collect();
    let mut idx: Vec<usize> = (0..probes / 2)
        .map(|_| active[rng.random_range(0..active.len())])
        .collect();
    idx.extend((0..probes - probes / 2).map(|_| rng.random_range(0..x.len())));

    let worst = idx
        .iter()
        .map(|&i| relative_error(grad.values[i], central_difference(f, &x, i, 1e-5)))
        .fold(0.0, f64::max);
    (worst, x.len())
}
