mod common;

use std::fs;

use taco_core::runner::{compare, run, RunConfig, RunRecord};
use taco_core::strategies::StrategyKind;
use taco_core::MapError;

/// A short, cheap run of the move-one scenario.
fn quick(kind: StrategyKind, seed: u64, out: Option<&std::path::Path>) -> RunConfig {
    let mut c = RunConfig::load(&common::config_path("move-one")).unwrap();
    c.strategy = kind;
    c.seed = seed;
    c.max_steps = Some(6);
    c.train.steps_per_batch = 2;
    c.consensus.rounds = 1;
    c.consensus.inner_steps = 2;
    c.train.sampling.samples = 8;
    c.train.sampling.near_samples = 2;
    c.eval.interval = 3;
    c.eval.resolution = 32;
    c.eval.gt_points = 200;
    c.out = out.map(Into::into);
    c
}

#[test]
fn identical_configs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&quick(StrategyKind::Taco, 3, Some(a.path()))).unwrap();
    run(&quick(StrategyKind::Taco, 3, Some(b.path()))).unwrap();
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = fs::read(b.path().join("metrics.csv")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    let la = fs::read_to_string(a.path().join("losses.csv")).unwrap();
    let lb = fs::read_to_string(b.path().join("losses.csv")).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn outputs_are_written_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&quick(StrategyKind::Replay, 0, Some(dir.path()))).unwrap();
    for f in ["metrics.csv", "losses.csv", "timing.csv", "record.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let rec = RunRecord::load(&dir.path().join("record.json")).unwrap();
    assert_eq!(rec, out.record);
    let ckpt = rec.final_checkpoint.clone().unwrap();
    let model = taco_core::field::checkpoint::Checkpoint::load(&ckpt)
        .unwrap()
        .into_model()
        .unwrap();
    assert_eq!(model.params().values(), out.model.params().values());

    let header = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,stage,strategy,seed,"));
}

#[test]
fn comparison_aligns_runs_and_rejects_mismatches() {
    let t = run(&quick(StrategyKind::Taco, 1, None)).unwrap().record;
    let n = run(&quick(StrategyKind::Naive, 1, None)).unwrap().record;
    let table = compare(&[t.clone(), n.clone()]).unwrap();
    assert_eq!(table.columns, vec!["taco", "naive"]);
    assert_eq!(table.rows.len(), t.evaluations.len() * 6);
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv)
        .unwrap()
        .starts_with("step,stage,metric,taco,naive"));

    let other_seed = run(&quick(StrategyKind::Naive, 2, None)).unwrap().record;
    assert!(matches!(
        compare(&[t.clone(), other_seed]),
        Err(MapError::Incomparable(_))
    ));
    let mut shorter = n;
    shorter.evaluations.pop();
    assert!(matches!(
        compare(&[t, shorter]),
        Err(MapError::Incomparable(_))
    ));
}

#[test]
fn bad_configs_fail_before_running() {
    let mut c = quick(StrategyKind::Taco, 0, None);
    c.consensus.rho = 0.0;
    assert!(matches!(run(&c), Err(MapError::Config(_))));
    let mut c = quick(StrategyKind::Taco, 0, None);
    c.scenario = "/nonexistent/scenario.toml".into();
    assert!(matches!(run(&c), Err(MapError::Io { .. })));
}

#[test]
fn every_strategy_completes_a_short_run() {
    for kind in StrategyKind::ALL {
        let rec = run(&quick(kind, 0, None)).unwrap().record;
        assert_eq!(rec.steps.len(), 6);
        assert_eq!(rec.importance_violations, 0);
        assert!(rec.final_evaluation().unwrap().metrics.chamfer.is_finite());
    }
}
