//! Config-driven experiment harness: streams a scenario into a strategy,
//! evaluates on schedule, and writes CSV, JSON and checkpoint outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::consensus::{ConsensusConfig, StepReport};
use crate::error::{MapError, Result};
use crate::field::checkpoint::Checkpoint;
use crate::field::{FieldConfig, FieldModel};
use crate::loss::{LossBreakdown, LossWeights};
use crate::metrics::{
    extract_zero_set, report, write_points, MetricsReport, ObservedMask, PointSet, PointSource,
};
use crate::rng::{Purpose, SeedStream};
use crate::strategies::{BaselineConfig, Strategy, StrategyKind};
use crate::train::{StepContext, TrainConfig};
use crate::world::Scenario;

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate after every `interval` steps.
    pub interval: u64,
    /// Also evaluate right before and right after each stage change.
    pub stage_boundaries: bool,
    pub resolution: usize,
    pub gt_points: usize,
    pub tau: f64,
    pub mask_resolution: usize,
    pub mask_dilation: usize,
    pub export_points: bool,
    pub checkpoints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 25,
            stage_boundaries: true,
            resolution: 256,
            gt_points: 2000,
            tau: 0.05,
            mask_resolution: 128,
            mask_dilation: 1,
            export_points: true,
            checkpoints: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(MapError::Config("eval interval must be at least 1".into()));
        }
        if self.resolution < 8 {
            return Err(MapError::Config(
                "eval resolution must be at least 8".into(),
            ));
        }
        if self.gt_points == 0 || self.mask_resolution == 0 {
            return Err(MapError::Config(
                "gt_points and mask_resolution must be positive".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(MapError::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// One run, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Scenario file, relative to the config file.
    pub scenario: PathBuf,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Truncates the scenario's trajectory.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(scenario: impl Into<PathBuf>, strategy: StrategyKind) -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            scenario: scenario.into(),
            strategy,
            seed: 0,
            out: None,
            max_steps: None,
            field: FieldConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            consensus: ConsensusConfig::default(),
            baselines: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| MapError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config and resolves its scenario path against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MapError::io(path, e))?;
        let mut c = Self::from_toml(&text).map_err(|e| match e {
            MapError::Config(m) => MapError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if c.scenario.is_relative() {
            if let Some(dir) = path.parent() {
                c.scenario = dir.join(&c.scenario);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(MapError::Config(format!(
                "run schema_version {} is not supported (expected {RUN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.consensus.validate()?;
        self.baselines.validate()?;
        self.eval.validate()
    }

    pub fn context(&self) -> StepContext {
        StepContext {
            seeds: SeedStream::new(self.seed),
            weights: self.loss,
            train: self.train,
        }
    }
}

/// Per-step log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub stage: usize,
    pub loss: LossBreakdown,
    pub residual: Option<f64>,
    pub mean_w_current: Option<f64>,
    pub mean_w_history: Option<f64>,
    pub masked_fraction: Option<f64>,
    pub state_words: usize,
    pub importance_violations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: u64,
    pub stage: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub steps: Vec<StepRow>,
    pub evaluations: Vec<Evaluation>,
    pub importance_violations: usize,
    pub final_checkpoint: Option<PathBuf>,
    /// Set when the run stopped early on an error.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn final_evaluation(&self) -> Option<&Evaluation> {
        self.evaluations.last()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MapError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MapError::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| MapError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| MapError::io(path, e))
    }
}

/// Everything a finished run leaves in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model: FieldModel,
    pub mask: ObservedMask,
}

/// Steps after which an evaluation is taken.
pub fn eval_steps(scenario: &Scenario, total: u64, eval: &EvalConfig) -> Vec<u64> {
    let mut steps: Vec<u64> = (0..total)
        .filter(|s| (s + 1) % eval.interval == 0)
        .collect();
    if eval.stage_boundaries {
        for st in scenario.stages.iter().skip(1) {
            let b = st.active_from;
            for s in [b.checked_sub(1), Some(b)].into_iter().flatten() {
                if s < total {
                    steps.push(s);
                }
            }
        }
    }
    if total > 0 {
        steps.push(total - 1);
    }
    steps.sort_unstable();
    steps.dedup();
    steps
}

fn domain_box(field: &FieldConfig) -> Result<([f64; 2], [f64; 2])> {
    if field.domain_lo.len() != 2 || field.domain_hi.len() != 2 {
        return Err(MapError::Dimension(
            "the runner evaluates two-dimensional fields only".into(),
        ));
    }
    Ok((
        [field.domain_lo[0], field.domain_lo[1]],
        [field.domain_hi[0], field.domain_hi[1]],
    ))
}

/// Scores `model` against stage `stage` inside the observed region.
pub fn evaluate(
    model: &FieldModel,
    scenario: &Scenario,
    stage: usize,
    mask: &ObservedMask,
    eval: &EvalConfig,
) -> Result<(MetricsReport, PointSet, PointSet)> {
    let recon = extract_zero_set(model, eval.resolution)?.filtered(|p| mask.contains(p));
    let gt = PointSet::new(
        scenario.boundary_points(stage, eval.gt_points),
        PointSource::GroundTruth,
    )
    .filtered(|p| mask.contains(p));
    if gt.is_empty() {
        return Ok((MetricsReport::empty(0, eval.tau), recon, gt));
    }
    Ok((report(&recon, &gt, eval.tau)?, recon, gt))
}

struct Sinks {
    dir: PathBuf,
    metrics: csv::Writer<fs::File>,
    losses: csv::Writer<fs::File>,
    timing: csv::Writer<fs::File>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Sinks {
    fn open(dir: &Path, eval: &EvalConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| MapError::io(dir, e))?;
        for (on, sub) in [
            (eval.export_points, "points"),
            (eval.checkpoints, "checkpoints"),
        ] {
            if on {
                let p = dir.join(sub);
                fs::create_dir_all(&p).map_err(|e| MapError::io(&p, e))?;
            }
        }
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        let mut header = vec!["step", "stage", "strategy", "seed"];
        header.extend(MetricsReport::COLUMNS);
        metrics.write_record(&header)?;
        let mut losses = csv::Writer::from_path(dir.join("losses.csv"))?;
        let mut header = vec!["step", "stage"];
        header.extend(LossBreakdown::TERMS);
        header.extend([
            "residual",
            "mean_w_current",
            "mean_w_history",
            "masked_fraction",
            "state_words",
            "importance_violations",
        ]);
        losses.write_record(&header)?;
        let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
        timing.write_record(["step", "seconds"])?;
        Ok(Self {
            dir: dir.into(),
            metrics,
            losses,
            timing,
        })
    }

    fn step(&mut self, row: &StepRow) -> Result<()> {
        let mut rec = vec![row.step.to_string(), row.stage.to_string()];
        rec.extend(row.loss.values().iter().map(f64::to_string));
        rec.extend([
            fmt_opt(row.residual),
            fmt_opt(row.mean_w_current),
            fmt_opt(row.mean_w_history),
            fmt_opt(row.masked_fraction),
            row.state_words.to_string(),
            row.importance_violations.to_string(),
        ]);
        self.losses.write_record(&rec)?;
        self.timing
            .write_record([row.step.to_string(), row.seconds.to_string()])?;
        Ok(())
    }

    fn evaluation(&mut self, e: &Evaluation, strategy: StrategyKind, seed: u64) -> Result<()> {
        let m = &e.metrics;
        let rec = [
            e.step.to_string(),
            e.stage.to_string(),
            strategy.name().to_string(),
            seed.to_string(),
            m.artifacts.to_string(),
            m.holes.to_string(),
            m.chamfer.to_string(),
            m.completion.to_string(),
            m.precision.to_string(),
            m.f1.to_string(),
            m.tau.to_string(),
            m.recon_points.to_string(),
            m.gt_points.to_string(),
        ];
        self.metrics.write_record(&rec)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics, &mut self.losses, &mut self.timing] {
            w.flush().map_err(|e| MapError::io(&self.dir, e))?;
        }
        Ok(())
    }
}

/// Loads the scenario named by `config` and runs it.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let scenario = Scenario::load(&config.scenario)?;
    run_scenario(config, &scenario)
}

/// Runs `config` on an already loaded scenario. Outputs go to `config.out`
/// when set; a failed run still flushes what it produced.
pub fn run_scenario(config: &RunConfig, scenario: &Scenario) -> Result<RunOutput> {
    config.validate()?;
    scenario.validate()?;
    let (lo, hi) = domain_box(&config.field)?;
    let seeds = SeedStream::new(config.seed);
    let model = FieldModel::new(config.field.clone(), &mut seeds.rng(0, Purpose::Init, 0))?;
    let mut strategy = Strategy::new(config.strategy, model, config.consensus, config.baselines)?;
    let ctx = config.context();
    let total = config
        .max_steps
        .map_or(scenario.total_steps(), |m| m.min(scenario.total_steps()));
    let evals = eval_steps(scenario, total, &config.eval);
    let mut mask = ObservedMask::new(lo, hi, config.eval.mask_resolution)?;
    let mut sinks = config
        .out
        .as_deref()
        .map(|d| Sinks::open(d, &config.eval))
        .transpose()?;

    let mut record = RunRecord {
        scenario: scenario.name.clone(),
        strategy: config.strategy,
        seed: config.seed,
        steps: Vec::with_capacity(total as usize),
        evaluations: Vec::new(),
        importance_violations: 0,
        final_checkpoint: None,
        aborted: None,
    };

    let outcome = (|| -> Result<()> {
        for step in 0..total {
            let stage = scenario.stage_index(step);
            let batch = scenario.observe(step, &seeds)?;
            if batch.step != step {
                return Err(MapError::Config(format!(
                    "batch of step {} delivered at step {step}",
                    batch.step
                )));
            }
            mask.mark_batch(&batch, config.eval.tau);
            let started = Instant::now();
            let out = strategy.step(&batch, &ctx)?;
            let seconds = started.elapsed().as_secs_f64();
            let rep: Option<StepReport> = out.consensus;
            let row = StepRow {
                step,
                stage,
                loss: out.breakdown,
                residual: rep.map(|r| r.residual),
                mean_w_current: rep.map(|r| r.mean_w_current),
                mean_w_history: rep.map(|r| r.mean_w_history),
                masked_fraction: rep.map(|r| r.masked_fraction),
                state_words: strategy.tracked_state_words(),
                importance_violations: out.importance_violations,
                seconds,
            };
            record.importance_violations += out.importance_violations;
            if let Some(s) = sinks.as_mut() {
                s.step(&row)?;
            }
            record.steps.push(row);

            if evals.binary_search(&step).is_ok() {
                let dilated = mask.dilated(config.eval.mask_dilation);
                let (metrics, recon, gt) =
                    evaluate(strategy.model(), scenario, stage, &dilated, &config.eval)?;
                let e = Evaluation {
                    step,
                    stage,
                    metrics,
                };
                if let Some(s) = sinks.as_mut() {
                    s.evaluation(&e, config.strategy, config.seed)?;
                    if config.eval.export_points {
                        write_points(
                            &s.dir.join("points").join(format!("step_{step}.csv")),
                            &[&recon, &gt],
                        )?;
                    }
                    if config.eval.checkpoints {
                        let path = s.dir.join("checkpoints").join(format!("step_{step}.json"));
                        Checkpoint::from_model(strategy.model(), step).save(&path)?;
                        record.final_checkpoint = Some(path);
                    }
                }
                log::info!(
                    "step {step} stage {stage}: chamfer {:.5} f1 {:.4}",
                    e.metrics.chamfer,
                    e.metrics.f1
                );
                record.evaluations.push(e);
            }
        }
        Ok(())
    })();

    if let Err(e) = &outcome {
        record.aborted = Some(e.to_string());
    }
    if let Some(s) = sinks.as_mut() {
        s.flush()?;
        record.save(&s.dir.join("record.json"))?;
    }
    outcome?;
    Ok(RunOutput {
        record,
        model: strategy.model().clone(),
        mask: mask.dilated(config.eval.mask_dilation),
    })
}

/// Per-evaluation metric table with one column per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    /// `(step, stage, metric, values)` rows.
    pub rows: Vec<(u64, usize, &'static str, Vec<f64>)>,
}

pub fn compare(records: &[RunRecord]) -> Result<Comparison> {
    let first = records.first().ok_or(MapError::Empty("record list"))?;
    for r in records {
        if r.scenario != first.scenario || r.seed != first.seed {
            return Err(MapError::Incomparable(format!(
                "{}/{} vs {}/{}",
                first.scenario, first.seed, r.scenario, r.seed
            )));
        }
        let a: Vec<_> = r.evaluations.iter().map(|e| (e.step, e.stage)).collect();
        let b: Vec<_> = first
            .evaluations
            .iter()
            .map(|e| (e.step, e.stage))
            .collect();
        if a != b {
            return Err(MapError::Incomparable("evaluation schedules differ".into()));
        }
    }
    let columns = records
        .iter()
        .map(|r| r.strategy.name().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, e) in first.evaluations.iter().enumerate() {
        for (k, name) in MetricsReport::COLUMNS.iter().enumerate().take(6) {
            let values = records
                .iter()
                .map(|r| {
                    let m = &r.evaluations[i].metrics;
                    [
                        m.artifacts,
                        m.holes,
                        m.chamfer,
                        m.completion,
                        m.precision,
                        m.f1,
                    ][k]
                })
                .collect();
            rows.push((e.step, e.stage, *name, values));
        }
    }
    Ok(Comparison { columns, rows })
}

impl Comparison {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "stage".into(), "metric".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (step, stage, metric, values) in &self.rows {
            let mut rec = vec![step.to_string(), stage.to_string(), metric.to_string()];
            rec.extend(values.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| MapError::io("<comparison>", e))?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6} {:>5} {:>10}", "step", "stage", "metric");
        for c in &self.columns {
            let _ = write!(s, " {c:>12}");
        }
        s.push('\n');
        for (step, stage, metric, values) in &self.rows {
            let _ = write!(s, "{step:>6} {stage:>5} {metric:>10}");
            for v in values {
                let _ = write!(s, " {v:>12.6}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_includes_boundaries_and_end() {
        let text = r#"
            schema_version = 1
            name = "t"
            [[stages]]
            active_from = 0
            [[stages]]
            active_from = 30
            [[trajectory]]
            steps = 60
            center = [0.5, 0.5]
            angle_start = 0.0
            angle_end = 1.0
        "#;
        let s = Scenario::from_toml(text).unwrap();
        let eval = EvalConfig {
            interval: 25,
            ..Default::default()
        };
        assert_eq!(eval_steps(&s, 60, &eval), vec![24, 29, 30, 49, 59]);
    }

    #[test]
    fn config_rejects_unknown_keys_and_versions() {
        let ok = "schema_version = 1\nscenario = \"x.toml\"\nstrategy = \"taco\"\n";
        assert!(RunConfig::from_toml(ok).is_ok());
        assert!(RunConfig::from_toml(&format!("{ok}bogus = 1\n")).is_err());
        assert!(RunConfig::from_toml(&ok.replace("= 1", "= 9")).is_err());
        assert!(RunConfig::from_toml(&ok.replace("taco", "nope")).is_err());
    }
}
