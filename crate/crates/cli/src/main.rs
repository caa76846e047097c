//! `taco` command line: run experiments, compare records, export points.

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use taco_core::field::checkpoint::Checkpoint;
use taco_core::metrics::{extract_zero_set, write_points};
use taco_core::runner::{compare, run, RunConfig, RunRecord};
use taco_core::strategies::StrategyKind;
use taco_core::MapError;

#[derive(Parser)]
#[command(
    name = "taco",
    version,
    about = "Continual neural-field mapping experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment. Flags override the matching config keys.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Option<StrategyKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align the evaluations of several runs of one scenario and seed.
    Compare {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the zero level set of a checkpoint as `x,y,source` rows.
    ExportPoints {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            strategy,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out = out;
            }
            if cfg.out.is_none() {
                return Err(MapError::Config(
                    "no output directory: set `out` or pass --out".into(),
                )
                .into());
            }
            let output = run(&cfg)?;
            if let Some(e) = output.record.final_evaluation() {
                println!(
                    "{} seed {} step {}: chamfer {:.6} f1 {:.4} artifacts {:.6} holes {:.6}",
                    cfg.strategy,
                    cfg.seed,
                    e.step,
                    e.metrics.chamfer,
                    e.metrics.f1,
                    e.metrics.artifacts,
                    e.metrics.holes
                );
            }
        }
        Command::Compare { records, csv } => {
            let loaded = records
                .iter()
                .map(|p| RunRecord::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let table = compare(&loaded)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                let file = std::fs::File::create(&path).map_err(|e| MapError::io(&path, e))?;
                table.write_csv(file)?;
            }
        }
        Command::ExportPoints {
            checkpoint,
            resolution,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?.into_model()?;
            let points = extract_zero_set(&model, resolution)?;
            match out {
                Some(path) => write_points(&path, &[&points])?,
                None => {
                    let mut w = io::stdout().lock();
                    use io::Write;
                    writeln!(w, "x,y,source")?;
                    for p in &points.points {
                        writeln!(w, "{},{},{}", p[0], p[1], points.source.name())?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<MapError>()
                .map_or(1, MapError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
