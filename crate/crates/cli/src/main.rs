use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use traffic_core::dqn::{train_with, AgentConfig, TrainOptions};
use traffic_core::harness::{
    baseline, evaluate, summarize, sweep, variance_study, write_csv, Driver, EvalSpec, NetworkDriver, SweepRow,
    SweepSpec, DEFAULT_RUNS, DEFAULT_STEPS_PER_RUN, OFFICIAL_BASE_SEED,
};
use traffic_core::neural::{NetworkCheckpoint, QNetwork};
use traffic_core::sim::WorldConfig;

#[derive(Parser)]
#[command(name = "traffic", version, about = "Train and score lane-changing agents on a simulated highway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; its meaning depends on the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed, or the first evaluation run's seed when scoring
    /// (defaults to the official base seed there).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// World config JSON.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS_PER_RUN)]
    steps_per_run: u64,
}

impl EvalArgs {
    fn spec(&self, base_seed: u64) -> EvalSpec {
        EvalSpec {
            runs: self.runs,
            steps_per_run: self.steps_per_run,
            base_seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent (--config: agent config) and write its report,
    /// curves and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training steps (ego decisions).
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long, default_value_t = 1000)]
        curve_interval: u64,
        /// Also score the trained network.
        #[arg(long)]
        evaluate: bool,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Score a checkpoint (--config: agent config) or a baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run a hyperparameter sweep (--config: sweep spec). Rerunning with the
    /// same --out resumes from its journal.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Spread of the median score against the number of runs.
    VarianceStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "noop")]
        baseline: String,
        /// Agent checkpoint to study instead of a baseline; needs --agent.
        #[arg(long, requires = "agent")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        runs_grid: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_STEPS_PER_RUN)]
        steps_per_run: u64,
    },
    /// Score a built-in policy: random, noop or greedy-gap.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        name: String,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn agent_config(path: Option<&PathBuf>) -> Result<AgentConfig> {
    match path {
        Some(p) => Ok(AgentConfig::from_json(&read(p)?).with_context(|| format!("in {}", p.display()))?),
        None => Ok(AgentConfig::default()),
    }
}

fn world_config(path: Option<&PathBuf>) -> Result<WorldConfig> {
    match path {
        Some(p) => Ok(WorldConfig::from_json(&read(p)?).with_context(|| format!("in {}", p.display()))?),
        None => Ok(WorldConfig::default()),
    }
}

fn load_network(path: &Path) -> Result<QNetwork> {
    let ck = NetworkCheckpoint::from_json(&read(path)?)?;
    Ok(QNetwork::from_checkpoint(&ck)?)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_csv(dir: &Path, name: &str) -> Result<fs::File> {
    let path = dir.join(name);
    fs::File::create(&path).with_context(|| format!("creating {}", path.display()))
}

fn score(driver: &dyn Driver, world: &WorldConfig, spec: &EvalSpec, out: &Path) -> Result<f64> {
    let started = Instant::now();
    let report = evaluate(driver, world, spec)?;
    write_json(out, "evaluation.json", &report)?;
    write_csv(&report.rows(), create_csv(out, "runs.csv")?)?;
    eprintln!(
        "{}: median {:.3} mph over {} runs (std {:.3}) in {:.1}s",
        driver.label(),
        report.median_score,
        report.run_count,
        report.score_std,
        started.elapsed().as_secs_f64()
    );
    Ok(report.median_score)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            steps,
            curve_interval,
            evaluate: then_evaluate,
            eval,
        } => {
            let cfg = agent_config(common.config.as_ref())?;
            let world = world_config(common.world.as_ref())?;
            fs::create_dir_all(&common.out)?;
            let started = Instant::now();
            let opts = TrainOptions { curve_interval };
            let report = train_with(&cfg, &world, steps, common.seed.unwrap_or(1), &opts, None)?;
            eprintln!(
                "trained {} steps ({} frames, {} parameters) in {:.1}s",
                report.steps,
                report.frames,
                report.network.parameter_count(),
                started.elapsed().as_secs_f64()
            );
            write_text(&common.out, "report.json", &report.to_json())?;
            write_text(&common.out, "checkpoint.json", &report.network.to_checkpoint().to_json())?;
            write_text(&common.out, "config.json", &cfg.to_json())?;
            report.write_curve_csv(create_csv(&common.out, "curve.csv")?)?;
            if then_evaluate {
                let driver = NetworkDriver::new(report.network, &cfg)?;
                score(&driver, &cfg.world_config(&world), &eval.spec(OFFICIAL_BASE_SEED), &common.out)?;
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            baseline: name,
            eval,
        } => {
            let world = world_config(common.world.as_ref())?;
            fs::create_dir_all(&common.out)?;
            let spec = eval.spec(common.seed.unwrap_or(OFFICIAL_BASE_SEED));
            match (checkpoint, name) {
                (Some(path), None) => {
                    let cfg = agent_config(common.config.as_ref())?;
                    let driver = NetworkDriver::new(load_network(&path)?, &cfg)?;
                    score(&driver, &cfg.world_config(&world), &spec, &common.out)?;
                }
                (None, Some(name)) => {
                    score(baseline(&name)?.as_ref(), &world, &spec, &common.out)?;
                }
                _ => bail!("pass either --checkpoint or --baseline"),
            }
        }
        Command::Sweep { common } => {
            let path = common.config.as_ref().context("sweep needs --config <sweep spec>")?;
            let spec: SweepSpec =
                serde_json::from_str(&read(path)?).with_context(|| format!("in {}", path.display()))?;
            let world = world_config(common.world.as_ref())?;
            fs::create_dir_all(&common.out)?;
            let journal = common.out.join("journal.jsonl");
            let points = sweep(&spec, &world, common.seed.unwrap_or(1), Some(&journal))?;
            let rows: Vec<SweepRow> = points.iter().map(SweepRow::from).collect();
            write_csv(&rows, create_csv(&common.out, "sweep.csv")?)?;
            let summary = summarize(&points);
            write_json(&common.out, "summary.json", &summary)?;
            for s in &summary {
                eprintln!(
                    "{}: {:.3} mph ± {:.3} over {} points",
                    serde_json::to_string(&s.params)?,
                    s.mean_score,
                    s.ci95,
                    s.points
                );
            }
            let failed = points.iter().filter(|p| p.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} points failed; see sweep.csv", points.len());
            }
        }
        Command::VarianceStudy {
            common,
            baseline: name,
            checkpoint,
            agent,
            runs_grid,
            trials,
            steps_per_run,
        } => {
            let world = world_config(common.world.as_ref().or(common.config.as_ref()))?;
            fs::create_dir_all(&common.out)?;
            let (driver, world): (Box<dyn Driver>, WorldConfig) = match checkpoint {
                Some(path) => {
                    let cfg = agent_config(agent.as_ref())?;
                    let d = NetworkDriver::new(load_network(&path)?, &cfg)?;
                    (Box::new(d), cfg.world_config(&world))
                }
                None => (baseline(&name)?, world),
            };
            let seed = common.seed.unwrap_or(OFFICIAL_BASE_SEED);
            let rows = variance_study(driver.as_ref(), &world, &runs_grid, trials, steps_per_run, seed)?;
            write_csv(&rows, create_csv(&common.out, "variance.csv")?)?;
            for r in &rows {
                eprintln!("runs {:>4}: median std {:.4} mph", r.runs, r.median_std);
            }
        }
        Command::Baseline { common, name, eval } => {
            let world = world_config(common.world.as_ref().or(common.config.as_ref()))?;
            fs::create_dir_all(&common.out)?;
            let spec = eval.spec(common.seed.unwrap_or(OFFICIAL_BASE_SEED));
            score(baseline(&name)?.as_ref(), &world, &spec, &common.out)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
