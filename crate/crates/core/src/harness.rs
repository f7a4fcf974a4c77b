//! Scoring protocol, baseline drivers, evaluation-variance study and
//! hyperparameter sweeps.
//!
//! A run is one seeded world simulated for a fixed number of frames. Its score
//! is the mean, over frames, of the average effective speed of the red cars.
//! A submission's score is the median over runs seeded `base_seed + index`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqn::{argmax, train, AgentConfig, ConfigError, Perceiver, TrainError, ACTION_COUNT};
use crate::neural::{ForwardScratch, QNetwork};
use crate::perception::{OccupancyGrid, SensorConfig};
use crate::sim::{Action, Direction, SimError, VehicleId, World, WorldConfig, EGO_ID, GRID_ROWS, LANE_COUNT};

/// Base seed of the published evaluation protocol.
pub const OFFICIAL_BASE_SEED: u64 = 0x5EED;
pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_STEPS_PER_RUN: u64 = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("unknown baseline {0:?}; expected random, noop or greedy-gap")]
    UnknownBaseline(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Chooses actions for red cars during one run.
pub trait Policy {
    fn act(&mut self, world: &World, grid: &OccupancyGrid, id: VehicleId) -> Action;
}

/// Makes a fresh [`Policy`] for each run. Shared across evaluation threads.
pub trait Driver: Sync {
    fn label(&self) -> String;
    fn policy(&self, run_seed: u64) -> Box<dyn Policy + '_>;
}

const POLICY_STREAM: u64 = 3;

fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(POLICY_STREAM);
    rng
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoopDriver;

struct Noop;

impl Policy for Noop {
    fn act(&mut self, _: &World, _: &OccupancyGrid, _: VehicleId) -> Action {
        Action::NoOp
    }
}

impl Driver for NoopDriver {
    fn label(&self) -> String {
        "noop".into()
    }

    fn policy(&self, _: u64) -> Box<dyn Policy + '_> {
        Box::new(Noop)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomDriver;

struct RandomPolicy(ChaCha8Rng);

impl Policy for RandomPolicy {
    fn act(&mut self, _: &World, _: &OccupancyGrid, _: VehicleId) -> Action {
        Action::ALL[self.0.gen_range(0..ACTION_COUNT)]
    }
}

impl Driver for RandomDriver {
    fn label(&self) -> String {
        "random".into()
    }

    fn policy(&self, run_seed: u64) -> Box<dyn Policy + '_> {
        Box::new(RandomPolicy(policy_rng(run_seed)))
    }
}

/// Moves toward the adjacent lane with the longest free stretch ahead,
/// otherwise holds the lane at full throttle.
#[derive(Debug, Clone, Copy)]
pub struct GreedyGapDriver {
    pub horizon_rows: usize,
}

impl Default for GreedyGapDriver {
    fn default() -> Self {
        Self { horizon_rows: 20 }
    }
}

/// Empty rows ahead of `nose_row` in `lane`, up to `horizon`. Rows past the
/// top of the road count as empty.
pub fn free_rows_ahead(grid: &OccupancyGrid, lane: usize, nose_row: i64, horizon: usize) -> usize {
    let mut free = 0;
    for k in 1..=horizon as i64 {
        let row = nose_row - k;
        if (0..GRID_ROWS as i64).contains(&row) && grid.get(lane, row as usize) != 0.0 {
            break;
        }
        free += 1;
    }
    free
}

impl Policy for GreedyGapDriver {
    fn act(&mut self, world: &World, grid: &OccupancyGrid, id: VehicleId) -> Action {
        let v = world.vehicle(id);
        let lane = v.lane();
        let nose = crate::sim::row_of(v.y);
        let own = free_rows_ahead(grid, lane, nose, self.horizon_rows);
        let mut best: Option<(usize, Action)> = None;
        for (dir, action, adj) in [
            (Direction::Left, Action::LaneLeft, lane.checked_sub(1)),
            (Direction::Right, Action::LaneRight, Some(lane + 1).filter(|&l| l < LANE_COUNT)),
        ] {
            let Some(adj) = adj else { continue };
            if !world.lane_change_permitted(id, dir) {
                continue;
            }
            let gap = free_rows_ahead(grid, adj, nose, self.horizon_rows);
            if gap > own && best.is_none_or(|(g, _)| gap > g) {
                best = Some((gap, action));
            }
        }
        match best {
            Some((_, action)) => action,
            None if v.commanded_speed() < v.speed_max => Action::Accelerate,
            None => Action::NoOp,
        }
    }
}

impl Driver for GreedyGapDriver {
    fn label(&self) -> String {
        "greedy-gap".into()
    }

    fn policy(&self, _: u64) -> Box<dyn Policy + '_> {
        Box::new(*self)
    }
}

pub fn baseline(name: &str) -> Result<Box<dyn Driver>, HarnessError> {
    match name {
        "random" => Ok(Box::new(RandomDriver)),
        "noop" => Ok(Box::new(NoopDriver)),
        "greedy-gap" => Ok(Box::new(GreedyGapDriver::default())),
        other => Err(HarnessError::UnknownBaseline(other.to_string())),
    }
}

/// A trained network driving every red car. The ego explores with
/// `epsilon`; clones always act greedily.
#[derive(Debug, Clone)]
pub struct NetworkDriver {
    pub net: QNetwork,
    pub sensor: SensorConfig,
    pub epsilon: f64,
}

impl NetworkDriver {
    pub fn new(net: QNetwork, cfg: &AgentConfig) -> Result<Self, ConfigError> {
        if net.input_width() != cfg.input_width() || net.output_width() != ACTION_COUNT {
            return Err(ConfigError {
                path: "layers".into(),
                reason: format!(
                    "network maps {} inputs to {} outputs, config needs {} to {ACTION_COUNT}",
                    net.input_width(),
                    net.output_width(),
                    cfg.input_width()
                ),
            });
        }
        Ok(Self {
            net,
            sensor: cfg.sensor,
            epsilon: cfg.epsilon_test,
        })
    }
}

struct NetworkPolicy<'a> {
    net: &'a QNetwork,
    perceiver: Perceiver,
    scratch: ForwardScratch,
    epsilon: f64,
    rng: ChaCha8Rng,
}

impl Policy for NetworkPolicy<'_> {
    fn act(&mut self, world: &World, grid: &OccupancyGrid, id: VehicleId) -> Action {
        let (slice, input) = self.perceiver.observe(grid, world, id);
        let a = if id == EGO_ID && self.epsilon > 0.0 && self.rng.gen::<f64>() < self.epsilon {
            self.rng.gen_range(0..ACTION_COUNT)
        } else {
            let q = self
                .net
                .forward_with(&input, &mut self.scratch)
                .expect("driver checked the input width");
            argmax(q)
        };
        self.perceiver.record(id, slice, a);
        Action::ALL[a]
    }
}

impl Driver for NetworkDriver {
    fn label(&self) -> String {
        format!("network({} parameters)", self.net.parameter_count())
    }

    fn policy(&self, run_seed: u64) -> Box<dyn Policy + '_> {
        Box::new(NetworkPolicy {
            net: &self.net,
            perceiver: Perceiver::new(self.sensor),
            scratch: ForwardScratch::default(),
            epsilon: self.epsilon,
            rng: policy_rng(run_seed),
        })
    }
}

/// Simulate `steps` frames of `world` under `policy` and return the mean red
/// car speed in mph.
pub fn run_world(policy: &mut dyn Policy, mut world: World, steps: u64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for _ in 0..steps {
        let mut grid: Option<OccupancyGrid> = None;
        let outcome = world.advance(|w, id| {
            let g = grid.get_or_insert_with(|| OccupancyGrid::build(w));
            policy.act(w, g, id)
        });
        let reds = &outcome.red_speeds_mph;
        total += reds.iter().sum::<f64>() / reds.len() as f64;
    }
    total / steps as f64
}

pub fn run_once(driver: &dyn Driver, world_cfg: &WorldConfig, steps: u64, seed: u64) -> Result<f64, HarnessError> {
    if steps == 0 {
        return Err(HarnessError::Invalid("steps must be at least 1".into()));
    }
    let world = World::new(world_cfg.clone(), seed)?;
    let mut policy = driver.policy(seed);
    Ok(run_world(policy.as_mut(), world, steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub runs: usize,
    pub steps_per_run: u64,
    pub base_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            steps_per_run: DEFAULT_STEPS_PER_RUN,
            base_seed: OFFICIAL_BASE_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_scores: Vec<f64>,
    pub median_score: f64,
    pub run_count: usize,
    pub steps_per_run: u64,
    pub seeds: Vec<u64>,
    pub score_std: f64,
}

/// Exact median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn evaluate(driver: &dyn Driver, world_cfg: &WorldConfig, spec: &EvalSpec) -> Result<EvaluationReport, HarnessError> {
    evaluate_with(driver, world_cfg, spec, true)
}

/// Same result whether the runs execute in parallel or one after another.
pub fn evaluate_with(
    driver: &dyn Driver,
    world_cfg: &WorldConfig,
    spec: &EvalSpec,
    parallel: bool,
) -> Result<EvaluationReport, HarnessError> {
    if spec.runs == 0 {
        return Err(HarnessError::Invalid("runs must be at least 1".into()));
    }
    world_cfg.validate()?;
    let seeds: Vec<u64> = (0..spec.runs as u64).map(|k| spec.base_seed.wrapping_add(k)).collect();
    let one = |&seed: &u64| run_once(driver, world_cfg, spec.steps_per_run, seed);
    let scores: Result<Vec<f64>, HarnessError> = if parallel {
        seeds.par_iter().map(one).collect()
    } else {
        seeds.iter().map(one).collect()
    };
    let run_scores = scores?;
    Ok(EvaluationReport {
        median_score: median(&run_scores),
        score_std: sample_std(&run_scores),
        run_count: spec.runs,
        steps_per_run: spec.steps_per_run,
        seeds,
        run_scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    pub score: f64,
}

impl EvaluationReport {
    pub fn rows(&self) -> Vec<RunRow> {
        self.run_scores
            .iter()
            .zip(&self.seeds)
            .enumerate()
            .map(|(run, (&score, &seed))| RunRow { run, seed, score })
            .collect()
    }
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned, R: std::io::Read>(input: R) -> Result<Vec<T>, HarnessError> {
    Ok(csv::Reader::from_reader(input).deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub runs: usize,
    pub trials: usize,
    pub mean_median: f64,
    pub median_std: f64,
}

/// For each run count `R`, score `trials` independent evaluations of `R` runs
/// and report the spread of their medians. Trial `t` uses the seeds
/// `seed + t·max(R) + i`, so smaller run counts reuse a prefix of each trial.
pub fn variance_study(
    driver: &dyn Driver,
    world_cfg: &WorldConfig,
    runs_grid: &[usize],
    trials: usize,
    steps_per_run: u64,
    seed: u64,
) -> Result<Vec<VarianceRow>, HarnessError> {
    if trials < 2 {
        return Err(HarnessError::Invalid("trials must be at least 2".into()));
    }
    if runs_grid.is_empty() || runs_grid.contains(&0) {
        return Err(HarnessError::Invalid("run counts must be positive".into()));
    }
    let max_runs = *runs_grid.iter().max().expect("non-empty");
    let jobs: Vec<(usize, usize)> = (0..trials).flat_map(|t| (0..max_runs).map(move |i| (t, i))).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let s = seed.wrapping_add((t * max_runs + i) as u64);
            run_once(driver, world_cfg, steps_per_run, s)
        })
        .collect::<Result<_, _>>()?;
    Ok(runs_grid
        .iter()
        .map(|&r| {
            let medians: Vec<f64> = (0..trials)
                .map(|t| median(&scores[t * max_runs..t * max_runs + r]))
                .collect();
            VarianceRow {
                runs: r,
                trials,
                mean_median: mean(&medians),
                median_std: sample_std(&medians),
            }
        })
        .collect())
}

/// Standard deviation of the median of `r` draws (with replacement) from
/// `pool`, estimated from `resamples` bootstrap resamples.
pub fn bootstrap_median_std(pool: &[f64], r: usize, resamples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = vec![0.0; r];
    let medians: Vec<f64> = (0..resamples)
        .map(|_| {
            for d in draw.iter_mut() {
                *d = pool[rng.gen_range(0..pool.len())];
            }
            median(&draw)
        })
        .collect();
    sample_std(&medians)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the agent config document (`gamma`,
    /// `tdtrainer_options.learning_rate`, `patchesAhead`, …) or
    /// `hidden_width` for the width of every hidden layer.
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
    /// Sampled uniformly (log-uniformly with `log`) in random mode when no
    /// values are listed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    #[serde(default)]
    pub log: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: AgentConfig,
    pub axes: Vec<SweepAxis>,
    #[serde(default = "grid_mode")]
    pub mode: SweepMode,
    /// Most configurations to try.
    pub budget: usize,
    #[serde(default = "one")]
    pub seeds_per_point: usize,
    pub train_steps: u64,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn grid_mode() -> SweepMode {
    SweepMode::Grid
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub config_index: usize,
    /// Training seed.
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub config: AgentConfig,
    pub parameter_count: usize,
    pub training_steps: u64,
    pub score: Option<f64>,
    pub score_std: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl SweepPoint {
    /// Equal apart from timing.
    pub fn same_result(&self, other: &SweepPoint) -> bool {
        SweepPoint {
            wall_time_s: 0.0,
            ..self.clone()
        } == SweepPoint {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Set named parameters on a copy of `base` and validate the result.
pub fn apply_params(base: &AgentConfig, params: &BTreeMap<String, f64>) -> Result<AgentConfig, ConfigError> {
    let mut doc = serde_json::to_value(base).expect("config serializes");
    for (name, &value) in params {
        let bad = |reason: &str| ConfigError {
            path: name.clone(),
            reason: reason.into(),
        };
        if !value.is_finite() {
            return Err(bad("value must be finite"));
        }
        if name == "hidden_width" {
            if value < 1.0 {
                return Err(bad("must be at least 1"));
            }
            let layers = doc["layers"].as_array_mut().expect("layers is an array");
            for layer in layers {
                layer["width"] = serde_json::Value::from(value.round() as u64);
            }
            continue;
        }
        let mut slot = &mut doc;
        for part in name.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| bad("no such parameter"))?;
        }
        *slot = if slot.is_u64() {
            if value < 0.0 {
                return Err(bad("must be non-negative"));
            }
            serde_json::Value::from(value.round() as u64)
        } else if slot.is_number() {
            serde_json::Value::from(value)
        } else {
            return Err(bad("not a numeric parameter"));
        };
    }
    let cfg: AgentConfig = serde_json::from_value(doc).map_err(|e| ConfigError {
        path: "$".into(),
        reason: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn sweep_configs(spec: &SweepSpec, seed: u64) -> Vec<BTreeMap<String, f64>> {
    match spec.mode {
        SweepMode::Grid => {
            let mut out: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
            for axis in &spec.axes {
                out = out
                    .into_iter()
                    .flat_map(|p| {
                        axis.values.iter().map(move |&v| {
                            let mut q = p.clone();
                            q.insert(axis.name.clone(), v);
                            q
                        })
                    })
                    .collect();
            }
            out.truncate(spec.budget);
            out
        }
        SweepMode::Random => (0..spec.budget)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1000 + c as u64);
                spec.axes
                    .iter()
                    .map(|axis| {
                        let v = if !axis.values.is_empty() {
                            axis.values[rng.gen_range(0..axis.values.len())]
                        } else {
                            let [lo, hi] = axis.range.expect("validated");
                            let u: f64 = rng.gen();
                            if axis.log {
                                (lo.ln() + u * (hi.ln() - lo.ln())).exp()
                            } else {
                                lo + u * (hi - lo)
                            }
                        };
                        (axis.name.clone(), v)
                    })
                    .collect()
            })
            .collect(),
    }
}

fn validate_spec(spec: &SweepSpec) -> Result<(), HarnessError> {
    let bad = |m: String| Err(HarnessError::Invalid(m));
    if spec.budget == 0 {
        return bad("budget must be at least 1".into());
    }
    if spec.seeds_per_point == 0 {
        return bad("seeds_per_point must be at least 1".into());
    }
    if spec.eval.runs == 0 || spec.eval.steps_per_run == 0 {
        return bad("evaluation needs at least one run of one step".into());
    }
    for axis in &spec.axes {
        match (spec.mode, axis.values.is_empty(), axis.range) {
            (SweepMode::Grid, true, _) => return bad(format!("axis {} lists no values", axis.name)),
            (SweepMode::Random, true, None) => return bad(format!("axis {} has neither values nor range", axis.name)),
            (SweepMode::Random, true, Some([lo, hi]))
                if (!(lo.is_finite() && hi.is_finite() && lo <= hi) || (axis.log && lo <= 0.0)) => {
                    return bad(format!("axis {} has an invalid range", axis.name));
                }
            _ => {}
        }
    }
    Ok(())
}

/// Train and score one configuration.
pub fn train_and_evaluate(
    cfg: &AgentConfig,
    world_cfg: &WorldConfig,
    train_steps: u64,
    seed: u64,
    eval: &EvalSpec,
) -> Result<(crate::dqn::TrainReport, EvaluationReport), HarnessError> {
    let report = train(cfg, world_cfg, train_steps, seed)?;
    let driver = NetworkDriver::new(report.network.clone(), cfg)?;
    let scores = evaluate(&driver, &cfg.world_config(world_cfg), eval)?;
    Ok((report, scores))
}

fn read_journal(path: &Path) -> Result<HashMap<usize, SweepPoint>, HarnessError> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(e.into()),
    };
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A crash mid-write leaves a partial last line; that point reruns.
        if let Ok(p) = serde_json::from_str::<SweepPoint>(&line) {
            done.insert(p.index, p);
        }
    }
    Ok(done)
}

/// Train and evaluate one agent per (configuration, seed). Completed points
/// are appended to `journal` as JSON lines; rerunning with the same journal
/// skips them. A point that fails is recorded with its error and the sweep
/// carries on.
pub fn sweep(
    spec: &SweepSpec,
    world_cfg: &WorldConfig,
    seed: u64,
    journal: Option<&Path>,
) -> Result<Vec<SweepPoint>, HarnessError> {
    validate_spec(spec)?;
    let configs = sweep_configs(spec, seed);
    let k = spec.seeds_per_point;
    let mut planned = Vec::with_capacity(configs.len() * k);
    for (c, params) in configs.into_iter().enumerate() {
        for s in 0..k {
            planned.push((c * k + s, c, seed.wrapping_add(s as u64), params.clone()));
        }
    }

    let done = match journal {
        Some(p) => read_journal(p)?,
        None => HashMap::new(),
    };
    for (index, c, s, params) in &planned {
        if let Some(p) = done.get(index) {
            if p.config_index != *c || p.seed != *s || &p.params != params {
                return Err(HarnessError::Journal(format!(
                    "entry {index} was written by a different sweep"
                )));
            }
        }
    }
    let writer = match journal {
        Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };

    let todo: Vec<_> = planned.iter().filter(|(i, ..)| !done.contains_key(i)).collect();
    let fresh: Vec<SweepPoint> = todo
        .par_iter()
        .map(|(index, c, s, params)| -> Result<SweepPoint, HarnessError> {
            let started = Instant::now();
            let mut point = SweepPoint {
                index: *index,
                config_index: *c,
                seed: *s,
                params: params.clone(),
                config: spec.base.clone(),
                parameter_count: 0,
                training_steps: 0,
                score: None,
                score_std: None,
                wall_time_s: 0.0,
                error: None,
            };
            match apply_params(&spec.base, params) {
                Err(e) => point.error = Some(e.to_string()),
                Ok(cfg) => {
                    point.parameter_count = cfg.parameter_count();
                    point.config = cfg.clone();
                    match train_and_evaluate(&cfg, world_cfg, spec.train_steps, *s, &spec.eval) {
                        Ok((report, eval)) => {
                            point.training_steps = report.steps;
                            point.score = Some(eval.median_score);
                            point.score_std = Some(eval.score_std);
                        }
                        Err(e) => point.error = Some(e.to_string()),
                    }
                }
            }
            point.wall_time_s = started.elapsed().as_secs_f64();
            if let Some(w) = &writer {
                let line = serde_json::to_string(&point).expect("point serializes");
                let mut f = w.lock().expect("journal lock");
                writeln!(f, "{line}")?;
                f.flush()?;
            }
            Ok(point)
        })
        .collect::<Result<_, _>>()?;

    let mut all: Vec<SweepPoint> = done
        .into_values()
        .filter(|p| p.index < planned.len())
        .chain(fresh)
        .collect();
    all.sort_by_key(|p| p.index);
    Ok(all)
}

/// Flat CSV form of a sweep point; parameters are a JSON object column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub config_index: usize,
    pub seed: u64,
    pub params: String,
    pub parameter_count: usize,
    pub training_steps: u64,
    pub score: Option<f64>,
    pub score_std: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl From<&SweepPoint> for SweepRow {
    fn from(p: &SweepPoint) -> Self {
        Self {
            index: p.index,
            config_index: p.config_index,
            seed: p.seed,
            params: serde_json::to_string(&p.params).expect("params serialize"),
            parameter_count: p.parameter_count,
            training_steps: p.training_steps,
            score: p.score,
            score_std: p.score_std,
            wall_time_s: p.wall_time_s,
            error: p.error.clone(),
        }
    }
}

/// Mean score and a normal-approximation 95% interval per distinct
/// parameter set, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub params: BTreeMap<String, f64>,
    pub points: usize,
    pub mean_score: f64,
    pub ci95: f64,
}

pub fn summarize(points: &[SweepPoint]) -> Vec<SweepSummary> {
    let mut order: Vec<usize> = Vec::new();
    let mut groups: BTreeMap<usize, (BTreeMap<String, f64>, Vec<f64>)> = BTreeMap::new();
    for p in points {
        let entry = groups.entry(p.config_index).or_insert_with(|| {
            order.push(p.config_index);
            (p.params.clone(), Vec::new())
        });
        if let Some(s) = p.score {
            entry.1.push(s);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let (params, scores) = &groups[&c];
            let n = scores.len();
            SweepSummary {
                params: params.clone(),
                points: n,
                mean_score: if n > 0 { mean(scores) } else { f64::NAN },
                ci95: if n > 1 {
                    1.96 * sample_std(scores) / (n as f64).sqrt()
                } else {
                    f64::NAN
                },
            }
        })
        .collect()
}
