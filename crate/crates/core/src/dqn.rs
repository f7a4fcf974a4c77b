//! Deep Q-learning with uniform experience replay and an annealed
//! epsilon-greedy policy.
//!
//! One environment step is one decision of the ego car. The reward for a
//! decision is the ego's mean driven speed over the following cycle, divided
//! by 80. There is no terminal state and no frozen target network.

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{
    Activation, ForwardScratch, LayerDef, LayerSpec, NetworkCheckpoint, NeuralError, QNetwork, Sample, Trainer,
    TrainerOpts,
};
use crate::perception::{input_size, slice_state, InputHistory, OccupancyGrid, SensorConfig, SPEED_SCALE};
use crate::sim::{Action, SimError, StepOutcome, VehicleId, World, WorldConfig, EGO_ID, VEHICLE_COUNT};

pub const ACTION_COUNT: usize = Action::COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {reason}")]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

fn config_error(path: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Network(NeuralError),
    #[error("diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("cancelled at step {step}")]
    Cancelled { step: u64 },
}

/// Every knob of the agent. Serialized with the competition's variable names;
/// see [`AgentConfig::from_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AgentConfigDoc", into = "AgentConfigDoc")]
pub struct AgentConfig {
    pub sensor: SensorConfig,
    /// Hidden layers only; input and output widths are derived.
    pub layers: Vec<LayerDef>,
    pub trainer: TrainerOpts,
    pub gamma: f64,
    pub experience_size: usize,
    pub epsilon_min: f64,
    pub epsilon_test: f64,
    pub learning_steps_total: u64,
    pub start_learning_threshold: usize,
    pub learning_steps_burnin: u64,
    pub other_agents: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::default(),
            layers: vec![LayerDef::new(32, Activation::Relu)],
            trainer: TrainerOpts {
                learning_rate: 0.001,
                momentum: 0.9,
                l2_decay: 0.0001,
                batch_size: 32,
            },
            gamma: 0.9,
            experience_size: 30_000,
            epsilon_min: 0.05,
            epsilon_test: 0.0,
            learning_steps_total: 100_000,
            start_learning_threshold: 1_000,
            learning_steps_burnin: 3_000,
            other_agents: 0,
        }
    }
}

/// Wire form of [`AgentConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AgentConfigDoc {
    #[serde(rename = "lanesSide")]
    lanes_side: usize,
    #[serde(rename = "patchesAhead")]
    patches_ahead: usize,
    #[serde(rename = "patchesBehind")]
    patches_behind: usize,
    temporal_window: usize,
    other_agents: usize,
    tdtrainer_options: TrainerOptsDoc,
    layers: Vec<LayerDef>,
    gamma: f64,
    experience_size: usize,
    epsilon_min: f64,
    epsilon_test_time: f64,
    learning_steps_total: u64,
    start_learning_threshold: usize,
    #[serde(alias = "learning_steps_burning")]
    learning_steps_burnin: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainerOptsDoc {
    learning_rate: f64,
    momentum: f64,
    l2_decay: f64,
    batch_size: usize,
}

impl Default for TrainerOptsDoc {
    fn default() -> Self {
        AgentConfig::default().trainer.into()
    }
}

impl From<TrainerOpts> for TrainerOptsDoc {
    fn from(t: TrainerOpts) -> Self {
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            l2_decay: t.l2_decay,
            batch_size: t.batch_size,
        }
    }
}

impl Default for AgentConfigDoc {
    fn default() -> Self {
        AgentConfig::default().into()
    }
}

impl From<AgentConfig> for AgentConfigDoc {
    fn from(c: AgentConfig) -> Self {
        Self {
            lanes_side: c.sensor.lanes_side,
            patches_ahead: c.sensor.patches_ahead,
            patches_behind: c.sensor.patches_behind,
            temporal_window: c.sensor.temporal_window,
            other_agents: c.other_agents,
            tdtrainer_options: c.trainer.into(),
            layers: c.layers,
            gamma: c.gamma,
            experience_size: c.experience_size,
            epsilon_min: c.epsilon_min,
            epsilon_test_time: c.epsilon_test,
            learning_steps_total: c.learning_steps_total,
            start_learning_threshold: c.start_learning_threshold,
            learning_steps_burnin: c.learning_steps_burnin,
        }
    }
}

impl From<AgentConfigDoc> for AgentConfig {
    fn from(d: AgentConfigDoc) -> Self {
        Self {
            sensor: SensorConfig {
                lanes_side: d.lanes_side,
                patches_ahead: d.patches_ahead,
                patches_behind: d.patches_behind,
                temporal_window: d.temporal_window,
            },
            layers: d.layers,
            trainer: TrainerOpts {
                learning_rate: d.tdtrainer_options.learning_rate,
                momentum: d.tdtrainer_options.momentum,
                l2_decay: d.tdtrainer_options.l2_decay,
                batch_size: d.tdtrainer_options.batch_size,
            },
            gamma: d.gamma,
            experience_size: d.experience_size,
            epsilon_min: d.epsilon_min,
            epsilon_test: d.epsilon_test_time,
            learning_steps_total: d.learning_steps_total,
            start_learning_threshold: d.start_learning_threshold,
            learning_steps_burnin: d.learning_steps_burnin,
            other_agents: d.other_agents,
        }
    }
}

impl AgentConfig {
    /// Parse the JSON document, then validate. Errors carry a field path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        // Derived struct impls would also accept a positional array.
        if !text.trim_start().starts_with('{') {
            return Err(config_error("$", "expected a JSON object"));
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { "$".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("agent config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sensor
            .validate()
            .map_err(|e| config_error(format!("sensor.{}", e.field), e.reason))?;
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(config_error(format!("layers[{k}].width"), "must be at least 1"));
            }
        }
        self.trainer.validate().map_err(|e| {
            let NeuralError::InvalidOptions(msg) = e else { unreachable!() };
            let field = msg.split_whitespace().next().unwrap_or("").to_string();
            config_error(format!("trainer.{field}"), msg)
        })?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(config_error("gamma", "must be in [0, 1)"));
        }
        if self.experience_size == 0 {
            return Err(config_error("experience_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_min) {
            return Err(config_error("epsilon_min", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_test) {
            return Err(config_error("epsilon_test", "must be in [0, 1]"));
        }
        if self.learning_steps_burnin > self.learning_steps_total {
            return Err(config_error(
                "learning_steps_burnin",
                "must not exceed learning_steps_total",
            ));
        }
        if self.start_learning_threshold > self.experience_size {
            return Err(config_error(
                "start_learning_threshold",
                "must not exceed experience_size",
            ));
        }
        if self.other_agents > VEHICLE_COUNT - 1 {
            return Err(config_error("other_agents", "at most 19 other cars exist"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        input_size(&self.sensor, ACTION_COUNT)
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec::new(self.input_width(), &self.layers, ACTION_COUNT)
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_spec().parameter_count()
    }

    /// The world this agent trains in: `other_agents` red clones.
    pub fn world_config(&self, base: &WorldConfig) -> WorldConfig {
        WorldConfig {
            agent_clone_count: self.other_agents,
            ..base.clone()
        }
    }
}

/// Probability of a random action after `t` training steps.
pub fn epsilon_at(t: u64, cfg: &AgentConfig) -> f64 {
    let (burnin, total) = (cfg.learning_steps_burnin, cfg.learning_steps_total);
    if t < burnin {
        1.0
    } else if t >= total {
        cfg.epsilon_min
    } else {
        let frac = (t - burnin) as f64 / (total - burnin) as f64;
        1.0 - (1.0 - cfg.epsilon_min) * frac
    }
}

pub fn bellman_target(reward: f64, gamma: f64, q_next: &[f64]) -> f64 {
    reward + gamma * q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
}

/// Fixed-capacity ring of experiences; the oldest is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Stored experiences, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform draw with replacement.
    pub fn sample<'a, R: Rng>(&'a self, rng: &mut R) -> &'a Experience {
        &self.items[rng.gen_range(0..self.items.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Network, optimizer, replay memory and exploration state.
#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    net: QNetwork,
    trainer: Trainer,
    replay: ReplayMemory,
    rng: ChaCha8Rng,
    step: u64,
    scratch: ForwardScratch,
    targets: Vec<f64>,
    picks: Vec<usize>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const NET_STREAM: u64 = 1;
const AGENT_STREAM: u64 = 2;

impl Agent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net_seed = stream_rng(seed, NET_STREAM).gen();
        let net = QNetwork::new(cfg.layer_spec(), net_seed).map_err(TrainError::Network)?;
        Self::with_network(cfg, net, seed)
    }

    /// Start from existing weights. The network must map the configured input
    /// width to five actions.
    pub fn with_network(cfg: AgentConfig, net: QNetwork, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        if net.input_width() != cfg.input_width() || net.output_width() != ACTION_COUNT {
            return Err(config_error(
                "layers",
                format!(
                    "network maps {} inputs to {} outputs, config needs {} to {}",
                    net.input_width(),
                    net.output_width(),
                    cfg.input_width(),
                    ACTION_COUNT
                ),
            )
            .into());
        }
        let trainer = Trainer::new(cfg.trainer, &net).map_err(TrainError::Network)?;
        Ok(Self {
            replay: ReplayMemory::new(cfg.experience_size),
            trainer,
            net,
            rng: stream_rng(seed, AGENT_STREAM),
            step: 0,
            scratch: ForwardScratch::default(),
            targets: Vec::new(),
            picks: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn network(&self) -> &QNetwork {
        &self.net
    }

    pub fn into_network(self) -> QNetwork {
        self.net
    }

    pub fn replay(&self) -> &ReplayMemory {
        &self.replay
    }

    /// Environment steps taken so far, i.e. calls to [`Agent::learn_step`].
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epsilon(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Train => epsilon_at(self.step, &self.cfg),
            Mode::Eval => self.cfg.epsilon_test,
        }
    }

    pub fn q_values(&mut self, state: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.net.forward_with(state, &mut self.scratch).map(|q| q.to_vec())
    }

    pub fn act(&mut self, state: &[f64], mode: Mode) -> Result<usize, NeuralError> {
        let eps = self.epsilon(mode);
        self.act_with_epsilon(state, eps)
    }

    pub fn act_with_epsilon(&mut self, state: &[f64], epsilon: f64) -> Result<usize, NeuralError> {
        if epsilon > 0.0 && self.rng.gen::<f64>() < epsilon {
            return Ok(self.rng.gen_range(0..ACTION_COUNT));
        }
        let q = self.net.forward_with(state, &mut self.scratch)?;
        Ok(argmax(q))
    }

    pub fn remember(&mut self, e: Experience) {
        self.replay.push(e);
    }

    /// One learning step per environment step. Returns the batch loss when an
    /// update happened.
    pub fn learn_step(&mut self) -> Result<Option<f64>, TrainError> {
        let t = self.step;
        self.step += 1;
        let ready = self.replay.len() >= self.cfg.start_learning_threshold.max(1)
            && t >= self.cfg.learning_steps_burnin
            && t < self.cfg.learning_steps_total;
        if !ready {
            return Ok(None);
        }
        let batch = self.cfg.trainer.batch_size;
        self.picks.clear();
        self.targets.clear();
        for _ in 0..batch {
            let k = self.rng.gen_range(0..self.replay.len());
            let e = &self.replay.items[k];
            let q_next = self.net.forward_with(&e.s_next, &mut self.scratch).map_err(TrainError::Network)?;
            self.targets.push(bellman_target(e.r, self.cfg.gamma, q_next));
            self.picks.push(k);
        }
        let samples: Vec<Sample<'_>> = self
            .picks
            .iter()
            .zip(&self.targets)
            .map(|(&k, &target)| {
                let e = &self.replay.items[k];
                Sample {
                    input: &e.s,
                    action: e.a,
                    target,
                }
            })
            .collect();
        match self.trainer.train_batch(&mut self.net, &samples) {
            Ok(loss) => Ok(Some(loss)),
            Err(NeuralError::Diverged(reason)) => Err(TrainError::Diverged { step: t, reason }),
            Err(e) => Err(TrainError::Network(e)),
        }
    }
}

/// Per-vehicle sensing and memory for red cars driven by one network.
#[derive(Debug, Clone)]
pub struct Perceiver {
    sensor: SensorConfig,
    histories: Vec<InputHistory>,
}

impl Perceiver {
    pub fn new(sensor: SensorConfig) -> Self {
        Self {
            sensor,
            histories: (0..VEHICLE_COUNT)
                .map(|_| InputHistory::new(sensor.temporal_window, ACTION_COUNT))
                .collect(),
        }
    }

    pub fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }

    /// Current slice and the assembled network input for `id`.
    pub fn observe(&self, grid: &OccupancyGrid, world: &World, id: VehicleId) -> (Vec<f64>, Vec<f64>) {
        let slice = slice_state(grid, world, &self.sensor, id);
        let input = self.histories[id].assemble(&slice);
        (slice, input)
    }

    pub fn record(&mut self, id: VehicleId, slice: Vec<f64>, action: usize) {
        self.histories[id].push(slice, action);
    }

    pub fn reset(&mut self) {
        self.histories.iter_mut().for_each(InputHistory::clear);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Training steps completed when the point was taken.
    pub step: u64,
    pub epsilon: f64,
    /// Mean reward over the interval ending at `step`.
    pub reward: f64,
    /// Mean batch loss over the interval, absent when nothing was learned.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainProgress {
    pub step: u64,
    pub steps: u64,
    pub epsilon: f64,
    pub last_loss: Option<f64>,
    /// Exponential moving average of the reward.
    pub smoothed_reward: f64,
}

/// Called after every simulated frame. Implementations must be cheap when
/// they have nothing to do; training waits on them.
pub trait TrainObserver {
    fn on_frame(&mut self, world: &World, outcome: &StepOutcome, progress: &TrainProgress) -> ControlFlow<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    /// Steps per curve point.
    pub curve_interval: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { curve_interval: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: AgentConfig,
    pub seed: u64,
    pub steps: u64,
    pub frames: u64,
    pub curve: Vec<CurvePoint>,
    pub network: QNetwork,
}

#[derive(Serialize)]
struct TrainReportDoc<'a> {
    config: &'a AgentConfig,
    seed: u64,
    steps: u64,
    frames: u64,
    parameter_count: usize,
    curve: &'a [CurvePoint],
    network: NetworkCheckpoint,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TrainReportDoc {
            config: &self.config,
            seed: self.seed,
            steps: self.steps,
            frames: self.frames,
            parameter_count: self.network.parameter_count(),
            curve: &self.curve,
            network: self.network.to_checkpoint(),
        })
        .expect("report serializes")
    }

    pub fn write_curve_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        write_curve_csv(&self.curve, out)
    }
}

pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn train(cfg: &AgentConfig, world_cfg: &WorldConfig, steps: u64, seed: u64) -> Result<TrainReport, TrainError> {
    train_with(cfg, world_cfg, steps, seed, &TrainOptions::default(), None)
}

/// Train a fresh agent for `steps` ego decisions in one continuing world.
pub fn train_with(
    cfg: &AgentConfig,
    world_cfg: &WorldConfig,
    steps: u64,
    seed: u64,
    opts: &TrainOptions,
    observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainReport, TrainError> {
    let agent = Agent::new(cfg.clone(), seed)?;
    train_agent(agent, world_cfg, steps, seed, opts, observer)
}

pub fn train_agent(
    mut agent: Agent,
    world_cfg: &WorldConfig,
    steps: u64,
    seed: u64,
    opts: &TrainOptions,
    mut observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainReport, TrainError> {
    let cfg = agent.config().clone();
    let wc = cfg.world_config(world_cfg);
    wc.validate()?;
    let mut report = TrainReport {
        config: cfg.clone(),
        seed,
        steps: 0,
        frames: 0,
        curve: Vec::new(),
        network: agent.network().clone(),
    };
    if steps == 0 {
        return Ok(report);
    }
    let interval = opts.curve_interval.max(1);
    let mut world = World::new(wc, seed)?;
    let mut perceiver = Perceiver::new(cfg.sensor);
    let mut clone_scratch = ForwardScratch::default();

    let mut pending: Option<(Vec<f64>, usize)> = None;
    let mut speed_sum = 0.0;
    let mut speed_frames = 0u32;
    let mut done = 0u64;
    let mut progress = TrainProgress {
        step: 0,
        steps,
        epsilon: agent.epsilon(Mode::Train),
        last_loss: None,
        smoothed_reward: 0.0,
    };
    let (mut reward_acc, mut loss_acc, mut loss_n) = (0.0, 0.0, 0u64);

    loop {
        let mut ego_action = Action::NoOp;
        let decision = world.is_decision_frame(EGO_ID);
        let grid = if decision { Some(OccupancyGrid::build(&world)) } else { None };
        if let Some(grid) = &grid {
            let (slice, input) = perceiver.observe(grid, &world, EGO_ID);
            if let Some((s, a)) = pending.take() {
                let r = speed_sum / f64::from(speed_frames.max(1)) / SPEED_SCALE;
                agent.remember(Experience {
                    s,
                    a,
                    r,
                    s_next: input.clone(),
                });
                let loss = agent.learn_step()?;
                done += 1;
                reward_acc += r;
                if let Some(l) = loss {
                    loss_acc += l;
                    loss_n += 1;
                    progress.last_loss = Some(l);
                }
                progress.smoothed_reward = if done == 1 {
                    r
                } else {
                    0.99 * progress.smoothed_reward + 0.01 * r
                };
                progress.step = done;
                if done.is_multiple_of(interval) || done == steps {
                    let span = (done - 1) % interval + 1;
                    report.curve.push(CurvePoint {
                        step: done,
                        epsilon: agent.epsilon(Mode::Train),
                        reward: reward_acc / span as f64,
                        loss: (loss_n > 0).then(|| loss_acc / loss_n as f64),
                    });
                    reward_acc = 0.0;
                    loss_acc = 0.0;
                    loss_n = 0;
                }
                if done == steps {
                    break;
                }
            }
            progress.epsilon = agent.epsilon(Mode::Train);
            let a = agent.act(&input, Mode::Train).map_err(TrainError::Network)?;
            perceiver.record(EGO_ID, slice, a);
            pending = Some((input, a));
            ego_action = Action::from_index(a).expect("five outputs");
            speed_sum = 0.0;
            speed_frames = 0;
        }

        let net = agent.network();
        let mut grid = grid;
        world.decide(|w, id| {
            if id == EGO_ID {
                return ego_action;
            }
            let grid = grid.get_or_insert_with(|| OccupancyGrid::build(w));
            let (slice, input) = perceiver.observe(grid, w, id);
            let q = net
                .forward_with(&input, &mut clone_scratch)
                .expect("input width matches the sensor");
            let a = argmax(q);
            perceiver.record(id, slice, a);
            Action::from_index(a).expect("five outputs")
        });
        let outcome = world.step();
        report.frames += 1;
        speed_sum += outcome.ego_speed_mph;
        speed_frames += 1;
        if let Some(obs) = observer.as_deref_mut() {
            if obs.on_frame(&world, &outcome, &progress).is_break() {
                return Err(TrainError::Cancelled { step: done });
            }
        }
    }
    report.steps = done;
    report.network = agent.into_network();
    Ok(report)
}
