//! Live training sessions and their frame streams.
//!
//! Each session trains on its own thread. Frames go out through a bounded
//! broadcast queue: a slow reader loses the oldest frames, training never
//! waits, and a reader that connects late starts at the next frame.

use std::collections::{HashMap, VecDeque};
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::Serialize;
use tokio::sync::broadcast;

use traffic_core::dqn::{train_with, AgentConfig, TrainError, TrainObserver, TrainOptions, TrainProgress};
use traffic_core::perception::OccupancyGrid;
use traffic_core::sim::{StepOutcome, Vehicle, World, WorldConfig};

use crate::model::{now, timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamSettings {
    /// Frame events per second of wall time, per session.
    pub fps: f64,
    /// Events buffered per reader before the oldest are dropped.
    pub buffer: usize,
    pub max_live_sessions: usize,
    /// Finished sessions kept around for status queries.
    pub keep_finished: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            fps: 20.0,
            buffer: 16,
            max_live_sessions: 2,
            keep_finished: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub line: Arc<str>,
    pub last: bool,
}

#[derive(Serialize)]
struct FrameEvent<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    session: &'a str,
    t: u64,
    progress: &'a TrainProgress,
    outcome: &'a StepOutcome,
    vehicles: &'a [Vehicle],
    grid: OccupancyGrid,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub state: SessionState,
    pub steps: u64,
    pub seed: u64,
    #[serde(serialize_with = "timestamp")]
    pub started_at: DateTime<Utc>,
    pub steps_done: u64,
    pub frames: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Running,
    Finished,
    Cancelled,
    Failed,
}

pub struct Session {
    tx: broadcast::Sender<Event>,
    summary: Mutex<SessionSummary>,
    /// Set when the final event is out; guarded with `summary` so a reader
    /// either sees the final event on its receiver or sees it here.
    last: Mutex<Option<Event>>,
    cancel: AtomicBool,
}

/// What a new reader gets: the finished session's last event, or a live
/// receiver.
pub enum Subscription {
    Live(broadcast::Receiver<Event>),
    Finished(Event),
}

impl Session {
    pub fn summary(&self) -> SessionSummary {
        self.summary.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn subscribe(&self) -> Subscription {
        let last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        match &*last {
            Some(ev) => Subscription::Finished(ev.clone()),
            None => Subscription::Live(self.tx.subscribe()),
        }
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::Relaxed);
    }

    fn is_running(&self) -> bool {
        self.summary().state == SessionState::Running
    }
}

struct Broadcaster<'a> {
    session: &'a Session,
    id: &'a str,
    interval: Duration,
    last_sent: Option<Instant>,
}

impl TrainObserver for Broadcaster<'_> {
    fn on_frame(&mut self, world: &World, outcome: &StepOutcome, progress: &TrainProgress) -> ControlFlow<()> {
        if self.session.cancel.load(Ordering::Relaxed) {
            return ControlFlow::Break(());
        }
        if outcome.frame.is_multiple_of(256) {
            let mut s = self.session.summary.lock().unwrap_or_else(|e| e.into_inner());
            s.steps_done = progress.step;
            s.frames = outcome.frame + 1;
        }
        if self.session.tx.receiver_count() == 0 {
            return ControlFlow::Continue(());
        }
        let now = Instant::now();
        if self.last_sent.is_some_and(|t| now.duration_since(t) < self.interval) {
            return ControlFlow::Continue(());
        }
        self.last_sent = Some(now);
        let ev = FrameEvent {
            kind: "frame",
            session: self.id,
            t: outcome.frame,
            progress,
            outcome,
            vehicles: world.vehicles(),
            grid: OccupancyGrid::build(world),
        };
        let line = serde_json::to_string(&ev).expect("frame serializes");
        // Fails only when every reader left; nothing to do then.
        let _ = self.session.tx.send(Event {
            line: line.into(),
            last: false,
        });
        ControlFlow::Continue(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{live} live sessions already running (max_live_sessions = {max})")]
    TooMany { live: usize, max: usize },
}

pub struct Sessions {
    settings: StreamSettings,
    world: WorldConfig,
    inner: Mutex<Registry>,
}

#[derive(Default)]
struct Registry {
    map: HashMap<String, Arc<Session>>,
    order: VecDeque<String>,
}

impl Sessions {
    pub fn new(settings: StreamSettings, world: WorldConfig) -> Self {
        Self {
            settings,
            world,
            inner: Mutex::new(Registry::default()),
        }
    }

    pub fn settings(&self) -> &StreamSettings {
        &self.settings
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).map.get(id).cloned()
    }

    /// Start training `cfg` for `steps` decisions on a new thread.
    pub fn start(&self, cfg: AgentConfig, steps: u64, seed: u64) -> Result<SessionSummary, SessionError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (tx, _) = broadcast::channel(self.settings.buffer.max(1));
        let summary = SessionSummary {
            id: id.clone(),
            state: SessionState::Running,
            steps,
            seed,
            started_at: now(),
            steps_done: 0,
            frames: 0,
            error: None,
        };
        let session = Arc::new(Session {
            tx,
            summary: Mutex::new(summary.clone()),
            last: Mutex::new(None),
            cancel: AtomicBool::new(false),
        });
        {
            let mut reg = self.inner.lock().unwrap_or_else(|e| e.into_inner());
            let live = reg.map.values().filter(|s| s.is_running()).count();
            if live >= self.settings.max_live_sessions {
                return Err(SessionError::TooMany {
                    live,
                    max: self.settings.max_live_sessions,
                });
            }
            let finished = reg.map.len() - live;
            if finished >= self.settings.keep_finished {
                let Registry { map, order } = &mut *reg;
                if let Some(pos) = order.iter().position(|k| map.get(k).is_some_and(|s| !s.is_running())) {
                    let old = order.remove(pos).expect("position is in range");
                    map.remove(&old);
                }
            }
            reg.map.insert(id.clone(), session.clone());
            reg.order.push_back(id.clone());
        }
        let world = self.world.clone();
        let interval = Duration::from_secs_f64(1.0 / self.settings.fps.max(1e-3));
        std::thread::Builder::new()
            .name(format!("session-{}", &id[..8]))
            .spawn(move || run_session(&session, &id, &cfg, &world, steps, seed, interval))
            .expect("spawn session thread");
        Ok(summary)
    }
}

fn run_session(
    session: &Session,
    id: &str,
    cfg: &AgentConfig,
    world: &WorldConfig,
    steps: u64,
    seed: u64,
    interval: Duration,
) {
    let mut observer = Broadcaster {
        session,
        id,
        interval,
        last_sent: None,
    };
    let opts = TrainOptions::default();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        train_with(cfg, world, steps, seed, &opts, Some(&mut observer))
    }));
    let mut last = session.last.lock().unwrap_or_else(|e| e.into_inner());
    let mut summary = session.summary.lock().unwrap_or_else(|e| e.into_inner());
    match result {
        Ok(Ok(report)) => {
            summary.state = SessionState::Finished;
            summary.steps_done = report.steps;
            summary.frames = report.frames;
        }
        Ok(Err(TrainError::Cancelled { step })) => {
            summary.state = SessionState::Cancelled;
            summary.steps_done = step;
        }
        Ok(Err(e)) => {
            summary.state = SessionState::Failed;
            summary.error = Some(e.to_string());
        }
        Err(_) => {
            summary.state = SessionState::Failed;
            summary.error = Some("internal error while training".into());
        }
    }
    #[derive(Serialize)]
    struct Done<'a> {
        #[serde(rename = "type")]
        kind: &'static str,
        #[serde(flatten)]
        summary: &'a SessionSummary,
    }
    let line = serde_json::to_string(&Done {
        kind: "done",
        summary: &summary,
    })
    .expect("summary serializes");
    let ev = Event {
        line: line.into(),
        last: true,
    };
    let _ = session.tx.send(ev.clone());
    *last = Some(ev);
}
