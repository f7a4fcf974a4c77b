use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;

use traffic_core::dqn::{train_with, AgentConfig, TrainError, TrainObserver, TrainOptions, TrainProgress};
use traffic_core::harness::{evaluate, EvalSpec, NetworkDriver};
use traffic_core::neural::QNetwork;
use traffic_core::sim::{StepOutcome, World, WorldConfig};

use crate::model::{Status, Submission};
use crate::store::{Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub median: f64,
    pub std: f64,
}

/// Turns a config into a score. Errors are the reason shown to the user.
pub trait Scorer: Send + Sync {
    fn train(&self, cfg: &AgentConfig) -> Result<QNetwork, String>;
    fn evaluate(&self, cfg: &AgentConfig, net: QNetwork) -> Result<Score, String>;
}

/// The published scoring protocol. Scores are a pure function of the
/// submission and these values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Protocol {
    #[serde(flatten)]
    pub eval: EvalSpec,
    pub train_seed: u64,
    pub world: WorldConfig,
    /// Wall-clock limit on training, seconds.
    pub train_timeout_s: Option<u64>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            eval: EvalSpec::default(),
            train_seed: 1,
            world: WorldConfig::default(),
            train_timeout_s: Some(3600),
        }
    }
}

pub struct OfficialScorer {
    pub protocol: Protocol,
}

struct Deadline(Option<Instant>);

impl TrainObserver for Deadline {
    fn on_frame(&mut self, _: &World, _: &StepOutcome, _: &TrainProgress) -> ControlFlow<()> {
        match self.0 {
            Some(at) if Instant::now() >= at => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    }
}

impl Scorer for OfficialScorer {
    fn train(&self, cfg: &AgentConfig) -> Result<QNetwork, String> {
        let p = &self.protocol;
        let mut deadline = Deadline(p.train_timeout_s.map(|s| Instant::now() + Duration::from_secs(s)));
        let opts = TrainOptions::default();
        match train_with(cfg, &p.world, cfg.learning_steps_total, p.train_seed, &opts, Some(&mut deadline)) {
            Ok(report) => Ok(report.network),
            Err(TrainError::Cancelled { step }) => Err(format!(
                "training timed out after {}s at step {step}",
                p.train_timeout_s.unwrap_or_default()
            )),
            Err(e) => Err(format!("training failed: {e}")),
        }
    }

    fn evaluate(&self, cfg: &AgentConfig, net: QNetwork) -> Result<Score, String> {
        let p = &self.protocol;
        let driver = NetworkDriver::new(net, cfg).map_err(|e| format!("checkpoint does not fit the config: {e}"))?;
        let report =
            evaluate(&driver, &cfg.world_config(&p.world), &p.eval).map_err(|e| format!("evaluation failed: {e}"))?;
        Ok(Score {
            median: report.median_score,
            std: report.score_std,
        })
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("internal error while scoring".into()))
}

fn fail(store: &dyn Store, mut sub: Submission, reason: String) -> Result<Submission, StoreError> {
    sub.failure = Some(reason);
    sub.set_status(Status::Failed);
    store.update(&sub)?;
    Ok(sub)
}

/// Drive a claimed submission to `scored` or `failed`.
pub fn process(store: &dyn Store, scorer: &dyn Scorer, mut sub: Submission) -> Result<Submission, StoreError> {
    let cfg = match sub.agent_config() {
        Ok(c) => c,
        Err(e) => return fail(store, sub, format!("config: {e}")),
    };
    let net = match sub.checkpoint.as_ref().or(sub.trained.as_ref()) {
        Some(ck) => match QNetwork::from_checkpoint(ck) {
            Ok(net) => net,
            Err(e) => return fail(store, sub, format!("checkpoint: {e}")),
        },
        None => match guarded(|| scorer.train(&cfg)) {
            Ok(net) => {
                sub.trained = Some(net.to_checkpoint());
                net
            }
            Err(reason) => return fail(store, sub, reason),
        },
    };
    if sub.status != Status::Evaluating {
        sub.set_status(Status::Evaluating);
        store.update(&sub)?;
    }
    match guarded(|| scorer.evaluate(&cfg, net)) {
        Ok(score) if score.median.is_finite() => {
            sub.score = Some(score.median);
            sub.score_std = Some(score.std);
            sub.set_status(Status::Scored);
            store.update(&sub)?;
            Ok(sub)
        }
        Ok(score) => fail(store, sub, format!("non-finite score {}", score.median)),
        Err(reason) => fail(store, sub, reason),
    }
}

/// Claim and process one submission; `None` when nothing is runnable.
pub fn work_once(store: &dyn Store, scorer: &dyn Scorer, lease: &str) -> Result<Option<Submission>, StoreError> {
    match store.claim(lease)? {
        Some(sub) => process(store, scorer, sub).map(Some),
        None => Ok(None),
    }
}

/// Wakes idle workers when work arrives.
#[derive(Default)]
pub struct Doorbell {
    rung: Mutex<u64>,
    cv: Condvar,
}

impl Doorbell {
    pub fn ring(&self) {
        *self.rung.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_all();
    }

    fn wait(&self, seen: &mut u64, timeout: Duration) {
        let guard = self.rung.lock().unwrap_or_else(|e| e.into_inner());
        let (guard, _) = self
            .cv
            .wait_timeout_while(guard, timeout, |n| *n == *seen)
            .unwrap_or_else(|e| e.into_inner());
        *seen = *guard;
    }
}

/// A fixed number of scoring threads sharing one store.
pub struct WorkerPool {
    bell: Arc<Doorbell>,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    /// `lease` identifies this process; anything in flight under another
    /// lease is picked up again.
    pub fn start(count: usize, store: Arc<dyn Store>, scorer: Arc<dyn Scorer>, lease: String) -> Self {
        let bell = Arc::new(Doorbell::default());
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..count)
            .map(|k| {
                let (store, scorer, bell, stop, lease) =
                    (store.clone(), scorer.clone(), bell.clone(), stop.clone(), lease.clone());
                std::thread::Builder::new()
                    .name(format!("scorer-{k}"))
                    .spawn(move || {
                        let mut seen = 0;
                        while !stop.load(Ordering::Relaxed) {
                            match work_once(store.as_ref(), scorer.as_ref(), &lease) {
                                Ok(Some(sub)) => {
                                    tracing::info!(id = %sub.id, status = ?sub.status, score = ?sub.score, "scored")
                                }
                                Ok(None) => bell.wait(&mut seen, Duration::from_millis(500)),
                                Err(e) => {
                                    tracing::error!("scoring worker: {e}");
                                    bell.wait(&mut seen, Duration::from_secs(1));
                                }
                            }
                        }
                    })
                    .expect("spawn scoring thread")
            })
            .collect();
        Self { bell, stop, handles }
    }

    pub fn doorbell(&self) -> Arc<Doorbell> {
        self.bell.clone()
    }

    /// Finish the jobs in hand, then stop.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        self.bell.ring();
        for h in self.handles {
            let _ = h.join();
        }
    }
}
