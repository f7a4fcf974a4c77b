//! Kept apart from the other stream tests so nothing else competes for the
//! CPU while timing.

use std::sync::Arc;
use std::time::{Duration, Instant};

use traffic_arena::session::SessionState;
use traffic_arena::store::MemoryStore;
use traffic_arena::{AppState, Settings};
use traffic_core::dqn::{train_with, AgentConfig, TrainOptions};
use traffic_core::sim::WorldConfig;

const SMALL: &str = r#"{"patchesAhead": 8, "layers": [{"width": 8, "activation": "relu"}],
    "experience_size": 2000, "tdtrainer_options": {"batch_size": 8}}"#;

/// Time a session from start until its thread finishes.
async fn session_seconds(state: &AppState, cfg: &AgentConfig, steps: u64) -> f64 {
    let started = Instant::now();
    let summary = state.sessions().start(cfg.clone(), steps, 3).unwrap();
    let session = state.sessions().get(&summary.id).unwrap();
    while session.summary().state == SessionState::Running {
        tokio::time::sleep(Duration::from_millis(1)).await;
    }
    started.elapsed().as_secs_f64()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unwatched_sessions_train_at_full_speed() {
    let state = AppState::new(Arc::new(MemoryStore::new()), Settings::default(), None);
    let cfg = AgentConfig::from_json(SMALL).unwrap();
    let steps = 100_000;
    let world = WorldConfig::default();
    let plain = || {
        let t = Instant::now();
        train_with(&cfg, &world, steps, 3, &TrainOptions::default(), None).unwrap();
        t.elapsed().as_secs_f64()
    };
    let mut best_plain = f64::INFINITY;
    let mut best_session = f64::INFINITY;
    for _ in 0..3 {
        best_plain = best_plain.min(tokio::task::block_in_place(plain));
        best_session = best_session.min(session_seconds(&state, &cfg, steps).await);
    }
    let ratio = best_session / best_plain;
    eprintln!("plain {best_plain:.3}s, session {best_session:.3}s, ratio {ratio:.3}");
    assert!(ratio <= 1.05, "ratio {ratio}");
}
