use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use futures::StreamExt;
use serde_json::Value;
use tower::ServiceExt;

use traffic_arena::session::{SessionState, StreamSettings, Subscription};
use traffic_arena::store::MemoryStore;
use traffic_arena::{router, AppState, Settings};

const SMALL: &str = r#"{"patchesAhead": 8, "layers": [{"width": 8, "activation": "relu"}],
    "learning_steps_total": 1000000, "experience_size": 2000, "tdtrainer_options": {"batch_size": 8}}"#;

fn setup() -> (AppState, Router) {
    let state = AppState::new(
        Arc::new(MemoryStore::new()),
        Settings {
            stream: StreamSettings {
                max_live_sessions: 4,
                ..StreamSettings::default()
            },
            ..Settings::default()
        },
        None,
    );
    let app = router(state.clone());
    (state, app)
}

async fn request(app: &Router, method: Method, uri: &str, body: String) -> (StatusCode, Body) {
    let resp = app
        .clone()
        .oneshot(Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap())
        .await
        .unwrap();
    (resp.status(), resp.into_body())
}

async fn json(app: &Router, method: Method, uri: &str, body: String) -> (StatusCode, Value) {
    let (status, body) = request(app, method, uri, body).await;
    let bytes = axum::body::to_bytes(body, usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn start(app: &Router, steps: u64) -> String {
    let (status, v) = json(app, Method::POST, "/sessions", format!(r#"{{"config": {SMALL}, "steps": {steps}, "seed": 3}}"#)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["frames"], format!("/sessions/{}/frames", v["id"].as_str().unwrap()));
    v["id"].as_str().unwrap().to_string()
}

/// Reads NDJSON events off a streaming body.
struct Lines {
    stream: axum::body::BodyDataStream,
    buf: String,
}

impl Lines {
    async fn open(app: &Router, id: &str) -> Self {
        let (status, body) = request(app, Method::GET, &format!("/sessions/{id}/frames"), String::new()).await;
        assert_eq!(status, StatusCode::OK);
        Self {
            stream: body.into_data_stream(),
            buf: String::new(),
        }
    }

    async fn next(&mut self) -> Option<Value> {
        loop {
            if let Some(pos) = self.buf.find('\n') {
                let line: String = self.buf.drain(..=pos).collect();
                return Some(serde_json::from_str(line.trim_end()).expect("each line is one JSON document"));
            }
            let chunk = self.stream.next().await?.unwrap();
            self.buf.push_str(std::str::from_utf8(&chunk).unwrap());
        }
    }
}

fn check_frame(ev: &Value) -> u64 {
    assert_eq!(ev["type"], "frame");
    assert_eq!(ev["vehicles"].as_array().unwrap().len(), 20);
    let cells = ev["grid"]["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 7);
    assert!(cells.iter().all(|lane| lane.as_array().unwrap().len() == 70));
    let t = ev["t"].as_u64().unwrap();
    assert_eq!(ev["outcome"]["frame"], t);
    assert_eq!(ev["grid"]["frame"].as_u64().unwrap(), t + 1);
    assert!(ev["progress"]["epsilon"].is_number());
    t
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_arrive_in_order_at_the_throttled_rate() {
    let (_, app) = setup();
    let id = start(&app, 1_000_000).await;
    let mut lines = Lines::open(&app, &id).await;
    let started = Instant::now();
    let mut ts = Vec::new();
    while started.elapsed() < Duration::from_millis(1500) {
        ts.push(check_frame(&lines.next().await.unwrap()));
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(ts.windows(2).all(|w| w[0] < w[1]), "{ts:?}");
    let rate = (ts.len() - 1) as f64 / secs;
    assert!((10.0..=22.0).contains(&rate), "{rate} frames/s");

    let (status, v) = json(&app, Method::DELETE, &format!("/sessions/{id}"), String::new()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["id"], id.as_str());
    let done = loop {
        let ev = lines.next().await.expect("stream ends with a done event");
        if ev["type"] == "done" {
            break ev;
        }
    };
    assert_eq!(done["state"], "cancelled");
    assert!(lines.next().await.is_none());

    let mut again = Lines::open(&app, &id).await;
    assert_eq!(again.next().await.unwrap()["type"], "done");
    assert!(again.next().await.is_none());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reconnecting_resumes_at_the_current_frame() {
    let (_, app) = setup();
    let id = start(&app, 1_000_000).await;
    let mut first = Lines::open(&app, &id).await;
    let mut last = 0;
    for _ in 0..3 {
        last = check_frame(&first.next().await.unwrap());
    }
    drop(first);
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut second = Lines::open(&app, &id).await;
    let resumed = check_frame(&second.next().await.unwrap());
    assert!(resumed > last + 100, "resumed at {resumed} after {last}");
    json(&app, Method::DELETE, &format!("/sessions/{id}"), String::new()).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn a_reader_that_never_reads_does_not_stall_training() {
    let (state, app) = setup();
    let id = start(&app, 3000).await;
    let session = state.sessions().get(&id).unwrap();
    let Subscription::Live(mut stuck) = session.subscribe() else {
        panic!("session finished too early")
    };
    let started = Instant::now();
    while session.summary().state == SessionState::Running {
        assert!(started.elapsed() < Duration::from_secs(60));
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let summary = session.summary();
    assert_eq!(summary.state, SessionState::Finished);
    assert_eq!(summary.steps_done, 3000);
    // The buffer overflowed or held everything; either way the last event is
    // still the final one.
    let mut last = None;
    loop {
        match stuck.try_recv() {
            Ok(ev) => last = Some(ev),
            Err(tokio::sync::broadcast::error::TryRecvError::Lagged(_)) => continue,
            Err(_) => break,
        }
    }
    assert!(last.unwrap().last);

    let (status, v) = json(&app, Method::GET, &format!("/sessions/{id}"), String::new()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["state"], "finished");
    assert_eq!(v["steps_done"], 3000);
    assert!(v["started_at"].as_str().unwrap().ends_with('Z'));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_can_train_a_stored_submission() {
    let (_, app) = setup();
    let (status, v) = json(
        &app,
        Method::POST,
        "/submissions",
        format!(r#"{{"display_name": "s", "config": {SMALL}}}"#),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let body = format!(r#"{{"submission": "{}", "steps": 10}}"#, v["id"].as_str().unwrap());
    let (status, s) = json(&app, Method::POST, "/sessions", body).await;
    assert_eq!(status, StatusCode::CREATED, "{s}");
    assert_eq!(s["steps"], 10);
}
