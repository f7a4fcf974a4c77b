use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Parser;
use tracing_subscriber::EnvFilter;

use traffic_arena::session::StreamSettings;
use traffic_arena::store::JsonDirStore;
use traffic_arena::worker::{OfficialScorer, Protocol, WorkerPool};
use traffic_arena::{router, AppState, Limits, Settings};
use traffic_core::harness::{EvalSpec, DEFAULT_RUNS, DEFAULT_STEPS_PER_RUN, OFFICIAL_BASE_SEED};

#[derive(Parser)]
#[command(name = "arena", version, about = "Submission and leaderboard server")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory holding one JSON file per submission.
    #[arg(long, default_value = "arena-data")]
    data_dir: PathBuf,
    /// Scoring threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS_PER_RUN)]
    steps_per_run: u64,
    #[arg(long, default_value_t = OFFICIAL_BASE_SEED)]
    base_seed: u64,
    #[arg(long, default_value_t = 1)]
    train_seed: u64,
    /// Wall-clock limit on one submission's training, seconds.
    #[arg(long, default_value_t = 3600)]
    train_timeout: u64,
    #[arg(long, default_value_t = 1_000_000)]
    max_parameters: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_training_steps: u64,
    /// Frame events per second on live streams.
    #[arg(long, default_value_t = 20.0)]
    stream_fps: f64,
    #[arg(long, default_value_t = 2)]
    max_live_sessions: usize,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let settings = Settings {
        protocol: Protocol {
            eval: EvalSpec {
                runs: args.runs,
                steps_per_run: args.steps_per_run,
                base_seed: args.base_seed,
            },
            train_seed: args.train_seed,
            train_timeout_s: Some(args.train_timeout),
            ..Protocol::default()
        },
        limits: Limits {
            max_parameter_count: args.max_parameters,
            max_training_steps: args.max_training_steps,
            ..Limits::default()
        },
        stream: StreamSettings {
            fps: args.stream_fps,
            max_live_sessions: args.max_live_sessions,
            ..StreamSettings::default()
        },
    };
    let store = Arc::new(
        JsonDirStore::open(&args.data_dir).with_context(|| format!("opening {}", args.data_dir.display()))?,
    );
    let scorer = Arc::new(OfficialScorer {
        protocol: settings.protocol.clone(),
    });
    let lease = uuid::Uuid::new_v4().simple().to_string();
    let pool = WorkerPool::start(args.workers.max(1), store.clone(), scorer, lease);
    let app = router(AppState::new(store, settings, Some(pool.doorbell())));
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    tracing::info!("listening on {}", args.bind);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    // In-flight jobs are picked up again by the next process.
    std::process::exit(0);
}
