use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use traffic_core::dqn::AgentConfig;
use traffic_core::neural::NetworkCheckpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Queued,
    Training,
    Evaluating,
    Scored,
    Failed,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Scored | Status::Failed)
    }

    /// Forward moves only. Training may be skipped when weights were
    /// submitted; any live status may fail.
    pub fn can_become(self, next: Status) -> bool {
        use Status::*;
        match (self, next) {
            (a, b) if a == b => !a.is_terminal(),
            (Queued, Training | Evaluating | Failed) => true,
            (Training, Evaluating | Failed) => true,
            (Evaluating, Scored | Failed) => true,
            _ => false,
        }
    }
}

/// Millisecond-precision UTC timestamps, always with a trailing `Z`.
pub fn timestamp<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
}

pub fn now() -> DateTime<Utc> {
    // Truncate so a stored record reads back exactly as it was written.
    let t = Utc::now();
    DateTime::from_timestamp_millis(t.timestamp_millis()).unwrap_or(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusChange {
    pub status: Status,
    #[serde(serialize_with = "timestamp")]
    pub at: DateTime<Utc>,
}

/// Persisted form of a submission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Submission {
    pub id: String,
    pub display_name: String,
    /// The config exactly as submitted, byte for byte.
    pub config: Box<RawValue>,
    pub checkpoint: Option<NetworkCheckpoint>,
    pub idempotency_key: Option<String>,
    pub parameter_count: usize,
    pub status: Status,
    pub score: Option<f64>,
    pub score_std: Option<f64>,
    pub failure: Option<String>,
    #[serde(serialize_with = "timestamp")]
    pub submitted_at: DateTime<Utc>,
    #[serde(serialize_with = "timestamp")]
    pub updated_at: DateTime<Utc>,
    pub history: Vec<StatusChange>,
    /// Boot id of the server process working on it.
    pub lease: Option<String>,
    /// Weights produced by server-side training, kept so a restart during
    /// evaluation does not retrain.
    pub trained: Option<NetworkCheckpoint>,
}

impl Submission {
    pub fn new(
        id: String,
        display_name: String,
        config: Box<RawValue>,
        checkpoint: Option<NetworkCheckpoint>,
        idempotency_key: Option<String>,
        parameter_count: usize,
    ) -> Self {
        let at = now();
        Self {
            id,
            display_name,
            config,
            checkpoint,
            idempotency_key,
            parameter_count,
            status: Status::Queued,
            score: None,
            score_std: None,
            failure: None,
            submitted_at: at,
            updated_at: at,
            history: vec![StatusChange {
                status: Status::Queued,
                at,
            }],
            lease: None,
            trained: None,
        }
    }

    pub fn agent_config(&self) -> Result<AgentConfig, traffic_core::dqn::ConfigError> {
        AgentConfig::from_json(self.config.get())
    }

    pub fn set_status(&mut self, status: Status) {
        let at = now();
        self.status = status;
        self.updated_at = at;
        self.history.push(StatusChange { status, at });
    }

    /// Same request, for idempotent replays.
    pub fn same_request(&self, other: &Submission) -> bool {
        self.display_name == other.display_name
            && self.config.get() == other.config.get()
            && self.checkpoint == other.checkpoint
    }

    pub fn view(&self) -> SubmissionView<'_> {
        SubmissionView {
            id: &self.id,
            display_name: &self.display_name,
            config: &self.config,
            has_checkpoint: self.checkpoint.is_some(),
            parameter_count: self.parameter_count,
            status: self.status,
            score: self.score,
            score_std: self.score_std,
            failure: self.failure.as_deref(),
            submitted_at: self.submitted_at,
            updated_at: self.updated_at,
            history: &self.history,
        }
    }
}

/// What `GET /submissions/{id}` returns.
#[derive(Debug, Serialize)]
pub struct SubmissionView<'a> {
    pub id: &'a str,
    pub display_name: &'a str,
    pub config: &'a RawValue,
    pub has_checkpoint: bool,
    pub parameter_count: usize,
    pub status: Status,
    pub score: Option<f64>,
    pub score_std: Option<f64>,
    pub failure: Option<&'a str>,
    #[serde(serialize_with = "timestamp")]
    pub submitted_at: DateTime<Utc>,
    #[serde(serialize_with = "timestamp")]
    pub updated_at: DateTime<Utc>,
    pub history: &'a [StatusChange],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub id: String,
    pub display_name: String,
    pub score: f64,
    pub parameter_count: usize,
    #[serde(serialize_with = "timestamp")]
    pub submitted_at: DateTime<Utc>,
}

/// Scored submissions, best first. Equal scores share the rank of the first
/// of them and are listed oldest first; the next distinct score skips ahead
/// (74.1, 74.1, 73.2 ranks 1, 1, 3).
pub fn leaderboard(subs: &[Submission], limit: usize) -> Vec<LeaderboardEntry> {
    let mut scored: Vec<(&Submission, f64)> =
        subs.iter().filter_map(|s| s.score.filter(|_| s.status == Status::Scored).map(|v| (s, v))).collect();
    scored.sort_by(|(a, x), (b, y)| {
        y.total_cmp(x)
            .then(a.submitted_at.cmp(&b.submitted_at))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut out: Vec<LeaderboardEntry> = Vec::with_capacity(limit.min(scored.len()));
    for (k, (s, score)) in scored.into_iter().take(limit).enumerate() {
        let rank = match out.last() {
            Some(prev) if prev.score == score => prev.rank,
            _ => k + 1,
        };
        out.push(LeaderboardEntry {
            rank,
            id: s.id.clone(),
            display_name: s.display_name.clone(),
            score,
            parameter_count: s.parameter_count,
            submitted_at: s.submitted_at,
        });
    }
    out
}
