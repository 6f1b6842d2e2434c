//! Request and response bodies.

use std::path::PathBuf;

use s4_core::s4::{HistoryRow, HumanDecision, PendingQuery};
use s4_core::settings::Settings;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Running,
    AwaitingHuman,
    Paused,
    Done,
    Failed,
}

impl RunState {
    /// Whether a loop thread owns the run.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            RunState::Running | RunState::AwaitingHuman | RunState::Paused
        )
    }
}

/// Body of `POST /run`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub corpus: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default)]
    pub seed_file: Option<PathBuf>,
    /// Decision log of an earlier run; its decisions answer the first
    /// queries before anything is shown to a human.
    #[serde(default)]
    pub replay: Option<PathBuf>,
    #[serde(default)]
    pub settings: Settings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStarted {
    pub run_id: u64,
    pub state: RunState,
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Status {
    pub state: RunState,
    pub run_id: Option<u64>,
    pub labels: Vec<String>,
    /// Completed outer iterations.
    pub outer_iteration: usize,
    pub outer_iterations: usize,
    pub budget: usize,
    pub evidence_count: usize,
    pub fal_queries: usize,
    pub fal_accepted: usize,
    pub fal_rejected: usize,
    pub pending_query_id: Option<u64>,
    pub pause_requested: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evidence {
    pub evidence: Vec<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pending {
    #[serde(flatten)]
    pub query: PendingQuery,
    /// Milliseconds since the Unix epoch.
    pub issued_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendingResponse {
    pub pending: Option<Pending>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Accept,
    Reject,
}

/// A label given by name or by index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelRef {
    Index(usize),
    Name(String),
}

/// Body of `POST /decision`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub query_id: u64,
    pub action: Action,
    #[serde(default)]
    pub label: Option<LabelRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionAck {
    pub query_id: u64,
    pub decision: HumanDecision,
    /// The decision reached the log on disk before this response.
    pub durable: bool,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedDecision {
    pub query_id: u64,
    #[serde(flatten)]
    pub decision: HumanDecision,
    pub decided_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}
