//! HTTP service around the self-supervision loop.
//!
//! One run at a time executes on a dedicated thread. When the loop issues a
//! feature query it blocks until a decision is posted; the decision is
//! appended to the run's log and synced before the loop continues.
//!
//! Endpoints: `GET /status`, `GET /history`, `GET /evidence`,
//! `GET /pending`, `POST /decision`, `POST /run`, `POST /pause`,
//! `POST /resume`.

pub mod api;
mod runner;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::info;
use s4_core::s4::{HumanDecision, S4Run};
use s4_core::settings::RunInputs;
use s4_core::S4Config;
use thiserror::Error;

use api::*;
pub use runner::read_decision_log;
use runner::{drive, open_log, Inner, Shared};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(String),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            ServiceError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        };
        let body = ErrorBody {
            error: self.to_string(),
            kind: kind.into(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ServiceError {
    fn from(r: JsonRejection) -> Self {
        ServiceError::Validation(r.body_text())
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Each run checkpoints into `data_dir/run-<id>`.
    pub data_dir: PathBuf,
    /// After this long without a decision the run reports `paused`.
    pub decision_timeout: Option<Duration>,
}

/// Handle to the service state. Cloning shares it.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
    config: Arc<ServiceConfig>,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Service {
        Service {
            shared: Arc::new(Shared {
                inner: Mutex::new(Inner::new()),
                wake: Condvar::new(),
                decision_timeout: config.decision_timeout,
            }),
            config: Arc::new(config),
        }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/status", get(status))
            .route("/history", get(history))
            .route("/evidence", get(evidence))
            .route("/pending", get(pending))
            .route("/decision", post(decision))
            .route("/run", post(start_run))
            .route("/pause", post(pause))
            .route("/resume", post(resume))
            .with_state(self.clone())
    }

    /// Asks the active run, if any, to stop at its next pause point.
    pub fn stop(&self) {
        self.shared.lock().stop = true;
        self.shared.wake.notify_all();
    }

    pub fn status(&self) -> Status {
        let inner = self.shared.lock();
        let cfg = inner.config.clone().unwrap_or(S4Config {
            outer_iterations: 0,
            ..Default::default()
        });
        Status {
            state: inner.state,
            run_id: inner.run_id,
            labels: inner.labels.clone(),
            outer_iteration: inner.history.len(),
            outer_iterations: cfg.outer_iterations,
            budget: cfg.budget,
            evidence_count: inner
                .evidence
                .iter()
                .filter(|e| e["status"] == "active")
                .count(),
            fal_queries: inner.fal.0,
            fal_accepted: inner.fal.1,
            fal_rejected: inner.fal.2,
            pending_query_id: inner.pending.as_ref().map(|p| p.query.query_id),
            pause_requested: inner.pause_requested,
            checkpoint_dir: inner.checkpoint_dir.clone(),
            error: inner.error.clone(),
        }
    }

    /// Validates the request, then launches the loop thread.
    pub fn start(&self, req: RunRequest) -> Result<RunStarted, ServiceError> {
        if self.shared.lock().state.is_active() {
            return Err(ServiceError::Conflict("a run is already active".into()));
        }
        let cfg = req
            .settings
            .apply(S4Config::default())
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        let inputs = RunInputs::load(&req.corpus, req.eval.as_deref(), req.seed_file.as_deref())
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        let replay = match &req.replay {
            Some(p) => read_decision_log(p)?,
            None => Vec::new(),
        };
        let labels = inputs.corpus.labels().to_vec();
        let run = S4Run::new(inputs.corpus, inputs.seed, cfg.clone(), inputs.eval)
            .map_err(|e| ServiceError::Validation(e.to_string()))?;

        let mut inner = self.shared.lock();
        if inner.state.is_active() {
            return Err(ServiceError::Conflict("a run is already active".into()));
        }
        let run_id = inner.next_run_id;
        let dir = self.config.data_dir.join(format!("run-{run_id}"));
        let log = open_log(&dir)?;
        inner.next_run_id += 1;
        *inner = Inner {
            state: RunState::Running,
            run_id: Some(run_id),
            next_run_id: inner.next_run_id,
            config: Some(cfg),
            labels,
            checkpoint_dir: Some(dir.clone()),
            log: Some(log),
            ..Inner::new()
        };
        drop(inner);
        info!("starting run {run_id} in {}", dir.display());
        let shared = self.shared.clone();
        let thread_dir = dir.clone();
        std::thread::Builder::new()
            .name(format!("s4-run-{run_id}"))
            .spawn(move || drive(shared, run, thread_dir, replay))
            .map_err(|e| ServiceError::Io(e.to_string()))?;
        Ok(RunStarted {
            run_id,
            state: RunState::Running,
            checkpoint_dir: dir,
        })
    }

    /// Records a decision on the pending query and wakes the loop.
    pub fn decide(&self, req: DecisionRequest) -> Result<DecisionAck, ServiceError> {
        let mut inner = self.shared.lock();
        if inner.answered.contains(&req.query_id) {
            return Err(ServiceError::Conflict(format!(
                "query {} was already decided",
                req.query_id
            )));
        }
        let Some(pending) = inner.pending.as_ref() else {
            return Err(ServiceError::Conflict("no query is pending".into()));
        };
        if pending.query.query_id != req.query_id {
            return Err(ServiceError::Conflict(format!(
                "query {} is not pending; the pending query is {}",
                req.query_id, pending.query.query_id
            )));
        }
        let decision = match req.action {
            Action::Reject => HumanDecision::Reject,
            Action::Accept => {
                let label = match req.label {
                    None => return Err(ServiceError::Validation("accept requires a label".into())),
                    Some(LabelRef::Index(i)) => (i < inner.labels.len()).then_some(i),
                    Some(LabelRef::Name(ref n)) => inner.labels.iter().position(|l| l == n),
                };
                let label = label.ok_or_else(|| {
                    ServiceError::Validation(format!(
                        "label {:?} is not one of {:?}",
                        req.label, inner.labels
                    ))
                })?;
                HumanDecision::Accept { label }
            }
        };
        inner.log_decision(req.query_id, decision)?;
        inner.answered.insert(req.query_id);
        inner.answer = Some((req.query_id, decision));
        inner.pending = None;
        inner.state = RunState::Running;
        self.shared.wake.notify_all();
        Ok(DecisionAck {
            query_id: req.query_id,
            decision,
            durable: true,
        })
    }

    /// The run stops before its next outer iteration until resumed.
    pub fn pause(&self) -> Result<Status, ServiceError> {
        {
            let mut inner = self.shared.lock();
            if !inner.state.is_active() {
                return Err(ServiceError::Conflict(format!(
                    "cannot pause a run in state {:?}",
                    inner.state
                )));
            }
            inner.pause_requested = true;
        }
        Ok(self.status())
    }

    pub fn resume(&self) -> Result<Status, ServiceError> {
        {
            let mut inner = self.shared.lock();
            if !inner.state.is_active() {
                return Err(ServiceError::Conflict(format!(
                    "cannot resume a run in state {:?}",
                    inner.state
                )));
            }
            inner.pause_requested = false;
            if inner.state == RunState::Paused && inner.pending.is_some() {
                inner.state = RunState::AwaitingHuman;
            }
            self.shared.wake.notify_all();
        }
        Ok(self.status())
    }
}

async fn status(State(s): State<Service>) -> Json<Status> {
    Json(s.status())
}

async fn history(State(s): State<Service>) -> Json<History> {
    Json(History {
        rows: s.shared.lock().history.clone(),
    })
}

async fn evidence(State(s): State<Service>) -> Json<Evidence> {
    Json(Evidence {
        evidence: s.shared.lock().evidence.clone(),
    })
}

async fn pending(State(s): State<Service>) -> Json<PendingResponse> {
    Json(PendingResponse {
        pending: s.shared.lock().pending.clone(),
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))?
}

async fn decision(
    State(s): State<Service>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> Result<Json<DecisionAck>, ServiceError> {
    let Json(req) = body?;
    blocking(move || s.decide(req)).await.map(Json)
}

async fn start_run(
    State(s): State<Service>,
    body: Result<Json<RunRequest>, JsonRejection>,
) -> Result<Json<RunStarted>, ServiceError> {
    let Json(req) = body?;
    blocking(move || s.start(req)).await.map(Json)
}

async fn pause(State(s): State<Service>) -> Result<Json<Status>, ServiceError> {
    s.pause().map(Json)
}

async fn resume(State(s): State<Service>) -> Result<Json<Status>, ServiceError> {
    s.resume().map(Json)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let service = Service::new(config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    let stopper = service.clone();
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            stopper.stop();
        })
        .await
}
