//! Shared run state and the loop thread.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{error, info, warn};
use s4_core::s4::{ChannelError, DecisionChannel, HistoryRow, HumanDecision, PendingQuery, S4Run};
use s4_core::{AttentionClassifier, Corpus, S4Config};
use serde_json::Value;

use crate::api::{LoggedDecision, Pending, RunState};
use crate::ServiceError;

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Everything readers see. Only the loop thread and the control endpoints
/// write it.
pub(crate) struct Inner {
    pub state: RunState,
    pub run_id: Option<u64>,
    pub next_run_id: u64,
    pub config: Option<S4Config>,
    pub labels: Vec<String>,
    pub checkpoint_dir: Option<PathBuf>,
    pub pause_requested: bool,
    pub stop: bool,
    pub pending: Option<Pending>,
    pub answer: Option<(u64, HumanDecision)>,
    pub answered: HashSet<u64>,
    pub log: Option<File>,
    pub history: Vec<HistoryRow>,
    pub evidence: Vec<Value>,
    pub fal: (usize, usize, usize),
    pub error: Option<String>,
}

impl Inner {
    pub fn new() -> Inner {
        Inner {
            state: RunState::Idle,
            run_id: None,
            next_run_id: 1,
            config: None,
            labels: Vec::new(),
            checkpoint_dir: None,
            pause_requested: false,
            stop: false,
            pending: None,
            answer: None,
            answered: HashSet::new(),
            log: None,
            history: Vec::new(),
            evidence: Vec::new(),
            fal: (0, 0, 0),
            error: None,
        }
    }

    /// Appends a decision to the run's log and syncs it to disk.
    pub fn log_decision(
        &mut self,
        query_id: u64,
        decision: HumanDecision,
    ) -> Result<(), ServiceError> {
        let file = self
            .log
            .as_mut()
            .ok_or(ServiceError::Conflict("no active run".into()))?;
        let line = serde_json::to_string(&LoggedDecision {
            query_id,
            decision,
            decided_at: now_ms(),
        })
        .expect("serializable decision");
        writeln!(file, "{line}")
            .and_then(|_| file.sync_data())
            .map_err(|e| ServiceError::Io(e.to_string()))
    }
}

pub(crate) struct Shared {
    pub inner: Mutex<Inner>,
    pub wake: Condvar,
    pub decision_timeout: Option<Duration>,
}

impl Shared {
    pub fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Reads the decisions of a log written by an earlier run.
pub fn read_decision_log(path: &Path) -> Result<Vec<HumanDecision>, ServiceError> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::Validation(format!("{}: {e}", path.display())))?;
    content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<LoggedDecision>(l)
                .map(|d| d.decision)
                .map_err(|e| ServiceError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Blocks the loop until a decision arrives over HTTP. Replayed decisions
/// are consumed first.
struct HttpChannel {
    shared: Arc<Shared>,
    replay: std::vec::IntoIter<HumanDecision>,
}

impl DecisionChannel for HttpChannel {
    fn decide(
        &mut self,
        query: &PendingQuery,
        _corpus: &Corpus,
    ) -> Result<HumanDecision, ChannelError> {
        let mut inner = self.shared.lock();
        if let Some(d) = self.replay.next() {
            inner.answered.insert(query.query_id);
            inner
                .log_decision(query.query_id, d)
                .map_err(|_| ChannelError::Unavailable)?;
            return Ok(d);
        }
        inner.answer = None;
        inner.pending = Some(Pending {
            query: query.clone(),
            issued_at: now_ms(),
        });
        inner.state = RunState::AwaitingHuman;
        info!(
            "query {} awaiting a decision: {}",
            query.query_id, query.description
        );
        loop {
            if inner.stop {
                inner.pending = None;
                return Err(ChannelError::Stopped);
            }
            if let Some((id, d)) = inner.answer {
                if id == query.query_id {
                    inner.answer = None;
                    inner.pending = None;
                    inner.state = RunState::Running;
                    return Ok(d);
                }
            }
            inner = match self.shared.decision_timeout {
                None => self
                    .shared
                    .wake
                    .wait(inner)
                    .unwrap_or_else(|p| p.into_inner()),
                Some(t) => {
                    let (guard, res) = self
                        .shared
                        .wake
                        .wait_timeout(inner, t)
                        .unwrap_or_else(|p| p.into_inner());
                    let mut guard = guard;
                    if res.timed_out() && guard.state == RunState::AwaitingHuman {
                        warn!(
                            "no decision on query {} after {t:?}; pausing",
                            query.query_id
                        );
                        guard.state = RunState::Paused;
                    }
                    guard
                }
            };
        }
    }
}

fn publish(shared: &Shared, run: &S4Run<AttentionClassifier>) {
    let evidence = run
        .graph()
        .to_jsonl()
        .lines()
        .map(|l| serde_json::from_str(l).expect("evidence records are JSON"))
        .collect();
    let ledger = run.ledger();
    let mut inner = shared.lock();
    inner.history = run.history().to_vec();
    inner.evidence = evidence;
    inner.fal = (
        ledger.fal_queries(),
        run.history().last().map_or(0, |r| r.fal_accepted),
        run.history().last().map_or(0, |r| r.fal_rejected),
    );
}

fn finish(shared: &Shared, state: RunState, err: Option<String>) {
    let mut inner = shared.lock();
    inner.state = state;
    inner.error = err;
    inner.pending = None;
    inner.log = None;
    shared.wake.notify_all();
}

/// Drives the run to completion, honoring pause requests between outer
/// iterations and writing a checkpoint after each one.
pub(crate) fn drive(
    shared: Arc<Shared>,
    mut run: S4Run<AttentionClassifier>,
    dir: PathBuf,
    replay: Vec<HumanDecision>,
) {
    let mut channel = HttpChannel {
        shared: shared.clone(),
        replay: replay.into_iter(),
    };
    publish(&shared, &run);
    loop {
        {
            let mut inner = shared.lock();
            while inner.pause_requested && !inner.stop {
                inner.state = RunState::Paused;
                inner = shared.wake.wait(inner).unwrap_or_else(|p| p.into_inner());
            }
            if inner.stop {
                drop(inner);
                finish(&shared, RunState::Failed, Some("stopped".into()));
                return;
            }
            inner.state = RunState::Running;
        }
        if run.is_done() {
            break;
        }
        let step = run.step(&mut channel).map(|_| ());
        let step = step.and_then(|_| run.write_checkpoint(&dir));
        publish(&shared, &run);
        if let Err(e) = step {
            error!("run failed: {e}");
            finish(&shared, RunState::Failed, Some(e.to_string()));
            return;
        }
    }
    info!(
        "run finished after {} outer iterations",
        run.history().len()
    );
    finish(&shared, RunState::Done, None);
}

pub(crate) fn open_log(dir: &Path) -> Result<File, ServiceError> {
    std::fs::create_dir_all(dir).map_err(|e| ServiceError::Io(e.to_string()))?;
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("decisions.jsonl"))
        .map_err(|e| ServiceError::Io(e.to_string()))
}
