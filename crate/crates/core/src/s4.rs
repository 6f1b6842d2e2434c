//! The self-supervised self-supervision loop.
//!
//! Each outer iteration alternates DPL learning with self-training
//! proposals until the evidence-only labeling stops moving, then, while the
//! human budget lasts, issues one feature query through a
//! [`DecisionChannel`]. The run can be advanced one outer iteration at a time
//! so a service can pause it and publish progress in between.

use std::path::Path;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_feature_universe, Corpus, CorpusError, FeatureUniverse, LabelId, DEFAULT_TOP_FRACTION,
};
use crate::evidence::{
    EvidenceError, EvidenceKind, EvidenceSpec, FactorGraph, Predicate, Source, DEFAULT_WEIGHT,
    HARD_WEIGHT,
};
use crate::inference::{evidence_only_marginals, InferenceError, Marginals};
use crate::learning::{accuracy, dpl_learn, DplOutcome, EmConfig, EvalSet, LearnError};
use crate::oracle::Oracle;
use crate::predictor::{AttentionClassifier, Predictor, PredictorConfig, PredictorError};
use crate::proposers::{
    delta_fraction, prop_fal, prop_sst, Decision, FalQuery, ProposalLedger, ProposerConfig,
    ProposerError, ScoreStats, Strategy, DEFAULT_ALPHA,
};

pub const DEFAULT_OUTER_ITERATIONS: usize = 10;
pub const DEFAULT_MAX_SST_STEPS: usize = 50;
/// Matching instances shown with a feature query.
pub const QUERY_EXAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum S4Error {
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("decision channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S4Config {
    /// M
    pub outer_iterations: usize,
    /// T, the number of feature queries allowed.
    pub budget: usize,
    /// `None` disables self-training proposals.
    pub sst: Option<ProposerConfig>,
    pub alpha: f64,
    pub max_sst_steps: usize,
    pub em: EmConfig,
    pub predictor: PredictorConfig,
    /// Restart every outer iteration from the initial predictor instead of
    /// warm-starting from the previous one.
    pub reinit_predictor: bool,
    pub sst_weight: f64,
    pub sst_learnable: bool,
    pub fal_weight: f64,
    pub fal_learnable: bool,
    pub universe_fraction: f64,
    pub stop_tokens: Vec<String>,
    /// Let feature queries use two-token conjunctions.
    pub fal_conjunctions: bool,
    pub seed: u64,
}

impl Default for S4Config {
    fn default() -> Self {
        S4Config {
            outer_iterations: DEFAULT_OUTER_ITERATIONS,
            budget: 0,
            sst: Some(ProposerConfig::default()),
            alpha: DEFAULT_ALPHA,
            max_sst_steps: DEFAULT_MAX_SST_STEPS,
            em: EmConfig::default(),
            predictor: PredictorConfig::default(),
            reinit_predictor: true,
            sst_weight: DEFAULT_WEIGHT,
            sst_learnable: true,
            fal_weight: DEFAULT_WEIGHT,
            fal_learnable: true,
            universe_fraction: DEFAULT_TOP_FRACTION,
            stop_tokens: Vec::new(),
            fal_conjunctions: false,
            seed: 0,
        }
    }
}

impl S4Config {
    pub fn validate(&self) -> Result<(), S4Error> {
        let bad = |m: &str| Err(S4Error::Config(m.to_string()));
        if self.outer_iterations == 0 {
            return bad("outer_iterations must be at least 1");
        }
        if self.max_sst_steps == 0 {
            return bad("max_sst_steps must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.universe_fraction > 0.0 && self.universe_fraction <= 1.0) {
            return bad("universe_fraction must be in (0, 1]");
        }
        if !self.sst_weight.is_finite() || !self.fal_weight.is_finite() {
            return bad("evidence weights must be finite");
        }
        let em = &self.em;
        if em.em_iterations == 0 || em.train.epochs == 0 || em.train.batch_size == 0 {
            return bad("em_iterations, epochs and batch_size must be positive");
        }
        if !(em.train.learning_rate > 0.0 && em.weight_step > 0.0) {
            return bad("learning_rate and weight_step must be positive");
        }
        if !(em.bp.damping >= 0.0 && em.bp.damping < 1.0) || em.bp.max_sweeps == 0 {
            return bad("damping must be in [0, 1) and max_sweeps positive");
        }
        if let Some(p) = &self.sst {
            if p.batch == Some(0) {
                return bad("sst batch must be positive");
            }
        }
        Ok(())
    }
}

/// A human's answer to a feature query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum HumanDecision {
    Accept { label: LabelId },
    Reject,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("no decision source is attached")]
    Unavailable,
    #[error("replay log exhausted after {0} decisions")]
    Exhausted(usize),
    #[error("run stopped while awaiting a decision")]
    Stopped,
    #[error("label {0} out of range")]
    BadLabel(LabelId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub label: String,
    pub label_id: LabelId,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleView {
    pub instance: usize,
    pub text: String,
    /// Tokens of the predicate, to highlight.
    pub highlight: Vec<String>,
}

/// A feature query as presented to the decision maker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub query_id: u64,
    pub outer_iteration: usize,
    pub predicate: Predicate,
    pub description: String,
    pub tokens: Vec<String>,
    pub candidates: Vec<CandidateView>,
    pub examples: Vec<ExampleView>,
    pub entropy: f64,
    pub mean_posterior: Vec<f64>,
}

impl PendingQuery {
    fn build(q: &FalQuery, outer_iteration: usize, corpus: &Corpus) -> PendingQuery {
        let tokens: Vec<String> = q
            .predicate
            .tokens()
            .iter()
            .map(|&t| corpus.vocabulary().token(t).to_string())
            .collect();
        let candidates = q
            .candidates
            .iter()
            .map(|k| {
                let l = k.label().expect("feature candidate has a label");
                CandidateView {
                    label: corpus.labels()[l].clone(),
                    label_id: l,
                    evidence: k.describe(corpus),
                }
            })
            .collect();
        let examples = q
            .predicate
            .matches(corpus)
            .into_iter()
            .take(QUERY_EXAMPLES)
            .map(|i| ExampleView {
                instance: i,
                text: corpus.instance(i).raw_text.clone(),
                highlight: tokens.clone(),
            })
            .collect();
        let mean_posterior = match &q.report.stats {
            ScoreStats::Entropy { mean_posterior, .. } => mean_posterior.clone(),
            _ => Vec::new(),
        };
        PendingQuery {
            query_id: q.seq,
            outer_iteration,
            predicate: q.predicate,
            description: q.predicate.describe(corpus),
            tokens,
            candidates,
            examples,
            entropy: q.entropy(),
            mean_posterior,
        }
    }
}

/// Source of human decisions on feature queries.
pub trait DecisionChannel {
    fn decide(
        &mut self,
        query: &PendingQuery,
        corpus: &Corpus,
    ) -> Result<HumanDecision, ChannelError>;
}

/// Rejects the configuration if a query is ever issued.
pub struct NoHuman;

impl DecisionChannel for NoHuman {
    fn decide(&mut self, _q: &PendingQuery, _c: &Corpus) -> Result<HumanDecision, ChannelError> {
        Err(ChannelError::Unavailable)
    }
}

/// Simulated expert backed by an [`Oracle`].
pub struct OracleChannel<'a> {
    pub oracle: &'a Oracle,
}

impl DecisionChannel for OracleChannel<'_> {
    fn decide(&mut self, q: &PendingQuery, corpus: &Corpus) -> Result<HumanDecision, ChannelError> {
        Ok(match self.oracle.judge(q.predicate, corpus) {
            Some(label) => HumanDecision::Accept { label },
            None => HumanDecision::Reject,
        })
    }
}

/// Plays back recorded decisions in order.
pub struct ReplayChannel {
    decisions: Vec<HumanDecision>,
    next: usize,
}

impl ReplayChannel {
    pub fn new(decisions: Vec<HumanDecision>) -> Self {
        ReplayChannel { decisions, next: 0 }
    }
}

impl DecisionChannel for ReplayChannel {
    fn decide(&mut self, _q: &PendingQuery, _c: &Corpus) -> Result<HumanDecision, ChannelError> {
        let d = self
            .decisions
            .get(self.next)
            .copied()
            .ok_or(ChannelError::Exhausted(self.decisions.len()))?;
        self.next += 1;
        Ok(d)
    }
}

/// Wraps a channel and keeps every decision it returns.
pub struct RecordingChannel<C> {
    pub inner: C,
    pub decisions: Vec<HumanDecision>,
}

impl<C: DecisionChannel> RecordingChannel<C> {
    pub fn new(inner: C) -> Self {
        RecordingChannel {
            inner,
            decisions: Vec::new(),
        }
    }
}

impl<C: DecisionChannel> DecisionChannel for RecordingChannel<C> {
    fn decide(&mut self, q: &PendingQuery, c: &Corpus) -> Result<HumanDecision, ChannelError> {
        let d = self.inner.decide(q, c)?;
        self.decisions.push(d);
        Ok(d)
    }
}

/// One row per outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub outer_iteration: usize,
    pub evidence_count: usize,
    pub seed_count: usize,
    pub sst_added: usize,
    pub fal_queries: usize,
    pub fal_accepted: usize,
    pub fal_rejected: usize,
    pub inner_steps: usize,
    /// The inner loop stopped at `max_sst_steps` without converging.
    pub sst_capped: bool,
    /// No unproposed self-training candidate was left.
    pub sst_exhausted: bool,
    /// |Δ|/N of the last inner step.
    pub delta_fraction: f64,
    pub predictor_loss: f64,
    pub bp_converged: bool,
    pub test_accuracy: Option<f64>,
}

/// Comma-separated history with a header line.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("history rows serialize");
    }
    // An empty table still gets its header.
    if rows.is_empty() {
        w.write_record([
            "outer_iteration",
            "evidence_count",
            "seed_count",
            "sst_added",
            "fal_queries",
            "fal_accepted",
            "fal_rejected",
            "inner_steps",
            "sst_capped",
            "sst_exhausted",
            "delta_fraction",
            "predictor_loss",
            "bp_converged",
            "test_accuracy",
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Held-out corpus with gold labels.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub corpus: Arc<Corpus>,
    pub gold: Vec<LabelId>,
}

impl EvalData {
    pub fn as_set(&self) -> EvalSet<'_> {
        EvalSet {
            corpus: &self.corpus,
            gold: &self.gold,
        }
    }
}

/// Fraction of argmax-correct predictions on `eval`.
pub fn evaluate<P: Predictor>(psi: &P, eval: &EvalData) -> f64 {
    accuracy(psi, &eval.as_set())
}

/// State of one run, advanced with [`S4Run::step`].
pub struct S4Run<P: Predictor> {
    cfg: S4Config,
    corpus: Arc<Corpus>,
    graph: FactorGraph,
    psi: P,
    initial: P,
    ledger: ProposalLedger,
    universe: FeatureUniverse,
    history: Vec<HistoryRow>,
    eval: Option<EvalData>,
    outer: usize,
    seed_count: usize,
    sst_added: usize,
    fal_accepted: usize,
    fal_rejected: usize,
    last_q: Option<Marginals>,
    last_dpl: Option<DplOutcome>,
    decisions: Vec<HumanDecision>,
}

impl S4Run<AttentionClassifier> {
    /// Run with the built-in attention classifier.
    pub fn new(
        corpus: Arc<Corpus>,
        seed: Vec<EvidenceSpec>,
        cfg: S4Config,
        eval: Option<EvalData>,
    ) -> Result<Self, S4Error> {
        let psi = AttentionClassifier::for_corpus(
            &corpus,
            PredictorConfig {
                seed: cfg.seed,
                ..cfg.predictor
            },
        );
        Self::with_predictor(corpus, seed, cfg, eval, psi)
    }
}

impl<P: Predictor> S4Run<P> {
    /// Runs with `psi` as the initial predictor.
    pub fn with_predictor(
        corpus: Arc<Corpus>,
        seed: Vec<EvidenceSpec>,
        cfg: S4Config,
        eval: Option<EvalData>,
        psi: P,
    ) -> Result<Self, S4Error> {
        cfg.validate()?;
        let mut graph = FactorGraph::new(corpus.clone());
        let seed_count = seed.len();
        for spec in seed {
            graph.attach(EvidenceSpec {
                source: Source::Seed,
                ..spec
            })?;
        }
        let universe = build_feature_universe(&corpus, cfg.universe_fraction, &cfg.stop_tokens)?;
        if psi.n_labels() != corpus.n_labels() {
            return Err(LearnError::LabelMismatch {
                predictor: psi.n_labels(),
                graph: corpus.n_labels(),
            }
            .into());
        }
        Ok(S4Run {
            cfg,
            corpus,
            graph,
            initial: psi.clone(),
            psi,
            ledger: ProposalLedger::new(),
            universe,
            history: Vec::new(),
            eval,
            outer: 0,
            seed_count,
            sst_added: 0,
            fal_accepted: 0,
            fal_rejected: 0,
            last_q: None,
            last_dpl: None,
            decisions: Vec::new(),
        })
    }

    pub fn config(&self) -> &S4Config {
        &self.cfg
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn predictor(&self) -> &P {
        &self.psi
    }

    pub fn ledger(&self) -> &ProposalLedger {
        &self.ledger
    }

    pub fn universe(&self) -> &FeatureUniverse {
        &self.universe
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    /// Decisions received so far, in order; replaying them reproduces the run.
    pub fn decisions(&self) -> &[HumanDecision] {
        &self.decisions
    }

    /// Posterior marginals from the latest learning round.
    pub fn marginals(&self) -> Option<&Marginals> {
        self.last_q.as_ref()
    }

    pub fn last_learning(&self) -> Option<&DplOutcome> {
        self.last_dpl.as_ref()
    }

    pub fn completed_iterations(&self) -> usize {
        self.outer
    }

    pub fn is_done(&self) -> bool {
        self.outer >= self.cfg.outer_iterations
    }

    /// Runs all remaining outer iterations.
    pub fn run(&mut self, channel: &mut dyn DecisionChannel) -> Result<(), S4Error> {
        while !self.is_done() {
            self.step(channel)?;
        }
        Ok(())
    }

    /// Runs one outer iteration and returns its history row, or `None` if
    /// the run is already complete.
    pub fn step(
        &mut self,
        channel: &mut dyn DecisionChannel,
    ) -> Result<Option<&HistoryRow>, S4Error> {
        if self.is_done() {
            return Ok(None);
        }
        if self.cfg.reinit_predictor && self.outer > 0 {
            self.psi = self.initial.clone();
        }
        // Frozen snapshot for similarity deltas.
        let baseline = self.psi.clone();
        let eval = self.eval.clone();
        let eval_set = eval.as_ref().map(|e| e.as_set());
        let bp = self.cfg.em.bp;

        let mut prev = evidence_only_marginals(&self.graph, &bp)?;
        let mut inner_steps = 0;
        let mut capped = false;
        let mut exhausted = false;
        let mut delta = 0.0;
        let mut bp_converged = true;
        loop {
            inner_steps += 1;
            let out = dpl_learn(
                &mut self.graph,
                &mut self.psi,
                &self.cfg.em,
                eval_set.as_ref(),
            )?;
            bp_converged &= out.bp_converged;
            let Some(sst) = self.cfg.sst else {
                self.finish_learning(out);
                break;
            };
            let proposals = prop_sst(
                &self.graph,
                &self.psi,
                &baseline,
                &out.q,
                &mut self.ledger,
                &self.universe,
                &sst,
            )?;
            self.finish_learning(out);
            if proposals.is_empty() {
                exhausted = true;
                break;
            }
            for p in proposals {
                let spec = EvidenceSpec {
                    weight: self.cfg.sst_weight,
                    learnable: self.cfg.sst_learnable,
                    ..p.spec
                };
                self.graph.attach(spec)?;
                self.sst_added += 1;
            }
            let cur = evidence_only_marginals(&self.graph, &bp)?;
            delta = delta_fraction(&prev, &cur);
            prev = cur;
            if delta < self.cfg.alpha {
                break;
            }
            if inner_steps >= self.cfg.max_sst_steps {
                capped = true;
                break;
            }
        }

        if self.ledger.fal_queries() < self.cfg.budget {
            self.feature_query(channel)?;
        }

        let row = HistoryRow {
            outer_iteration: self.outer,
            evidence_count: self.graph.active_count(),
            seed_count: self.seed_count,
            sst_added: self.sst_added,
            fal_queries: self.ledger.fal_queries(),
            fal_accepted: self.fal_accepted,
            fal_rejected: self.fal_rejected,
            inner_steps,
            sst_capped: capped,
            sst_exhausted: exhausted,
            delta_fraction: delta,
            predictor_loss: self
                .last_dpl
                .as_ref()
                .and_then(|o| o.log.last())
                .map_or(f64::NAN, |r| r.predictor_loss),
            bp_converged,
            test_accuracy: self.eval.as_ref().map(|e| evaluate(&self.psi, e)),
        };
        info!(
            "outer iteration {}: {} evidences, {} inner steps, accuracy {:?}",
            row.outer_iteration, row.evidence_count, row.inner_steps, row.test_accuracy
        );
        self.history.push(row);
        self.outer += 1;
        Ok(self.history.last())
    }

    fn finish_learning(&mut self, out: DplOutcome) {
        self.last_q = Some(out.q.clone());
        self.last_dpl = Some(out);
    }

    fn feature_query(&mut self, channel: &mut dyn DecisionChannel) -> Result<(), S4Error> {
        let q = self.last_q.as_ref().expect("learning ran before the query");
        let Some(query) = prop_fal(
            &self.graph,
            q,
            &mut self.ledger,
            &self.universe,
            self.cfg.fal_conjunctions,
        )?
        else {
            info!("no feature left to query");
            return Ok(());
        };
        let view = PendingQuery::build(&query, self.outer, &self.corpus);
        let decision = channel.decide(&view, &self.corpus)?;
        self.decisions.push(decision);
        match decision {
            HumanDecision::Accept { label } => {
                if label >= self.corpus.n_labels() {
                    return Err(ChannelError::BadLabel(label).into());
                }
                self.ledger
                    .decide(query.seq, Decision::Accepted { label })?;
                let kind = EvidenceKind::feature_label(query.predicate, label);
                self.graph.attach(EvidenceSpec {
                    weight: self.cfg.fal_weight,
                    learnable: self.cfg.fal_learnable,
                    ..EvidenceSpec::new(kind, Source::Fal)
                })?;
                self.fal_accepted += 1;
            }
            HumanDecision::Reject => {
                self.ledger.decide(query.seq, Decision::Rejected)?;
                self.fal_rejected += 1;
            }
        }
        Ok(())
    }

    /// Writes `corpus.sha256`, `evidence.jsonl`, `model.bin`,
    /// `ledger.jsonl` and `history.csv` into `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<(), S4Error> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("corpus.sha256"), self.corpus.content_hash() + "\n")?;
        std::fs::write(dir.join("evidence.jsonl"), self.graph.to_jsonl())?;
        self.psi.save_checkpoint(&dir.join("model.bin"))?;
        std::fs::write(dir.join("ledger.jsonl"), self.ledger.to_jsonl())?;
        std::fs::write(dir.join("history.csv"), history_csv(&self.history))?;
        Ok(())
    }
}

/// Runs the loop to completion.
pub fn run_s4(
    corpus: Arc<Corpus>,
    seed: Vec<EvidenceSpec>,
    cfg: S4Config,
    eval: Option<EvalData>,
    channel: &mut dyn DecisionChannel,
) -> Result<S4Run<AttentionClassifier>, S4Error> {
    let mut run = S4Run::new(corpus, seed, cfg, eval)?;
    run.run(channel)?;
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub rounds: usize,
    pub threshold: f64,
    /// Pseudo-labels added per round.
    pub batch: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            rounds: DEFAULT_OUTER_ITERATIONS,
            threshold: 0.0,
            batch: 10,
        }
    }
}

/// The S4 configuration that reduces to classic self-training: hard
/// instance labels as seed, one batch of confident pseudo-labels per round,
/// no feature queries.
pub fn self_training_config(base: &S4Config, st: &SelfTrainConfig) -> S4Config {
    S4Config {
        outer_iterations: st.rounds,
        budget: 0,
        sst: Some(ProposerConfig {
            strategy: Strategy::InstanceConfidence,
            batch: Some(st.batch),
            instance_threshold: st.threshold,
            conjunctions: false,
        }),
        max_sst_steps: 1,
        sst_weight: HARD_WEIGHT,
        sst_learnable: false,
        ..base.clone()
    }
}

/// Hard, fixed instance-label seeds for labeled examples.
pub fn instance_seeds(labeled: &[(usize, LabelId)]) -> Vec<EvidenceSpec> {
    labeled
        .iter()
        .map(|&(instance, label)| {
            EvidenceSpec::new(
                EvidenceKind::InstanceLabel { instance, label },
                Source::Seed,
            )
            .with_weight(HARD_WEIGHT)
            .fixed()
        })
        .collect()
}

/// Self-training from labeled examples, expressed as an S4 run.
pub fn self_train_baseline(
    corpus: Arc<Corpus>,
    labeled: &[(usize, LabelId)],
    st: &SelfTrainConfig,
    base: &S4Config,
    eval: Option<EvalData>,
) -> Result<S4Run<AttentionClassifier>, S4Error> {
    let cfg = self_training_config(base, st);
    run_s4(corpus, instance_seeds(labeled), cfg, eval, &mut NoHuman)
}

/// Pseudo-labels in the order they were added.
pub fn pseudo_label_sequence(ledger: &ProposalLedger) -> Vec<(usize, LabelId)> {
    ledger
        .records()
        .iter()
        .flat_map(|r| r.candidates.iter())
        .filter_map(|k| match *k {
            EvidenceKind::InstanceLabel { instance, label } => Some((instance, label)),
            _ => None,
        })
        .collect()
}
