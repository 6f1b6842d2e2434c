//! Candidate self-supervision: structured self-training proposals (token
//! attention, predicate entropy, embedding-similarity pairs, confident
//! instances), maximum-entropy feature queries for a human, the ledger of
//! everything proposed so far, and the self-training convergence test.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, FeatureUniverse, LabelId, TokenId};
use crate::dist::{argmax, cosine, entropy};
use crate::evidence::{EvidenceKind, EvidenceSpec, FactorGraph, Predicate, Source};
use crate::inference::Marginals;
use crate::predictor::Predictor;

/// Floor on Ent(b) before taking the reciprocal.
pub const ENTROPY_FLOOR: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_JOINT_BATCH: usize = 10;
pub const DEFAULT_INSTANCE_BATCH: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ProposerError {
    #[error("token {0} is not in the feature universe")]
    Ineligible(TokenId),
    #[error("predicate matches no instance")]
    EmptyPredicate,
    #[error("similarity of instance {0} is undefined (zero embedding)")]
    UndefinedSimilarity(usize),
    #[error("pair scoring needs two distinct instances, got {0} twice")]
    SelfPair(usize),
    #[error("label {0} out of range")]
    BadLabel(LabelId),
    #[error("marginals do not cover instance {0}")]
    Uncovered(usize),
    #[error("no pending query with sequence number {0}")]
    UnknownQuery(u64),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Attention,
    Entropy,
    Joint,
    /// Pseudo-label the most confident unlabeled instances.
    InstanceConfidence,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(Strategy::Attention),
            "entropy" => Ok(Strategy::Entropy),
            "joint" => Ok(Strategy::Joint),
            "instance_confidence" | "instance" => Ok(Strategy::InstanceConfidence),
            other => Err(format!(
                "unknown strategy {other:?} (expected attention, entropy, joint or instance_confidence)"
            )),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Attention => "attention",
            Strategy::Entropy => "entropy",
            Strategy::Joint => "joint",
            Strategy::InstanceConfidence => "instance_confidence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub strategy: Strategy,
    /// Proposals per step; `None` uses the strategy default (10 for pairs
    /// and instances, 1 otherwise).
    pub batch: Option<usize>,
    /// Minimum confidence for instance pseudo-labels.
    pub instance_threshold: f64,
    /// Also score two-token conjunctions of universe tokens.
    pub conjunctions: bool,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            strategy: Strategy::Attention,
            batch: None,
            instance_threshold: 0.0,
            conjunctions: false,
        }
    }
}

impl ProposerConfig {
    pub fn batch_size(&self) -> usize {
        self.batch.unwrap_or(match self.strategy {
            Strategy::Joint => DEFAULT_JOINT_BATCH,
            Strategy::InstanceConfidence => DEFAULT_INSTANCE_BATCH,
            _ => 1,
        })
    }
}

/// Statistics a score was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreStats {
    /// C_t and Attn(t, l) for every label.
    Attention { count: u32, per_label: Vec<f64> },
    /// C_b, the average posterior and its entropy in nats.
    Entropy {
        count: u32,
        mean_posterior: Vec<f64>,
        entropy: f64,
    },
    /// Cosine under the current and the baseline predictor.
    Joint { current: f64, baseline: f64 },
    /// The predictor distribution of the instance.
    Confidence { posterior: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub candidate: EvidenceKind,
    pub score: f64,
    pub stats: ScoreStats,
}

impl ScoreReport {
    /// The score implied by the statistics alone.
    pub fn recompute(&self) -> f64 {
        match &self.stats {
            ScoreStats::Attention { per_label, .. } => {
                let l = self.candidate.label().expect("token candidate has a label");
                let others: f64 = per_label
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != l)
                    .map(|(_, a)| a)
                    .sum();
                per_label[l] - others
            }
            ScoreStats::Entropy { entropy, .. } => 1.0 / entropy.max(ENTROPY_FLOOR),
            ScoreStats::Joint { current, baseline } => current - baseline,
            ScoreStats::Confidence { posterior } => posterior.iter().copied().fold(0.0, f64::max),
        }
    }
}

fn posterior(q: &Marginals, i: usize) -> Result<&[f64], ProposerError> {
    q.get(i).ok_or(ProposerError::Uncovered(i))
}

/// Σ_{i,j: X_ij = t} q_i(l) A(X_i, j) per label, for every universe token.
/// Indexed like `universe.tokens()`.
fn attention_mass<P: Predictor>(
    corpus: &Corpus,
    universe: &FeatureUniverse,
    q: &Marginals,
    psi: &P,
    only: Option<TokenId>,
) -> Result<Vec<Vec<f64>>, ProposerError> {
    let n_labels = q.n_labels();
    let index: std::collections::HashMap<TokenId, usize> = match only {
        Some(t) => [(t, 0)].into(),
        None => universe
            .tokens()
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, k))
            .collect(),
    };
    let ids: Vec<usize> = match only {
        Some(t) => corpus.postings(t).iter().map(|&i| i as usize).collect(),
        None => (0..corpus.len()).collect(),
    };
    let rows = index.len();
    let per_instance: Vec<Vec<(usize, f64)>> = ids
        .par_iter()
        .map(|&i| {
            let x = corpus.instance(i);
            let a = psi.attention(x);
            x.tokens
                .iter()
                .zip(a)
                .filter_map(|(&t, w)| index.get(&t).map(|&k| (k, w)))
                .collect()
        })
        .collect();
    let mut mass = vec![vec![0.0; n_labels]; rows];
    for (&i, hits) in ids.iter().zip(&per_instance) {
        let qi = posterior(q, i)?;
        for &(k, w) in hits {
            for l in 0..n_labels {
                mass[k][l] += qi[l] * w;
            }
        }
    }
    Ok(mass)
}

fn attention_report(t: TokenId, l: LabelId, count: u32, mass: &[f64]) -> ScoreReport {
    let per_label: Vec<f64> = mass.iter().map(|m| m / count as f64).collect();
    let mut r = ScoreReport {
        candidate: EvidenceKind::TokenLabel { token: t, label: l },
        score: 0.0,
        stats: ScoreStats::Attention { count, per_label },
    };
    r.score = r.recompute();
    r
}

/// S_token(t, l) = Attn(t, l) − Σ_{l'≠l} Attn(t, l') with
/// Attn(t, l) = (1/C_t) Σ_{i,j: X_ij = t} q_i(l) A(X_i, j). C_t counts every
/// occurrence, including those past the truncation length, which carry no
/// attention.
pub fn attn_score<P: Predictor>(
    t: TokenId,
    l: LabelId,
    q: &Marginals,
    psi: &P,
    corpus: &Corpus,
    universe: &FeatureUniverse,
) -> Result<ScoreReport, ProposerError> {
    let count = universe.count(t).ok_or(ProposerError::Ineligible(t))?;
    if l >= q.n_labels() {
        return Err(ProposerError::BadLabel(l));
    }
    let mass = attention_mass(corpus, universe, q, psi, Some(t))?;
    Ok(attention_report(t, l, count, &mass[0]))
}

fn predicate_instances(b: Predicate, corpus: &Corpus) -> Vec<usize> {
    b.matches(corpus)
}

fn entropy_report(
    b: Predicate,
    ids: &[usize],
    q: &Marginals,
) -> Result<ScoreReport, ProposerError> {
    if ids.is_empty() {
        return Err(ProposerError::EmptyPredicate);
    }
    let mut mean = vec![0.0; q.n_labels()];
    for &i in ids {
        for (m, p) in mean.iter_mut().zip(posterior(q, i)?) {
            *m += p;
        }
    }
    let count = ids.len();
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let h = entropy(&mean);
    let label = argmax(&mean);
    let mut r = ScoreReport {
        candidate: EvidenceKind::feature_label(b, label),
        score: 0.0,
        stats: ScoreStats::Entropy {
            count: count as u32,
            mean_posterior: mean,
            entropy: h,
        },
    };
    r.score = r.recompute();
    Ok(r)
}

/// S_entropy(b) = 1 / Ent(b), Ent(b) the entropy (nats) of the mean
/// posterior over instances where b holds, floored at 10⁻⁶. The candidate
/// label is the argmax of that mean.
pub fn entropy_score(
    b: Predicate,
    q: &Marginals,
    corpus: &Corpus,
    universe: &FeatureUniverse,
) -> Result<ScoreReport, ProposerError> {
    for t in b.tokens() {
        if !universe.contains(t) {
            return Err(ProposerError::Ineligible(t));
        }
    }
    entropy_report(b, &predicate_instances(b, corpus), q)
}

fn checked_cosine(a: &[f64], b: &[f64], i: usize, j: usize) -> Result<f64, ProposerError> {
    if a.iter().all(|x| *x == 0.0) {
        return Err(ProposerError::UndefinedSimilarity(i));
    }
    cosine(a, b).ok_or(ProposerError::UndefinedSimilarity(j))
}

/// Cosine similarity of the two document embeddings under `psi`.
pub fn sim<P: Predictor>(
    i: usize,
    j: usize,
    psi: &P,
    corpus: &Corpus,
) -> Result<f64, ProposerError> {
    if i == j {
        return Err(ProposerError::SelfPair(i));
    }
    let a = psi.embed(corpus.instance(i));
    let b = psi.embed(corpus.instance(j));
    checked_cosine(&a, &b, i, j)
}

/// S_joint(i, j) = Sim_Ψ(i, j) − Sim_baseline(i, j).
pub fn joint_score<P: Predictor>(
    i: usize,
    j: usize,
    psi: &P,
    baseline: &P,
    corpus: &Corpus,
) -> Result<ScoreReport, ProposerError> {
    let current = sim(i, j, psi, corpus)?;
    let base = sim(i, j, baseline, corpus)?;
    let mut r = ScoreReport {
        candidate: EvidenceKind::pair(i, j),
        score: 0.0,
        stats: ScoreStats::Joint {
            current,
            baseline: base,
        },
    };
    r.score = r.recompute();
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    /// Self-training proposal attached without review.
    AutoAdded,
    Pending,
    Accepted {
        label: LabelId,
    },
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Sst(Strategy),
    Fal,
}

/// One ledger entry. FAL entries cover every label of their predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    /// Logical timestamp: position in the proposal order.
    pub seq: u64,
    pub origin: Origin,
    pub candidates: Vec<EvidenceKind>,
    pub score: f64,
    pub decision: Decision,
}

/// Every evidence identity ever proposed, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalLedger {
    records: Vec<ProposalRecord>,
    seen: HashSet<EvidenceKind>,
    predicates: HashSet<Predicate>,
    instances: HashSet<usize>,
    fal_queries: usize,
}

impl ProposalLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[ProposalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, kind: &EvidenceKind) -> bool {
        self.seen.contains(kind)
    }

    /// True if some candidate over `b` has been proposed.
    pub fn has_predicate(&self, b: Predicate) -> bool {
        self.predicates.contains(&b)
    }

    /// True if some instance-label candidate for `i` has been proposed.
    pub fn has_instance(&self, i: usize) -> bool {
        self.instances.contains(&i)
    }

    /// Number of FAL queries issued (the budget counter).
    pub fn fal_queries(&self) -> usize {
        self.fal_queries
    }

    fn register(
        &mut self,
        origin: Origin,
        candidates: Vec<EvidenceKind>,
        score: f64,
        decision: Decision,
    ) -> u64 {
        let seq = self.records.len() as u64;
        for k in &candidates {
            debug_assert!(!self.seen.contains(k), "identity proposed twice");
            self.seen.insert(*k);
            if let Some(b) = k.predicate() {
                self.predicates.insert(b);
            }
            if let EvidenceKind::InstanceLabel { instance, .. } = k {
                self.instances.insert(*instance);
            }
        }
        if origin == Origin::Fal {
            self.fal_queries += 1;
        }
        self.records.push(ProposalRecord {
            seq,
            origin,
            candidates,
            score,
            decision,
        });
        seq
    }

    /// Records the human decision for a pending FAL query.
    pub fn decide(&mut self, seq: u64, decision: Decision) -> Result<(), ProposerError> {
        match self.records.get_mut(seq as usize) {
            Some(r) if r.decision == Decision::Pending => {
                r.decision = decision;
                Ok(())
            }
            _ => Err(ProposerError::UnknownQuery(seq)),
        }
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable record") + "\n")
            .collect()
    }

    /// Appends records `from..` to `path`.
    pub fn append_to(&self, path: &Path, from: usize) -> Result<(), ProposerError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ProposerError::Io(e.to_string()))?;
        for r in self.records.iter().skip(from) {
            let line = serde_json::to_string(r).expect("serializable record");
            writeln!(f, "{line}").map_err(|e| ProposerError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

/// A proposal ready to attach.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub spec: EvidenceSpec,
    pub report: ScoreReport,
}

/// Descending score, then ascending candidate identity.
fn rank(a: &ScoreReport, b: &ScoreReport) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.candidate.cmp(&b.candidate))
}

/// Candidate predicates over the universe: its tokens, and optionally every
/// pair of them that co-occurs somewhere.
fn universe_predicates(
    corpus: &Corpus,
    universe: &FeatureUniverse,
    conjunctions: bool,
) -> Vec<(Predicate, Vec<usize>)> {
    let mut tokens: Vec<TokenId> = universe.tokens().to_vec();
    tokens.sort_unstable();
    let mut out: Vec<(Predicate, Vec<usize>)> = tokens
        .iter()
        .map(|&t| {
            (
                Predicate::Token(t),
                predicate_instances(Predicate::Token(t), corpus),
            )
        })
        .collect();
    if conjunctions {
        let pairs: Vec<(Predicate, Vec<usize>)> = (0..tokens.len())
            .into_par_iter()
            .flat_map_iter(|a| {
                let tokens = &tokens;
                (a + 1..tokens.len()).filter_map(move |b| {
                    let p = Predicate::both(tokens[a], tokens[b]);
                    let ids = predicate_instances(p, corpus);
                    (!ids.is_empty()).then_some((p, ids))
                })
            })
            .collect();
        out.extend(pairs);
    }
    out.retain(|(_, ids)| !ids.is_empty());
    out
}

/// Entropy reports for every universe predicate not yet proposed or
/// present in the graph (any label).
fn open_predicate_reports(
    g: &FactorGraph,
    q: &Marginals,
    ledger: &ProposalLedger,
    universe: &FeatureUniverse,
    conjunctions: bool,
) -> Result<Vec<(Predicate, ScoreReport)>, ProposerError> {
    let corpus = g.corpus();
    let n_labels = g.n_labels();
    universe_predicates(corpus, universe, conjunctions)
        .into_iter()
        .filter(|(b, _)| {
            !ledger.has_predicate(*b)
                && (0..n_labels).all(|l| !g.contains(&EvidenceKind::feature_label(*b, l)))
        })
        .map(|(b, ids)| entropy_report(b, &ids, q).map(|r| (b, r)))
        .collect()
}

fn top_joint_pairs<P: Predictor>(
    g: &FactorGraph,
    psi: &P,
    baseline: &P,
    ledger: &ProposalLedger,
    k: usize,
) -> Vec<ScoreReport> {
    let corpus = g.corpus();
    let unit = |v: Vec<f64>| -> Option<Vec<f64>> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 0.0 && n.is_finite()).then(|| v.into_iter().map(|x| x / n).collect())
    };
    let cur: Vec<Option<Vec<f64>>> = psi.embed_all(corpus).into_iter().map(unit).collect();
    let base: Vec<Option<Vec<f64>>> = baseline.embed_all(corpus).into_iter().map(unit).collect();
    let dot = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x * y)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    };
    let n = corpus.len();
    let insert = |top: &mut Vec<ScoreReport>, r: ScoreReport| {
        if top.len() == k && rank(&r, top.last().expect("nonempty")) != Ordering::Less {
            return;
        }
        let pos = top.partition_point(|x| rank(x, &r) == Ordering::Less);
        top.insert(pos, r);
        top.truncate(k);
    };
    let partial: Vec<Vec<ScoreReport>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut top = Vec::with_capacity(k + 1);
            let (Some(ci), Some(bi)) = (&cur[i], &base[i]) else {
                return top;
            };
            for j in i + 1..n {
                let (Some(cj), Some(bj)) = (&cur[j], &base[j]) else {
                    continue;
                };
                let kind = EvidenceKind::pair(i, j);
                if ledger.contains(&kind) || g.contains(&kind) {
                    continue;
                }
                let (current, baseline) = (dot(ci, cj), dot(bi, bj));
                let r = ScoreReport {
                    candidate: kind,
                    score: current - baseline,
                    stats: ScoreStats::Joint { current, baseline },
                };
                insert(&mut top, r);
            }
            top
        })
        .collect();
    let mut top = Vec::with_capacity(k + 1);
    for r in partial.into_iter().flatten() {
        insert(&mut top, r);
    }
    top
}

/// Top-scoring unproposed candidates under the configured strategy,
/// registered in the ledger as auto-added. Returns an empty list once the
/// candidates are exhausted.
///
/// `baseline` is the frozen predictor snapshot used by the joint strategy.
pub fn prop_sst<P: Predictor>(
    g: &FactorGraph,
    psi: &P,
    baseline: &P,
    q: &Marginals,
    ledger: &mut ProposalLedger,
    universe: &FeatureUniverse,
    cfg: &ProposerConfig,
) -> Result<Vec<Proposal>, ProposerError> {
    let corpus = g.corpus();
    let n_labels = g.n_labels();
    let k = cfg.batch_size();
    let mut ranked: Vec<ScoreReport> = match cfg.strategy {
        Strategy::Attention => {
            let mass = attention_mass(corpus, universe, q, psi, None)?;
            let mut out = Vec::new();
            for (slot, &t) in universe.tokens().iter().enumerate() {
                let count = universe.count(t).expect("universe token");
                for l in 0..n_labels {
                    let kind = EvidenceKind::TokenLabel { token: t, label: l };
                    if !ledger.contains(&kind) && !g.contains(&kind) {
                        out.push(attention_report(t, l, count, &mass[slot]));
                    }
                }
            }
            out
        }
        Strategy::Entropy => open_predicate_reports(g, q, ledger, universe, cfg.conjunctions)?
            .into_iter()
            .map(|(_, r)| r)
            .collect(),
        Strategy::Joint => top_joint_pairs(g, psi, baseline, ledger, k),
        Strategy::InstanceConfidence => {
            let labeled: HashSet<usize> = g
                .evidences()
                .iter()
                .filter_map(|e| match e.kind {
                    EvidenceKind::InstanceLabel { instance, .. } => Some(instance),
                    _ => None,
                })
                .collect();
            let pred = psi.predict_all(corpus);
            (0..corpus.len())
                .filter(|i| !labeled.contains(i) && !ledger.has_instance(*i))
                .filter_map(|i| {
                    let p = pred.row(i).to_vec();
                    let label = argmax(&p);
                    let r = ScoreReport {
                        candidate: EvidenceKind::InstanceLabel { instance: i, label },
                        score: p[label],
                        stats: ScoreStats::Confidence { posterior: p },
                    };
                    (r.score >= cfg.instance_threshold).then_some(r)
                })
                .collect()
        }
    };
    ranked.sort_by(rank);
    ranked.truncate(k);
    let origin = Origin::Sst(cfg.strategy);
    Ok(ranked
        .into_iter()
        .map(|report| {
            ledger.register(
                origin,
                vec![report.candidate],
                report.score,
                Decision::AutoAdded,
            );
            Proposal {
                spec: EvidenceSpec::new(report.candidate, Source::Sst),
                report,
            }
        })
        .collect())
}

/// A feature query awaiting a human decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalQuery {
    /// Ledger sequence number, used as the query id.
    pub seq: u64,
    pub predicate: Predicate,
    /// f_{b*, l} for every label l.
    pub candidates: Vec<EvidenceKind>,
    pub report: ScoreReport,
}

impl FalQuery {
    pub fn entropy(&self) -> f64 {
        match &self.report.stats {
            ScoreStats::Entropy { entropy, .. } => *entropy,
            _ => unreachable!("FAL queries carry entropy statistics"),
        }
    }
}

/// The unproposed predicate with the highest Ent(b), offered with every
/// label. Registered in the ledger as pending; `None` once exhausted.
pub fn prop_fal(
    g: &FactorGraph,
    q: &Marginals,
    ledger: &mut ProposalLedger,
    universe: &FeatureUniverse,
    conjunctions: bool,
) -> Result<Option<FalQuery>, ProposerError> {
    let reports = open_predicate_reports(g, q, ledger, universe, conjunctions)?;
    let best = reports.into_iter().min_by(|(pa, a), (pb, b)| {
        let (ea, eb) = (entropy_of(a), entropy_of(b));
        eb.total_cmp(&ea).then_with(|| pa.cmp(pb))
    });
    let Some((predicate, report)) = best else {
        return Ok(None);
    };
    let candidates: Vec<EvidenceKind> = (0..g.n_labels())
        .map(|l| EvidenceKind::feature_label(predicate, l))
        .collect();
    let seq = ledger.register(
        Origin::Fal,
        candidates.clone(),
        entropy_of(&report),
        Decision::Pending,
    );
    Ok(Some(FalQuery {
        seq,
        predicate,
        candidates,
        report,
    }))
}

fn entropy_of(r: &ScoreReport) -> f64 {
    match &r.stats {
        ScoreStats::Entropy { entropy, .. } => *entropy,
        _ => f64::NAN,
    }
}

/// Fraction of instances whose argmax label differs between the two
/// marginals (ties to the lowest label on both sides).
pub fn delta_fraction(prev: &Marginals, cur: &Marginals) -> f64 {
    let n = prev.len().min(cur.len());
    if n == 0 {
        return 0.0;
    }
    let changed = (0..n)
        .filter(|&i| argmax(prev.probs.row(i)) != argmax(cur.probs.row(i)))
        .count();
    changed as f64 / n as f64
}

/// |Δ|/N < α over evidence-only marginals.
pub fn sst_converged(prev: &Marginals, cur: &Marginals, alpha: f64) -> bool {
    delta_fraction(prev, cur) < alpha
}

/// The top `n` candidates of each unary scorer without touching a ledger,
/// for inspection.
pub fn score_candidates<P: Predictor>(
    g: &FactorGraph,
    psi: &P,
    q: &Marginals,
    universe: &FeatureUniverse,
    strategy: Strategy,
    n: usize,
) -> Result<Vec<ScoreReport>, ProposerError> {
    let mut scratch = ProposalLedger::new();
    let cfg = ProposerConfig {
        strategy,
        batch: Some(n),
        ..Default::default()
    };
    prop_sst(g, psi, psi, q, &mut scratch, universe, &cfg)
        .map(|v| v.into_iter().map(|p| p.report).collect())
}
