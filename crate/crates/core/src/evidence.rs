//! Virtual evidences (weighted logical formulas over latent labels) and the
//! factor graph that grounds them against a corpus.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{Corpus, LabelId, TokenId};

/// Initial weight for every new evidence: the log-odds of 90%.
pub const DEFAULT_WEIGHT: f64 = 2.2;
pub const DEFAULT_PRIOR_STRENGTH: f64 = 5e-8;
/// Weight used for "hard" evidence such as gold or labeled-example factors.
pub const HARD_WEIGHT: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum EvidenceError {
    #[error("duplicate evidence; already present as {existing}")]
    Duplicate { existing: EvidenceId },
    #[error("label {label} out of range ({n_labels} labels)")]
    BadLabel { label: LabelId, n_labels: usize },
    #[error("instance {instance} out of range ({n_instances} instances)")]
    BadInstance { instance: usize, n_instances: usize },
    #[error("pair-agreement factor needs two distinct instances, got {0} twice")]
    SelfPair(usize),
    #[error("token id {0} is not in the vocabulary")]
    BadToken(TokenId),
    #[error("weight must be finite, got {0}")]
    BadWeight(f64),
    #[error("prior strength must be finite and nonnegative, got {0}")]
    BadPrior(f64),
    #[error("assignment does not cover instance {0} touched by the evidence")]
    Uncovered(usize),
    #[error("unknown evidence {0}")]
    Unknown(EvidenceId),
    #[error("evidence file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceId(pub usize);

impl fmt::Display for EvidenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Input-side binary feature b(X_i): a token presence or a conjunction of
/// two token presences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Predicate {
    Token(TokenId),
    /// Invariant: first < second.
    Both(TokenId, TokenId),
}

impl Predicate {
    pub fn both(a: TokenId, b: TokenId) -> Predicate {
        if a == b {
            Predicate::Token(a)
        } else {
            Predicate::Both(a.min(b), a.max(b))
        }
    }

    pub fn holds(&self, tokens: &[TokenId]) -> bool {
        match *self {
            Predicate::Token(t) => tokens.contains(&t),
            Predicate::Both(a, b) => tokens.contains(&a) && tokens.contains(&b),
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        match *self {
            Predicate::Token(t) => vec![t],
            Predicate::Both(a, b) => vec![a, b],
        }
    }

    /// Sorted ids of instances where the predicate holds.
    pub fn matches(&self, corpus: &Corpus) -> Vec<usize> {
        match *self {
            Predicate::Token(t) => corpus.postings(t).iter().map(|&i| i as usize).collect(),
            Predicate::Both(a, b) => {
                let (pa, pb) = (corpus.postings(a), corpus.postings(b));
                let (mut i, mut j, mut out) = (0, 0, Vec::new());
                while i < pa.len() && j < pb.len() {
                    match pa[i].cmp(&pb[j]) {
                        std::cmp::Ordering::Less => i += 1,
                        std::cmp::Ordering::Greater => j += 1,
                        std::cmp::Ordering::Equal => {
                            out.push(pa[i] as usize);
                            i += 1;
                            j += 1;
                        }
                    }
                }
                out
            }
        }
    }

    /// Human-readable form, e.g. `good` or `not&bad`.
    pub fn describe(&self, corpus: &Corpus) -> String {
        let v = corpus.vocabulary();
        match *self {
            Predicate::Token(t) => v.token(t).to_string(),
            Predicate::Both(a, b) => format!("{}&{}", v.token(a), v.token(b)),
        }
    }
}

/// The formula of a virtual evidence together with its identifying
/// arguments. Two evidences with equal kinds are the same evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvidenceKind {
    /// I[t in X_i and Y_i = l]
    TokenLabel { token: TokenId, label: LabelId },
    /// I[b(X_i) and Y_i = l], with `b` a conjunction of two tokens.
    FeatureLabel {
        predicate: Predicate,
        label: LabelId,
    },
    /// I[Y_i = l]
    InstanceLabel { instance: usize, label: LabelId },
    /// I[Y_i = Y_j]; invariant: first < second.
    PairAgree { first: usize, second: usize },
}

impl EvidenceKind {
    /// Normalizes single-token predicates to [`EvidenceKind::TokenLabel`].
    pub fn feature_label(predicate: Predicate, label: LabelId) -> EvidenceKind {
        match predicate {
            Predicate::Token(token) => EvidenceKind::TokenLabel { token, label },
            p => EvidenceKind::FeatureLabel {
                predicate: p,
                label,
            },
        }
    }

    pub fn pair(i: usize, j: usize) -> EvidenceKind {
        EvidenceKind::PairAgree {
            first: i.min(j),
            second: i.max(j),
        }
    }

    pub fn is_pair(&self) -> bool {
        matches!(self, EvidenceKind::PairAgree { .. })
    }

    /// The label a unary formula asserts.
    pub fn label(&self) -> Option<LabelId> {
        match *self {
            EvidenceKind::TokenLabel { label, .. }
            | EvidenceKind::FeatureLabel { label, .. }
            | EvidenceKind::InstanceLabel { label, .. } => Some(label),
            EvidenceKind::PairAgree { .. } => None,
        }
    }

    /// The input predicate of token and feature formulas.
    pub fn predicate(&self) -> Option<Predicate> {
        match *self {
            EvidenceKind::TokenLabel { token, .. } => Some(Predicate::Token(token)),
            EvidenceKind::FeatureLabel { predicate, .. } => Some(predicate),
            _ => None,
        }
    }

    pub fn describe(&self, corpus: &Corpus) -> String {
        let label = |l: LabelId| {
            corpus
                .labels()
                .get(l)
                .cloned()
                .unwrap_or_else(|| l.to_string())
        };
        match *self {
            EvidenceKind::TokenLabel { token, label: l } => {
                format!("token({})->{}", corpus.vocabulary().token(token), label(l))
            }
            EvidenceKind::FeatureLabel {
                predicate,
                label: l,
            } => {
                format!("feature({})->{}", predicate.describe(corpus), label(l))
            }
            EvidenceKind::InstanceLabel { instance, label: l } => {
                format!("instance({instance})->{}", label(l))
            }
            EvidenceKind::PairAgree { first, second } => format!("agree({first},{second})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Seed,
    Sst,
    Fal,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Seed => "seed",
            Source::Sst => "sst",
            Source::Fal => "fal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Rejected,
}

/// An evidence before it is attached to a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSpec {
    pub kind: EvidenceKind,
    pub weight: f64,
    pub prior_strength: f64,
    pub learnable: bool,
    pub source: Source,
}

impl EvidenceSpec {
    pub fn new(kind: EvidenceKind, source: Source) -> Self {
        EvidenceSpec {
            kind,
            weight: DEFAULT_WEIGHT,
            prior_strength: DEFAULT_PRIOR_STRENGTH,
            learnable: true,
            source,
        }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    pub fn fixed(mut self) -> Self {
        self.learnable = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualEvidence {
    pub id: EvidenceId,
    pub kind: EvidenceKind,
    /// Log-potential w_v.
    pub weight: f64,
    /// L2 coefficient on the weight (the prior α_v).
    pub prior_strength: f64,
    pub learnable: bool,
    pub source: Source,
    pub status: Status,
}

impl VirtualEvidence {
    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }
}

/// Truth value of `e`'s formula on one grounding.
///
/// `assignment` lists `(instance, label)` pairs. Unary formulas read the
/// first entry (token and feature formulas apply to whichever instance is
/// given; instance formulas require their own instance); pair formulas need
/// both of their instances.
pub fn eval_formula(
    e: &VirtualEvidence,
    assignment: &[(usize, LabelId)],
    corpus: &Corpus,
) -> Result<bool, EvidenceError> {
    let lookup = |i: usize| {
        assignment
            .iter()
            .find(|(inst, _)| *inst == i)
            .map(|(_, l)| *l)
            .ok_or(EvidenceError::Uncovered(i))
    };
    match e.kind {
        EvidenceKind::TokenLabel { token, label } => {
            let &(i, y) = assignment
                .first()
                .ok_or(EvidenceError::Uncovered(usize::MAX))?;
            Ok(y == label && corpus.instance(i).tokens.contains(&token))
        }
        EvidenceKind::FeatureLabel { predicate, label } => {
            let &(i, y) = assignment
                .first()
                .ok_or(EvidenceError::Uncovered(usize::MAX))?;
            Ok(y == label && predicate.holds(&corpus.instance(i).tokens))
        }
        EvidenceKind::InstanceLabel { instance, label } => Ok(lookup(instance)? == label),
        EvidenceKind::PairAgree { first, second } => Ok(lookup(first)? == lookup(second)?),
    }
}

/// exp(w · f) for one grounding.
pub fn potential(
    e: &VirtualEvidence,
    assignment: &[(usize, LabelId)],
    corpus: &Corpus,
) -> Result<f64, EvidenceError> {
    let f = eval_formula(e, assignment, corpus)?;
    Ok(if f { e.weight.exp() } else { 1.0 })
}

/// Instances plus attached evidences: the structure of P(K, Y | X).
#[derive(Debug, Clone)]
pub struct FactorGraph {
    corpus: Arc<Corpus>,
    evidences: Vec<VirtualEvidence>,
    index: HashMap<EvidenceKind, EvidenceId>,
    groundings: Vec<Vec<usize>>,
    adjacency: Vec<Vec<EvidenceId>>,
}

impl FactorGraph {
    pub fn new(corpus: Arc<Corpus>) -> Self {
        let n = corpus.len();
        FactorGraph {
            corpus,
            evidences: Vec::new(),
            index: HashMap::new(),
            groundings: Vec::new(),
            adjacency: vec![Vec::new(); n],
        }
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn n_instances(&self) -> usize {
        self.adjacency.len()
    }

    pub fn n_labels(&self) -> usize {
        self.corpus.n_labels()
    }

    fn validate(&self, spec: &EvidenceSpec) -> Result<(), EvidenceError> {
        let n = self.n_instances();
        let n_labels = self.n_labels();
        if !spec.weight.is_finite() {
            return Err(EvidenceError::BadWeight(spec.weight));
        }
        if !(spec.prior_strength.is_finite() && spec.prior_strength >= 0.0) {
            return Err(EvidenceError::BadPrior(spec.prior_strength));
        }
        let check_label = |label: LabelId| {
            if label >= n_labels {
                Err(EvidenceError::BadLabel { label, n_labels })
            } else {
                Ok(())
            }
        };
        let check_instance = |instance: usize| {
            if instance >= n {
                Err(EvidenceError::BadInstance {
                    instance,
                    n_instances: n,
                })
            } else {
                Ok(())
            }
        };
        let check_token = |t: TokenId| {
            if (t as usize) >= self.corpus.vocabulary().len() {
                Err(EvidenceError::BadToken(t))
            } else {
                Ok(())
            }
        };
        match spec.kind {
            EvidenceKind::TokenLabel { token, label } => {
                check_token(token)?;
                check_label(label)
            }
            EvidenceKind::FeatureLabel { predicate, label } => {
                for t in predicate.tokens() {
                    check_token(t)?;
                }
                check_label(label)
            }
            EvidenceKind::InstanceLabel { instance, label } => {
                check_instance(instance)?;
                check_label(label)
            }
            EvidenceKind::PairAgree { first, second } => {
                check_instance(first)?;
                check_instance(second)?;
                if first == second {
                    Err(EvidenceError::SelfPair(first))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn ground(&self, kind: &EvidenceKind) -> Vec<usize> {
        match *kind {
            EvidenceKind::TokenLabel { token, .. } => Predicate::Token(token).matches(&self.corpus),
            EvidenceKind::FeatureLabel { predicate, .. } => predicate.matches(&self.corpus),
            EvidenceKind::InstanceLabel { instance, .. } => vec![instance],
            EvidenceKind::PairAgree { first, second } => vec![first, second],
        }
    }

    fn insert(&mut self, spec: EvidenceSpec, status: Status) -> Result<EvidenceId, EvidenceError> {
        if let Some(&existing) = self.index.get(&spec.kind) {
            return Err(EvidenceError::Duplicate { existing });
        }
        self.validate(&spec)?;
        let id = EvidenceId(self.evidences.len());
        let grounding = if status == Status::Active {
            self.ground(&spec.kind)
        } else {
            Vec::new()
        };
        for &i in &grounding {
            self.adjacency[i].push(id);
        }
        self.index.insert(spec.kind, id);
        self.groundings.push(grounding);
        self.evidences.push(VirtualEvidence {
            id,
            kind: spec.kind,
            weight: spec.weight,
            prior_strength: spec.prior_strength,
            learnable: spec.learnable,
            source: spec.source,
            status,
        });
        Ok(id)
    }

    /// Adds an active evidence, grounding token and feature formulas on
    /// every instance where the predicate holds (one shared weight).
    pub fn attach(&mut self, spec: EvidenceSpec) -> Result<EvidenceId, EvidenceError> {
        self.insert(spec, Status::Active)
    }

    /// Records a rejected evidence so it is never proposed again. It has no
    /// groundings and no effect on inference.
    pub fn reject(&mut self, spec: EvidenceSpec) -> Result<EvidenceId, EvidenceError> {
        self.insert(spec, Status::Rejected)
    }

    pub fn contains(&self, kind: &EvidenceKind) -> bool {
        self.index.contains_key(kind)
    }

    pub fn lookup(&self, kind: &EvidenceKind) -> Option<&VirtualEvidence> {
        self.index.get(kind).map(|id| &self.evidences[id.0])
    }

    pub fn get(&self, id: EvidenceId) -> Option<&VirtualEvidence> {
        self.evidences.get(id.0)
    }

    /// All evidences, including rejected ones.
    pub fn evidences(&self) -> &[VirtualEvidence] {
        &self.evidences
    }

    pub fn active(&self) -> impl Iterator<Item = &VirtualEvidence> {
        self.evidences.iter().filter(|e| e.is_active())
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    /// Instances touched by evidence `id` (for pairs, the two endpoints).
    pub fn grounding(&self, id: EvidenceId) -> &[usize] {
        &self.groundings[id.0]
    }

    /// Evidences touching instance `i`.
    pub fn adjacency(&self, i: usize) -> &[EvidenceId] {
        &self.adjacency[i]
    }

    pub fn set_weight(&mut self, id: EvidenceId, w: f64) -> Result<(), EvidenceError> {
        if !w.is_finite() {
            return Err(EvidenceError::BadWeight(w));
        }
        let e = self
            .evidences
            .get_mut(id.0)
            .ok_or(EvidenceError::Unknown(id))?;
        e.weight = w;
        Ok(())
    }

    pub fn has_pair_factors(&self) -> bool {
        self.active().any(|e| e.kind.is_pair())
    }

    /// Serializes every evidence (active and rejected) as JSON lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.evidences {
            out.push_str(&evidence_record(e, &self.corpus).to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), EvidenceError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| EvidenceError::Io(e.to_string()))
    }
}

fn evidence_record(e: &VirtualEvidence, corpus: &Corpus) -> Value {
    let label_name = |l: LabelId| corpus.labels()[l].clone();
    let vocab = corpus.vocabulary();
    let (kind, arguments, label) = match e.kind {
        EvidenceKind::TokenLabel { token, label } => (
            "token_label",
            json!([vocab.token(token)]),
            Value::String(label_name(label)),
        ),
        EvidenceKind::FeatureLabel { predicate, label } => (
            "feature_label",
            Value::Array(
                predicate
                    .tokens()
                    .into_iter()
                    .map(|t| Value::String(vocab.token(t).into()))
                    .collect(),
            ),
            Value::String(label_name(label)),
        ),
        EvidenceKind::InstanceLabel { instance, label } => (
            "instance_label",
            json!([instance]),
            Value::String(label_name(label)),
        ),
        EvidenceKind::PairAgree { first, second } => {
            ("pair_agree", json!([first, second]), Value::Null)
        }
    };
    json!({
        "kind": kind,
        "arguments": arguments,
        "label": label,
        "weight": e.weight,
        "prior_strength": e.prior_strength,
        "learnable": e.learnable,
        "source": e.source,
        "status": e.status,
    })
}

#[derive(Deserialize)]
struct EvidenceRecord {
    kind: String,
    arguments: Vec<Value>,
    label: Option<String>,
    weight: Option<f64>,
    prior_strength: Option<f64>,
    learnable: Option<bool>,
    source: Option<Source>,
    status: Option<Status>,
}

/// Parses an evidence file against `corpus`. Missing weight, prior,
/// learnable and source fields take the defaults (2.2, 5e-8, true, seed).
pub fn parse_evidence_jsonl(
    content: &str,
    corpus: &Corpus,
) -> Result<Vec<(EvidenceSpec, Status)>, EvidenceError> {
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvidenceError::Parse {
            line: line_no,
            message,
        };
        let rec: EvidenceRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let label = || -> Result<LabelId, EvidenceError> {
            let name = rec
                .label
                .as_deref()
                .ok_or_else(|| err("missing label".into()))?;
            corpus.label_id(name).ok_or_else(|| {
                err(format!(
                    "unknown label {name:?}; allowed labels: {:?}",
                    corpus.labels()
                ))
            })
        };
        let token = |v: &Value| -> Result<TokenId, EvidenceError> {
            let s = v
                .as_str()
                .ok_or_else(|| err("token arguments must be strings".into()))?;
            corpus
                .vocabulary()
                .id(&s.to_lowercase())
                .ok_or_else(|| err(format!("token {s:?} not in vocabulary")))
        };
        let index = |v: &Value| -> Result<usize, EvidenceError> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| err("instance arguments must be nonnegative integers".into()))
        };
        let args = &rec.arguments;
        let kind = match (rec.kind.as_str(), args.len()) {
            ("token_label", 1) => EvidenceKind::TokenLabel {
                token: token(&args[0])?,
                label: label()?,
            },
            ("feature_label", 1) => {
                EvidenceKind::feature_label(Predicate::Token(token(&args[0])?), label()?)
            }
            ("feature_label", 2) => EvidenceKind::feature_label(
                Predicate::both(token(&args[0])?, token(&args[1])?),
                label()?,
            ),
            ("instance_label", 1) => EvidenceKind::InstanceLabel {
                instance: index(&args[0])?,
                label: label()?,
            },
            ("pair_agree", 2) => EvidenceKind::pair(index(&args[0])?, index(&args[1])?),
            (k, n) => return Err(err(format!("unsupported kind {k:?} with {n} arguments"))),
        };
        let spec = EvidenceSpec {
            kind,
            weight: rec.weight.unwrap_or(DEFAULT_WEIGHT),
            prior_strength: rec.prior_strength.unwrap_or(DEFAULT_PRIOR_STRENGTH),
            learnable: rec.learnable.unwrap_or(true),
            source: rec.source.unwrap_or(Source::Seed),
        };
        out.push((spec, rec.status.unwrap_or(Status::Active)));
    }
    Ok(out)
}

/// Builds a graph from an evidence file's records.
pub fn graph_from_records(
    corpus: Arc<Corpus>,
    records: Vec<(EvidenceSpec, Status)>,
) -> Result<FactorGraph, EvidenceError> {
    let mut g = FactorGraph::new(corpus);
    for (spec, status) in records {
        match status {
            Status::Active => g.attach(spec)?,
            Status::Rejected => g.reject(spec)?,
        };
    }
    Ok(g)
}

pub fn load_evidence_file(
    path: &Path,
    corpus: &Corpus,
) -> Result<Vec<(EvidenceSpec, Status)>, EvidenceError> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| EvidenceError::Io(format!("{}: {e}", path.display())))?;
    parse_evidence_jsonl(&content, corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LoadOptions, RawRecord};

    fn corpus() -> Arc<Corpus> {
        let recs: Vec<RawRecord> = ["a good film", "a bad film", "good good fun"]
            .iter()
            .map(|t| RawRecord {
                text: t.to_string(),
                label: Some("pos".into()),
            })
            .collect();
        let opts = LoadOptions {
            labels: Some(vec!["pos".into(), "neg".into()]),
            ..Default::default()
        };
        Arc::new(Corpus::from_records(&recs, &opts).unwrap())
    }

    fn tok(c: &Corpus, s: &str) -> TokenId {
        c.vocabulary().id(s).unwrap()
    }

    #[test]
    fn token_formula_and_potential() {
        let c = corpus();
        let mut g = FactorGraph::new(c.clone());
        let id = g
            .attach(EvidenceSpec::new(
                EvidenceKind::TokenLabel {
                    token: tok(&c, "good"),
                    label: 0,
                },
                Source::Seed,
            ))
            .unwrap();
        let e = g.get(id).unwrap().clone();
        assert!(eval_formula(&e, &[(0, 0)], &c).unwrap());
        assert!(!eval_formula(&e, &[(0, 1)], &c).unwrap());
        assert!(!eval_formula(&e, &[(1, 0)], &c).unwrap());
        assert!((potential(&e, &[(0, 0)], &c).unwrap() - 9.025_013_499_434_122).abs() < 1e-12);
        assert_eq!(potential(&e, &[(0, 1)], &c).unwrap(), 1.0);
        let mut inert = e.clone();
        inert.weight = 0.0;
        assert_eq!(potential(&inert, &[(0, 0)], &c).unwrap(), 1.0);
        assert_eq!(g.grounding(id), &[0, 2]);
        assert_eq!(g.adjacency(0), &[id]);
        assert!(g.adjacency(1).is_empty());
        assert_eq!(g.adjacency(2), &[id]);
    }

    #[test]
    fn pair_formula() {
        let c = corpus();
        let mut g = FactorGraph::new(c.clone());
        let id = g
            .attach(EvidenceSpec::new(EvidenceKind::pair(2, 1), Source::Sst))
            .unwrap();
        let e = g.get(id).unwrap();
        assert!(eval_formula(e, &[(1, 1), (2, 1)], &c).unwrap());
        assert!(!eval_formula(e, &[(1, 0), (2, 1)], &c).unwrap());
        assert_eq!(
            eval_formula(e, &[(1, 0)], &c),
            Err(EvidenceError::Uncovered(2))
        );
        assert_eq!(g.adjacency(1), &[id]);
        assert_eq!(g.adjacency(2), &[id]);
    }

    #[test]
    fn duplicates_and_validation() {
        let c = corpus();
        let mut g = FactorGraph::new(c.clone());
        let kind = EvidenceKind::TokenLabel {
            token: tok(&c, "bad"),
            label: 1,
        };
        let id = g.attach(EvidenceSpec::new(kind, Source::Seed)).unwrap();
        assert_eq!(
            g.attach(EvidenceSpec::new(kind, Source::Sst)),
            Err(EvidenceError::Duplicate { existing: id })
        );
        assert_eq!(
            g.attach(EvidenceSpec::new(EvidenceKind::pair(1, 1), Source::Sst)),
            Err(EvidenceError::SelfPair(1))
        );
        assert!(matches!(
            g.attach(EvidenceSpec::new(
                EvidenceKind::InstanceLabel {
                    instance: 9,
                    label: 0
                },
                Source::Seed
            )),
            Err(EvidenceError::BadInstance { .. })
        ));
        assert!(matches!(
            g.attach(EvidenceSpec::new(
                EvidenceKind::InstanceLabel {
                    instance: 0,
                    label: 5
                },
                Source::Seed
            )),
            Err(EvidenceError::BadLabel { .. })
        ));
        assert!(matches!(
            g.attach(EvidenceSpec::new(kind, Source::Seed).with_weight(f64::NAN)),
            Err(EvidenceError::Duplicate { .. })
        ));
        let rejected = EvidenceKind::TokenLabel {
            token: tok(&c, "fun"),
            label: 0,
        };
        let rid = g.reject(EvidenceSpec::new(rejected, Source::Fal)).unwrap();
        assert!(g.grounding(rid).is_empty());
        assert_eq!(g.active_count(), 1);
        assert!(g.attach(EvidenceSpec::new(rejected, Source::Sst)).is_err());
    }

    #[test]
    fn single_token_feature_normalizes() {
        let k = EvidenceKind::feature_label(Predicate::Token(3), 1);
        assert_eq!(k, EvidenceKind::TokenLabel { token: 3, label: 1 });
        assert_eq!(Predicate::both(5, 2), Predicate::Both(2, 5));
    }

    #[test]
    fn conjunction_grounding() {
        let c = corpus();
        let p = Predicate::both(tok(&c, "a"), tok(&c, "film"));
        assert_eq!(p.matches(&c), vec![0, 1]);
        let p = Predicate::both(tok(&c, "good"), tok(&c, "film"));
        assert_eq!(p.matches(&c), vec![0]);
    }

    #[test]
    fn evidence_file_round_trip() {
        let c = corpus();
        let mut g = FactorGraph::new(c.clone());
        g.attach(EvidenceSpec::new(
            EvidenceKind::TokenLabel {
                token: tok(&c, "good"),
                label: 0,
            },
            Source::Seed,
        ))
        .unwrap();
        g.attach(EvidenceSpec::new(EvidenceKind::pair(0, 2), Source::Sst).with_weight(0.7))
            .unwrap();
        g.attach(
            EvidenceSpec::new(
                EvidenceKind::feature_label(Predicate::both(tok(&c, "a"), tok(&c, "bad")), 1),
                Source::Sst,
            )
            .fixed(),
        )
        .unwrap();
        g.reject(EvidenceSpec::new(
            EvidenceKind::InstanceLabel {
                instance: 1,
                label: 1,
            },
            Source::Fal,
        ))
        .unwrap();
        let text = g.to_jsonl();
        let back = graph_from_records(c.clone(), parse_evidence_jsonl(&text, &c).unwrap()).unwrap();
        assert_eq!(back.evidences(), g.evidences());
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn evidence_file_errors() {
        let c = corpus();
        let e = parse_evidence_jsonl(
            r#"{"kind":"token_label","arguments":["zzz"],"label":"pos"}"#,
            &c,
        );
        assert!(matches!(e, Err(EvidenceError::Parse { line: 1, .. })));
        let e = parse_evidence_jsonl(
            r#"{"kind":"token_label","arguments":["good"],"label":"meh"}"#,
            &c,
        );
        assert!(matches!(e, Err(EvidenceError::Parse { .. })));
        let ok = parse_evidence_jsonl(
            r#"{"kind":"token_label","arguments":["Good"],"label":"pos"}"#,
            &c,
        )
        .unwrap();
        assert_eq!(ok[0].0.weight, DEFAULT_WEIGHT);
        assert!(ok[0].0.learnable);
    }
}
