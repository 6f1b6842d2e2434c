//! Text datasets: tokenization, vocabulary, per-token statistics and the
//! candidate feature universe used by the proposers.
//!
//! Gold labels are stored on every [`Instance`] but can only be read through
//! [`Corpus::gold_label`], which requires an [`OracleAccess`] capability and
//! counts every read. Learning code never holds the capability, and tests
//! assert the counter does not move during learning.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;
pub type LabelId = usize;

/// Reserved id for tokens unseen when the vocabulary was frozen.
pub const UNK: TokenId = 0;
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_TOKENS: usize = 512;
pub const DEFAULT_TOP_FRACTION: f64 = 0.025;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: record has no text")]
    MissingText { line: usize },
    #[error("line {line}: unknown label {label:?}; allowed labels: {allowed:?}")]
    UnknownLabel {
        line: usize,
        label: String,
        allowed: Vec<String>,
    },
    #[error("line {line}: text is empty after normalization")]
    EmptyInstance { line: usize },
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("corpus has no instances")]
    NoInstances,
    #[error("invalid top fraction {0}; expected a ratio in (0, 1]")]
    BadFraction(f64),
}

/// Capability required to read gold labels. Only oracle simulation,
/// evaluation and tests construct one.
#[derive(Debug)]
pub struct OracleAccess(());

impl OracleAccess {
    /// Grants gold-label access. Every call site is an audit point.
    pub fn grant() -> Self {
        OracleAccess(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Jsonl,
    Tsv,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(format!(
                "unknown corpus format {other:?} (expected jsonl or tsv)"
            )),
        }
    }
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Format::Tsv,
            _ => Format::Jsonl,
        }
    }
}

/// Lowercases and splits `text` into word and punctuation tokens without
/// truncation.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() && !ch.is_control() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Lowercased, punctuation-split tokens truncated to the first `max_tokens`.
pub fn tokenize(text: &str, max_tokens: usize) -> Result<Vec<String>, CorpusError> {
    let mut tokens = split_tokens(text);
    if tokens.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    tokens.truncate(max_tokens.max(1));
    Ok(tokens)
}

/// Token string to id mapping. Id 0 is always [`UNK_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.intern(UNK_TOKEN);
        v
    }
}

impl Vocabulary {
    fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    /// Number of ids, including the reserved unknown token.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds a vocabulary from its token list (as written by
    /// [`Vocabulary::tokens`]).
    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let mut v = Vocabulary::default();
        for t in tokens.iter().skip(1) {
            v.intern(t);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: usize,
    /// At most `max_tokens` ids.
    pub tokens: Vec<TokenId>,
    /// Occurrences past the truncation point. They count toward corpus
    /// statistics but the predictor never sees them.
    pub overflow: Vec<TokenId>,
    pub raw_text: String,
    gold: Option<LabelId>,
}

impl Instance {
    pub fn contains(&self, token: TokenId) -> bool {
        self.tokens.contains(&token)
    }
}

/// One raw dataset record before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub text: String,
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: Format,
    pub max_tokens: usize,
    /// Fixed label set. When absent, the sorted set of labels in the file.
    pub labels: Option<Vec<String>>,
    /// Frozen vocabulary (for held-out data); unseen tokens map to [`UNK`].
    pub vocabulary: Option<Arc<Vocabulary>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            format: Format::Jsonl,
            max_tokens: DEFAULT_MAX_TOKENS,
            labels: None,
            vocabulary: None,
        }
    }
}

impl LoadOptions {
    /// Defaults with the format inferred from the file extension.
    pub fn for_path(path: &Path) -> Self {
        LoadOptions {
            format: Format::from_path(path),
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct Corpus {
    instances: Vec<Instance>,
    labels: Vec<String>,
    vocab: Arc<Vocabulary>,
    doc_freq: Vec<u32>,
    occurrences: Vec<u32>,
    postings: Vec<Vec<u32>>,
    max_tokens: usize,
    gold_reads: AtomicUsize,
}

#[derive(Deserialize)]
struct JsonRecord {
    #[allow(dead_code)]
    id: Option<serde_json::Value>,
    text: Option<String>,
    label: Option<String>,
}

/// Reads and parses a dataset file into raw records.
pub fn read_records(path: &Path, format: Format) -> Result<Vec<RawRecord>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_records(&content, format)
}

pub fn parse_records(content: &str, format: Format) -> Result<Vec<RawRecord>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = match format {
            Format::Jsonl => {
                let rec: JsonRecord =
                    serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                let text = rec.text.ok_or(CorpusError::MissingText { line: line_no })?;
                RawRecord {
                    text,
                    label: rec.label,
                }
            }
            Format::Tsv => {
                let (label, text) =
                    line.split_once('\t')
                        .ok_or_else(|| CorpusError::Malformed {
                            line: line_no,
                            message: "expected label<TAB>text".into(),
                        })?;
                let label = label.trim();
                RawRecord {
                    text: text.to_string(),
                    label: (!label.is_empty()).then(|| label.to_string()),
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// Loads a dataset file. Instance order equals file order.
pub fn load_corpus(path: &Path, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    let records = read_records(path, opts.format)?;
    Corpus::from_records(&records, opts)
}

impl Corpus {
    pub fn from_records(records: &[RawRecord], opts: &LoadOptions) -> Result<Corpus, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::NoInstances);
        }
        let labels = match &opts.labels {
            Some(l) => l.clone(),
            None => records
                .iter()
                .filter_map(|r| r.label.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let label_index: HashMap<&str, LabelId> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();

        let mut vocab = opts.vocabulary.as_deref().cloned().unwrap_or_default();
        let frozen = opts.vocabulary.is_some();
        let max_tokens = opts.max_tokens.max(1);
        let mut instances = Vec::with_capacity(records.len());
        for (idx, rec) in records.iter().enumerate() {
            let line = idx + 1;
            let words = split_tokens(&rec.text);
            if words.is_empty() {
                return Err(CorpusError::EmptyInstance { line });
            }
            let gold =
                match &rec.label {
                    None => None,
                    Some(l) => Some(*label_index.get(l.as_str()).ok_or_else(|| {
                        CorpusError::UnknownLabel {
                            line,
                            label: l.clone(),
                            allowed: labels.clone(),
                        }
                    })?),
                };
            let mut ids: Vec<TokenId> = words
                .iter()
                .map(|w| {
                    if frozen {
                        vocab.id(w).unwrap_or(UNK)
                    } else {
                        vocab.intern(w)
                    }
                })
                .collect();
            let overflow = if ids.len() > max_tokens {
                ids.split_off(max_tokens)
            } else {
                Vec::new()
            };
            instances.push(Instance {
                id: instances.len(),
                tokens: ids,
                overflow,
                raw_text: rec.text.clone(),
                gold,
            });
        }
        Ok(Corpus::assemble(
            instances,
            labels,
            Arc::new(vocab),
            max_tokens,
        ))
    }

    fn assemble(
        instances: Vec<Instance>,
        labels: Vec<String>,
        vocab: Arc<Vocabulary>,
        max_tokens: usize,
    ) -> Corpus {
        let v = vocab.len();
        let mut doc_freq = vec![0u32; v];
        let mut occurrences = vec![0u32; v];
        let mut postings = vec![Vec::new(); v];
        for inst in &instances {
            for &t in inst.tokens.iter().chain(&inst.overflow) {
                occurrences[t as usize] += 1;
            }
            let uniq: BTreeSet<TokenId> = inst.tokens.iter().copied().collect();
            for t in uniq {
                doc_freq[t as usize] += 1;
                postings[t as usize].push(inst.id as u32);
            }
        }
        Corpus {
            instances,
            labels,
            vocab,
            doc_freq,
            occurrences,
            postings,
            max_tokens,
            gold_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, id: usize) -> &Instance {
        &self.instances[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Option<LabelId> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    /// Number of instances whose (truncated) tokens contain `t`.
    pub fn doc_freq(&self, t: TokenId) -> u32 {
        self.doc_freq.get(t as usize).copied().unwrap_or(0)
    }

    /// Raw occurrence count of `t`, including occurrences past truncation.
    pub fn occurrences(&self, t: TokenId) -> u32 {
        self.occurrences.get(t as usize).copied().unwrap_or(0)
    }

    /// Sorted ids of instances containing `t`.
    pub fn postings(&self, t: TokenId) -> &[u32] {
        self.postings
            .get(t as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Number of distinct tokens that occur at least once.
    pub fn observed_vocab_size(&self) -> usize {
        self.doc_freq.iter().filter(|&&df| df > 0).count()
    }

    pub fn has_gold_labels(&self) -> bool {
        self.instances.iter().all(|i| i.gold.is_some())
    }

    pub fn gold_label(&self, id: usize, _access: &OracleAccess) -> Option<LabelId> {
        self.gold_reads.fetch_add(1, Ordering::Relaxed);
        self.instances[id].gold
    }

    pub fn gold_labels(&self, access: &OracleAccess) -> Vec<Option<LabelId>> {
        (0..self.len())
            .map(|i| self.gold_label(i, access))
            .collect()
    }

    /// Total number of gold-label reads since construction.
    pub fn gold_reads(&self) -> usize {
        self.gold_reads.load(Ordering::Relaxed)
    }

    /// Restricts the corpus to `ids` (in the given order), renumbering
    /// instances densely. Vocabulary is shared.
    pub fn subset(&self, ids: &[usize]) -> Corpus {
        let instances = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut inst = self.instances[old].clone();
                inst.id = new_id;
                inst
            })
            .collect();
        Corpus::assemble(
            instances,
            self.labels.clone(),
            self.vocab.clone(),
            self.max_tokens,
        )
    }

    /// Stable content hash over labels, vocabulary and instance tokens.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.labels {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        for t in self.vocab.tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for inst in &self.instances {
            for &t in inst.tokens.iter().chain(&inst.overflow) {
                h.update(t.to_le_bytes());
            }
            h.update([0xff; 4]);
        }
        hex::encode(h.finalize())
    }
}

/// Tokens eligible for proposal and query, with their corpus counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureUniverse {
    candidates: Vec<TokenId>,
    doc_freq: Vec<u32>,
    occurrences: Vec<u32>,
    member: HashMap<TokenId, usize>,
}

/// Keeps the top `ceil(top_fraction * |observed vocab|)` tokens by document
/// frequency (ties by lower id), skipping `stop_tokens`.
pub fn build_feature_universe(
    corpus: &Corpus,
    top_fraction: f64,
    stop_tokens: &[String],
) -> Result<FeatureUniverse, CorpusError> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(CorpusError::BadFraction(top_fraction));
    }
    let observed = corpus.observed_vocab_size();
    // Guard against 0.025 * 1000 = 25.000000000000004.
    let keep = ((top_fraction * observed as f64) - 1e-9).ceil().max(1.0) as usize;
    let stop: BTreeSet<TokenId> = stop_tokens
        .iter()
        .filter_map(|s| corpus.vocabulary().id(s))
        .collect();
    let mut ranked: Vec<TokenId> = (0..corpus.vocabulary().len() as TokenId)
        .filter(|&t| t != UNK && corpus.doc_freq(t) > 0 && !stop.contains(&t))
        .collect();
    ranked.sort_by(|&a, &b| corpus.doc_freq(b).cmp(&corpus.doc_freq(a)).then(a.cmp(&b)));
    ranked.truncate(keep);
    let doc_freq = ranked.iter().map(|&t| corpus.doc_freq(t)).collect();
    let occurrences = ranked.iter().map(|&t| corpus.occurrences(t)).collect();
    let member = ranked.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    Ok(FeatureUniverse {
        candidates: ranked,
        doc_freq,
        occurrences,
        member,
    })
}

impl FeatureUniverse {
    /// Candidates in rank order.
    pub fn tokens(&self) -> &[TokenId] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, t: TokenId) -> bool {
        self.member.contains_key(&t)
    }

    /// Occurrence count C_t, or `None` outside the universe.
    pub fn count(&self, t: TokenId) -> Option<u32> {
        self.member.get(&t).map(|&i| self.occurrences[i])
    }

    pub fn doc_freq(&self, t: TokenId) -> Option<u32> {
        self.member.get(&t).map(|&i| self.doc_freq[i])
    }
}
