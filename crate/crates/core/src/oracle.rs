//! Simulated human expert for feature queries.
//!
//! A multinomial logistic regression on binary bag-of-words features is fit
//! to the gold labels with an L1 penalty; the `k` tokens with the largest
//! positive weight for each class form that class's accepted set.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, LabelId, OracleAccess, TokenId, UNK};
use crate::dist::softmax_in_place;
use crate::evidence::Predicate;

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_L1: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("corpus has no gold labels for instance {0}")]
    MissingGold(usize),
    #[error("corpus is empty")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed oracle file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub top_k: usize,
    /// L1 coefficient on the mean log-loss.
    pub l1: f64,
    pub iterations: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            top_k: DEFAULT_TOP_K,
            l1: DEFAULT_L1,
            iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleToken {
    pub token: String,
    pub weight: f64,
}

/// Accepted tokens per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    labels: Vec<String>,
    /// Per class, by descending weight.
    tokens: Vec<Vec<OracleToken>>,
    class_of: HashMap<String, LabelId>,
}

#[derive(Serialize, Deserialize)]
struct OracleFile {
    labels: Vec<String>,
    tokens: Vec<Vec<OracleToken>>,
}

impl Oracle {
    pub fn from_lists(
        labels: Vec<String>,
        tokens: Vec<Vec<OracleToken>>,
    ) -> Result<Oracle, OracleError> {
        if labels.len() != tokens.len() {
            return Err(OracleError::Format(format!(
                "{} labels but {} token lists",
                labels.len(),
                tokens.len()
            )));
        }
        let mut best: HashMap<String, (LabelId, f64)> = HashMap::new();
        for (l, list) in tokens.iter().enumerate() {
            for t in list {
                let e = best.entry(t.token.clone()).or_insert((l, t.weight));
                if t.weight > e.1 {
                    *e = (l, t.weight);
                }
            }
        }
        let class_of = best.into_iter().map(|(t, (l, _))| (t, l)).collect();
        Ok(Oracle {
            labels,
            tokens,
            class_of,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn tokens(&self, label: LabelId) -> &[OracleToken] {
        &self.tokens[label]
    }

    /// The oracle class of a token, if it is in some accepted set.
    pub fn class_of(&self, token: &str) -> Option<LabelId> {
        self.class_of.get(token).copied()
    }

    /// The label to accept for a queried predicate, or `None` to reject.
    /// Only single tokens can be accepted.
    pub fn judge(&self, b: Predicate, corpus: &Corpus) -> Option<LabelId> {
        match b {
            Predicate::Token(t) => self.class_of(corpus.vocabulary().token(t)),
            Predicate::Both(..) => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        let f = OracleFile {
            labels: self.labels.clone(),
            tokens: self.tokens.clone(),
        };
        let text =
            serde_json::to_string_pretty(&f).map_err(|e| OracleError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Oracle, OracleError> {
        let text = std::fs::read_to_string(path)?;
        let f: OracleFile =
            serde_json::from_str(&text).map_err(|e| OracleError::Format(e.to_string()))?;
        Oracle::from_lists(f.labels, f.tokens)
    }
}

/// Weights `[n_labels][vocab]` and biases of the fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLogistic {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Fits an L1-penalized multinomial logistic regression on token presence
/// by accelerated proximal gradient (FISTA). The bias is not penalized.
pub fn fit_l1_logistic(
    docs: &[Vec<TokenId>],
    labels: &[LabelId],
    n_labels: usize,
    vocab: usize,
    l1: f64,
    iterations: usize,
) -> SparseLogistic {
    let n = docs.len() as f64;
    // Spectral bound of the mean log-loss Hessian: 0.5 ||X||_1 ||X||_inf / n.
    let mut col = vec![0usize; vocab];
    let mut max_row = 1usize;
    for d in docs {
        max_row = max_row.max(d.len() + 1);
        for &t in d {
            col[t as usize] += 1;
        }
    }
    let max_col = col.iter().copied().max().unwrap_or(0).max(docs.len());
    let lipschitz = 0.5 * (max_row as f64) * (max_col as f64) / n;
    let step = 1.0 / lipschitz.max(1e-12);

    let mut w = vec![vec![0.0; vocab]; n_labels];
    let mut b = vec![0.0; n_labels];
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t_k = 1.0f64;
    let mut grad_w = vec![vec![0.0; vocab]; n_labels];
    let mut grad_b = vec![0.0; n_labels];
    let mut p = vec![0.0; n_labels];
    for _ in 0..iterations {
        grad_w
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
        grad_b.iter_mut().for_each(|x| *x = 0.0);
        for (d, &y) in docs.iter().zip(labels) {
            for l in 0..n_labels {
                p[l] = yb[l] + d.iter().map(|&t| yw[l][t as usize]).sum::<f64>();
            }
            softmax_in_place(&mut p);
            for l in 0..n_labels {
                let r = (p[l] - if l == y { 1.0 } else { 0.0 }) / n;
                grad_b[l] += r;
                for &t in d {
                    grad_w[l][t as usize] += r;
                }
            }
        }
        let thresh = step * l1;
        let mut nw = yw.clone();
        for l in 0..n_labels {
            for k in 0..vocab {
                let v = yw[l][k] - step * grad_w[l][k];
                nw[l][k] = v.signum() * (v.abs() - thresh).max(0.0);
            }
        }
        let nb: Vec<f64> = (0..n_labels).map(|l| yb[l] - step * grad_b[l]).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt()) / 2.0;
        let mom = (t_k - 1.0) / t_next;
        for l in 0..n_labels {
            for k in 0..vocab {
                yw[l][k] = nw[l][k] + mom * (nw[l][k] - w[l][k]);
            }
            yb[l] = nb[l] + mom * (nb[l] - b[l]);
        }
        w = nw;
        b = nb;
        t_k = t_next;
    }
    SparseLogistic {
        weights: w,
        bias: b,
    }
}

/// Builds the oracle from gold labels of `corpus`.
pub fn simulate_oracle(
    corpus: &Corpus,
    cfg: &OracleConfig,
    access: &OracleAccess,
) -> Result<Oracle, OracleError> {
    if corpus.is_empty() {
        return Err(OracleError::Empty);
    }
    let mut docs = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for (i, x) in corpus.instances().iter().enumerate() {
        let y = corpus
            .gold_label(i, access)
            .ok_or(OracleError::MissingGold(i))?;
        let mut d: Vec<TokenId> = x.tokens.iter().copied().filter(|&t| t != UNK).collect();
        d.sort_unstable();
        d.dedup();
        docs.push(d);
        labels.push(y);
    }
    let vocab = corpus.vocabulary().len();
    let model = fit_l1_logistic(
        &docs,
        &labels,
        corpus.n_labels(),
        vocab,
        cfg.l1,
        cfg.iterations,
    );
    let mut lists = Vec::with_capacity(corpus.n_labels());
    for (l, row) in model.weights.iter().enumerate() {
        let mut pos: Vec<(TokenId, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(t, &w)| (t as TokenId, w))
            .collect();
        pos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if pos.len() < cfg.top_k {
            warn!(
                "class {} has only {} positive-weight tokens (wanted {})",
                corpus.labels()[l],
                pos.len(),
                cfg.top_k
            );
        }
        pos.truncate(cfg.top_k);
        lists.push(
            pos.into_iter()
                .map(|(t, weight)| OracleToken {
                    token: corpus.vocabulary().token(t).to_string(),
                    weight,
                })
                .collect(),
        );
    }
    Oracle::from_lists(corpus.labels().to_vec(), lists)
}
