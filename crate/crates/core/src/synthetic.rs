//! Seeded generator of a planted text classification corpus.
//!
//! Every class owns a set of signal tokens drawn with Zipf-like weights, a
//! small set of ambiguous tokens is shared by all classes, and the rest of
//! each document is uniform noise. Token names are pronounceable
//! pseudo-words so nothing in the text reveals the planted structure.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::RawRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_labels: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub signal_per_class: usize,
    pub ambiguous: usize,
    pub noise_vocab: usize,
    /// Per-position probability of an in-class signal token.
    pub p_signal: f64,
    /// Per-position probability of a signal token of another class.
    pub p_cross: f64,
    pub p_ambiguous: f64,
    /// Signal token k is drawn with weight 1 / (k + zipf_offset).
    pub zipf_offset: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            n_train: 2000,
            n_test: 1000,
            n_labels: 2,
            min_len: 30,
            max_len: 60,
            signal_per_class: 30,
            ambiguous: 10,
            noise_vocab: 3930,
            p_signal: 0.05,
            p_cross: 0.003,
            p_ambiguous: 0.06,
            zipf_offset: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub labels: Vec<String>,
    /// Signal tokens per class, most frequent first.
    pub signal: Vec<Vec<String>>,
    pub ambiguous: Vec<String>,
    pub noise: Vec<String>,
    #[serde(skip)]
    pub train: Vec<RawRecord>,
    #[serde(skip)]
    pub test: Vec<RawRecord>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if rng.random_bool(0.3) {
            w.push_str(["n", "r", "s", "x"][rng.random_range(0..4)]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
        assert!(cfg.n_labels >= 2 && cfg.min_len >= 1 && cfg.min_len <= cfg.max_len);
        assert!(cfg.p_signal + cfg.p_cross + cfg.p_ambiguous <= 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let total = cfg.n_labels * cfg.signal_per_class + cfg.ambiguous + cfg.noise_vocab;
        let mut names = pseudo_words(total, &mut rng);
        names.shuffle(&mut rng);
        let mut it = names.into_iter();
        let signal: Vec<Vec<String>> = (0..cfg.n_labels)
            .map(|_| it.by_ref().take(cfg.signal_per_class).collect())
            .collect();
        let ambiguous: Vec<String> = it.by_ref().take(cfg.ambiguous).collect();
        let noise: Vec<String> = it.collect();
        let labels: Vec<String> = (0..cfg.n_labels).map(|l| format!("c{l}")).collect();
        let zipf = WeightedIndex::new(
            (0..cfg.signal_per_class).map(|k| 1.0 / (k as f64 + cfg.zipf_offset)),
        )
        .expect("positive weights");

        // Ambiguous tokens are dealt from a reshuffled deck per class so every
        // class sees each of them equally often.
        let mut decks: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_labels];
        let mut doc = |rng: &mut ChaCha8Rng, y: usize| -> RawRecord {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let u: f64 = rng.random();
                let w = if u < cfg.p_signal {
                    &signal[y][zipf.sample(rng)]
                } else if u < cfg.p_signal + cfg.p_cross {
                    let mut other = rng.random_range(0..cfg.n_labels - 1);
                    if other >= y {
                        other += 1;
                    }
                    &signal[other][zipf.sample(rng)]
                } else if u < cfg.p_signal + cfg.p_cross + cfg.p_ambiguous && !ambiguous.is_empty()
                {
                    if decks[y].is_empty() {
                        decks[y] = (0..ambiguous.len()).collect();
                        decks[y].shuffle(rng);
                    }
                    &ambiguous[decks[y].pop().expect("refilled deck")]
                } else {
                    &noise[rng.random_range(0..noise.len())]
                };
                words.push(w.as_str());
            }
            RawRecord {
                text: words.join(" "),
                label: Some(labels[y].clone()),
            }
        };
        let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<RawRecord> {
            let mut ys: Vec<usize> = (0..n).map(|i| i % cfg.n_labels).collect();
            ys.shuffle(rng);
            ys.into_iter().map(|y| doc(rng, y)).collect()
        };
        let train = split(cfg.n_train, &mut rng);
        let test = split(cfg.n_test, &mut rng);
        SyntheticCorpus {
            config: cfg.clone(),
            labels,
            signal,
            ambiguous,
            noise,
            train,
            test,
        }
    }

    /// Writes `train.jsonl`, `test.jsonl` and `params.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let lines = |recs: &[RawRecord]| -> String {
            recs.iter()
                .map(|r| serde_json::json!({"text": r.text, "label": r.label}).to_string() + "\n")
                .collect()
        };
        std::fs::write(dir.join("train.jsonl"), lines(&self.train))?;
        std::fs::write(dir.join("test.jsonl"), lines(&self.test))?;
        let params = serde_json::to_string_pretty(self).expect("serializable parameters");
        std::fs::write(dir.join("params.json"), params + "\n")
    }

    /// The planted class of a token, if it is a signal token.
    pub fn planted_class(&self, token: &str) -> Option<usize> {
        self.signal
            .iter()
            .position(|s| s.iter().any(|t| t == token))
    }

    /// The `n` most frequent signal tokens of each class.
    pub fn seed_tokens(&self, n: usize) -> Vec<(String, usize)> {
        self.signal
            .iter()
            .enumerate()
            .flat_map(|(l, s)| s.iter().take(n).map(move |t| (t.clone(), l)))
            .collect()
    }
}
