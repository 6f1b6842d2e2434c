//! Flat run settings and input loading shared by the command line and the
//! HTTP service. Keys mirror the fields of [`S4Config`], [`EmConfig`],
//! [`BpConfig`] and [`PredictorConfig`]; unset keys keep their defaults.
//!
//! [`EmConfig`]: crate::learning::EmConfig
//! [`BpConfig`]: crate::inference::BpConfig
//! [`PredictorConfig`]: crate::predictor::PredictorConfig

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, Corpus, CorpusError, LoadOptions, OracleAccess};
use crate::evidence::{load_evidence_file, EvidenceError, EvidenceSpec, Status};
use crate::inference::Schedule;
use crate::proposers::{ProposerConfig, Strategy};
use crate::s4::{EvalData, S4Config, S4Error};

/// Self-training proposal strategy, or `none` to disable proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SstStrategy {
    Attention,
    Entropy,
    Joint,
    None,
}

impl std::str::FromStr for SstStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(SstStrategy::Attention),
            "entropy" => Ok(SstStrategy::Entropy),
            "joint" => Ok(SstStrategy::Joint),
            "none" => Ok(SstStrategy::None),
            other => Err(format!(
                "unknown strategy {other:?} (expected attention, entropy, joint or none)"
            )),
        }
    }
}

impl SstStrategy {
    fn strategy(self) -> Option<Strategy> {
        match self {
            SstStrategy::Attention => Some(Strategy::Attention),
            SstStrategy::Entropy => Some(Strategy::Entropy),
            SstStrategy::Joint => Some(Strategy::Joint),
            SstStrategy::None => None,
        }
    }
}

macro_rules! settings {
    ($($(#[$doc:meta])* $field:ident: $ty:ty,)*) => {
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct Settings {
            $($(#[$doc])* pub $field: Option<$ty>,)*
        }

        impl Settings {
            /// Keys set in `over` replace those in `self`.
            pub fn merge(self, over: Settings) -> Settings {
                Settings {
                    $($field: over.$field.or(self.$field),)*
                }
            }

            /// Names of every accepted key.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];
        }
    };
}

settings! {
    outer_iterations: usize,
    budget: usize,
    strategy: SstStrategy,
    /// Proposals per self-training step.
    sst_batch: usize,
    sst_conjunctions: bool,
    alpha: f64,
    max_sst_steps: usize,
    em_iterations: usize,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    reset_optimizer: bool,
    weight_step: f64,
    weight_steps: usize,
    weight_tolerance: f64,
    max_sweeps: usize,
    damping: f64,
    tolerance: f64,
    schedule: Schedule,
    dim: usize,
    context_dim: usize,
    init_scale: f64,
    reinit_predictor: bool,
    sst_weight: f64,
    sst_learnable: bool,
    fal_weight: f64,
    fal_learnable: bool,
    universe_fraction: f64,
    stop_tokens: Vec<String>,
    fal_conjunctions: bool,
    /// Random seed of the predictor and the training order.
    seed: u64,
}

impl Settings {
    /// Applies the set keys to `base` and validates the result.
    pub fn apply(&self, base: S4Config) -> Result<S4Config, S4Error> {
        let mut c = base;
        macro_rules! set {
            ($field:ident => $target:expr) => {
                if let Some(v) = self.$field.clone() {
                    $target = v;
                }
            };
        }
        set!(outer_iterations => c.outer_iterations);
        set!(budget => c.budget);
        set!(alpha => c.alpha);
        set!(max_sst_steps => c.max_sst_steps);
        set!(em_iterations => c.em.em_iterations);
        set!(epochs => c.em.train.epochs);
        set!(learning_rate => c.em.train.learning_rate);
        set!(batch_size => c.em.train.batch_size);
        set!(reset_optimizer => c.em.train.reset_optimizer);
        set!(weight_step => c.em.weight_step);
        set!(weight_steps => c.em.weight_steps);
        set!(max_sweeps => c.em.bp.max_sweeps);
        set!(damping => c.em.bp.damping);
        set!(tolerance => c.em.bp.tolerance);
        set!(schedule => c.em.bp.schedule);
        set!(dim => c.predictor.dim);
        set!(context_dim => c.predictor.context_dim);
        set!(init_scale => c.predictor.init_scale);
        set!(reinit_predictor => c.reinit_predictor);
        set!(sst_weight => c.sst_weight);
        set!(sst_learnable => c.sst_learnable);
        set!(fal_weight => c.fal_weight);
        set!(fal_learnable => c.fal_learnable);
        set!(universe_fraction => c.universe_fraction);
        set!(stop_tokens => c.stop_tokens);
        set!(fal_conjunctions => c.fal_conjunctions);
        set!(seed => c.seed);
        if let Some(t) = self.weight_tolerance {
            c.em.weight_tolerance = Some(t);
        }
        if let Some(s) = self.strategy {
            c.sst = s.strategy().map(|strategy| ProposerConfig {
                strategy,
                ..c.sst.unwrap_or_default()
            });
        }
        if let Some(p) = c.sst.as_mut() {
            if let Some(b) = self.sst_batch {
                p.batch = Some(b);
            }
            if let Some(b) = self.sst_conjunctions {
                p.conjunctions = b;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Corpus { path: String, source: CorpusError },
    #[error("{path}: {source}")]
    Evidence { path: String, source: EvidenceError },
    #[error("{0}: evaluation corpus has unlabeled instances")]
    Unlabeled(String),
}

/// A training corpus, an optional labeled evaluation corpus sharing its
/// vocabulary, and seed evidence.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub corpus: Arc<Corpus>,
    pub eval: Option<EvalData>,
    pub seed: Vec<EvidenceSpec>,
}

impl RunInputs {
    pub fn load(
        corpus: &Path,
        eval: Option<&Path>,
        seed: Option<&Path>,
    ) -> Result<RunInputs, InputError> {
        let corpus = Arc::new(load_train(corpus)?);
        let eval = eval.map(|p| load_eval(p, &corpus)).transpose()?;
        let seed = match seed {
            Some(p) => load_seed(p, &corpus)?,
            None => Vec::new(),
        };
        Ok(RunInputs { corpus, eval, seed })
    }
}

pub fn load_train(path: &Path) -> Result<Corpus, InputError> {
    load_corpus(path, &LoadOptions::for_path(path)).map_err(|source| InputError::Corpus {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a labeled corpus under the vocabulary and label set of `train`.
pub fn load_eval(path: &Path, train: &Corpus) -> Result<EvalData, InputError> {
    let opts = LoadOptions {
        vocabulary: Some(train.vocabulary().clone()),
        labels: Some(train.labels().to_vec()),
        ..LoadOptions::for_path(path)
    };
    let corpus = load_corpus(path, &opts).map_err(|source| InputError::Corpus {
        path: path.display().to_string(),
        source,
    })?;
    let gold = corpus
        .gold_labels(&OracleAccess::grant())
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| InputError::Unlabeled(path.display().to_string()))?;
    Ok(EvalData {
        corpus: Arc::new(corpus),
        gold,
    })
}

/// Active records of an evidence file. Rejected records are skipped.
pub fn load_seed(path: &Path, corpus: &Corpus) -> Result<Vec<EvidenceSpec>, InputError> {
    let records = load_evidence_file(path, corpus).map_err(|source| InputError::Evidence {
        path: path.display().to_string(),
        source,
    })?;
    let total = records.len();
    let active: Vec<EvidenceSpec> = records
        .into_iter()
        .filter(|(_, s)| *s == Status::Active)
        .map(|(spec, _)| spec)
        .collect();
    if active.len() < total {
        warn!(
            "{}: skipped {} rejected records",
            path.display(),
            total - active.len()
        );
    }
    Ok(active)
}

/// Paths to run inputs, as given in a config file or a request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub corpus: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub seed_file: Option<PathBuf>,
}
