//! Self-supervised text classification with virtual evidence.
//!
//! A factor graph couples a neural label distribution per instance with
//! weighted logical formulas (virtual evidence). Learning alternates exact or
//! loopy belief propagation with predictor training and weight updates, and
//! the self-supervision loop keeps proposing new evidence from the model's
//! own attention and entropy signals.

pub mod corpus;
pub mod dist;
pub mod evidence;
pub mod inference;
pub mod learning;
pub mod oracle;
pub mod predictor;
pub mod proposers;
pub mod s4;
pub mod settings;
pub mod synthetic;

pub use corpus::{Corpus, Instance, LabelId, TokenId, Vocabulary};
pub use dist::LabelMatrix;
pub use evidence::{
    EvidenceId, EvidenceKind, EvidenceSpec, FactorGraph, Predicate, Source, Status, VirtualEvidence,
};
pub use inference::{BpConfig, Marginals, Schedule};
pub use learning::{dpl_learn, EmConfig};
pub use predictor::{
    AttentionClassifier, Predictor, PredictorConfig, ProbabilisticLabelSet, TrainOptions,
};
pub use proposers::{ProposalLedger, ProposerConfig, ScoreReport, Strategy};
pub use s4::{
    DecisionChannel, HistoryRow, HumanDecision, OracleChannel, PendingQuery, S4Config, S4Run,
};
