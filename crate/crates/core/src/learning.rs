//! Variational EM over the factor graph: belief propagation for the E-step,
//! then predictor training on the resulting probabilistic labels and
//! moment-matching updates of the learnable evidence weights.

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, LabelId};
use crate::dist::argmax;
use crate::evidence::{EvidenceId, FactorGraph, HARD_WEIGHT};
use crate::inference::{
    bp_posterior, evidence_only_marginals, expected_feature, BpConfig, InferenceError, Marginals,
};
use crate::predictor::{Predictor, PredictorError, ProbabilisticLabelSet, TrainOptions};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("predictor has {predictor} labels but the graph has {graph}")]
    LabelMismatch { predictor: usize, graph: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub em_iterations: usize,
    pub train: TrainOptions,
    /// Step size η of the weight update.
    pub weight_step: f64,
    pub weight_steps: usize,
    /// Stop the weight loop early once every moment gap, including the
    /// prior term, is at most this.
    pub weight_tolerance: Option<f64>,
    pub bp: BpConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            em_iterations: 3,
            train: TrainOptions::default(),
            weight_step: 0.1,
            weight_steps: 25,
            weight_tolerance: None,
            bp: BpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdateReport {
    pub steps: usize,
    /// Largest |E_Φ[f] − E_q[f] + 2λw| after the last step.
    pub max_gap: f64,
    pub clamped: Vec<EvidenceId>,
    pub bp_converged: bool,
}

/// Gradient-descent M-step for the learnable weights against frozen
/// targets `q`: Δw = −η(E_Φ[f] − E_q[f]) − 2ηλw, with E_Φ recomputed from
/// the evidence-only model after every step.
pub fn update_weights(
    g: &mut FactorGraph,
    q: &Marginals,
    cfg: &EmConfig,
) -> Result<WeightUpdateReport, LearnError> {
    let learnable: Vec<(EvidenceId, f64, f64)> = g
        .active()
        .filter(|e| e.learnable)
        .map(|e| Ok((e.id, expected_feature(g, e, q)?, e.prior_strength)))
        .collect::<Result<_, InferenceError>>()?;
    let mut report = WeightUpdateReport {
        steps: 0,
        max_gap: 0.0,
        clamped: Vec::new(),
        bp_converged: true,
    };
    if learnable.is_empty() {
        return Ok(report);
    }
    let gaps = |g: &FactorGraph, phi: &Marginals| -> Result<Vec<f64>, InferenceError> {
        learnable
            .iter()
            .map(|&(id, eq, lambda)| {
                let e = g.get(id).expect("learnable evidence exists");
                Ok(expected_feature(g, e, phi)? - eq + 2.0 * lambda * e.weight)
            })
            .collect()
    };
    let mut phi = evidence_only_marginals(g, &cfg.bp)?;
    report.bp_converged &= phi.converged;
    let mut current = gaps(g, &phi)?;
    for _ in 0..cfg.weight_steps {
        if let Some(tol) = cfg.weight_tolerance {
            if current.iter().all(|d| d.abs() <= tol) {
                break;
            }
        }
        for (&(id, ..), d) in learnable.iter().zip(&current) {
            let w = g.get(id).expect("learnable evidence exists").weight;
            let mut next = w - cfg.weight_step * d;
            if next.abs() > HARD_WEIGHT {
                next = next.clamp(-HARD_WEIGHT, HARD_WEIGHT);
                if !report.clamped.contains(&id) {
                    warn!("weight of evidence {id} clamped to {next}");
                    report.clamped.push(id);
                }
            }
            g.set_weight(id, next).expect("finite clamped weight");
        }
        report.steps += 1;
        phi = evidence_only_marginals(g, &cfg.bp)?;
        report.bp_converged &= phi.converged;
        current = gaps(g, &phi)?;
    }
    report.max_gap = current.iter().fold(0.0, |m, d| m.max(d.abs()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIterationRecord {
    pub iteration: usize,
    pub predictor_loss: f64,
    pub weights: Vec<(EvidenceId, f64)>,
    pub weight_steps: usize,
    pub weight_gap: f64,
    pub bp_sweeps: usize,
    pub bp_residual: f64,
    pub bp_converged: bool,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DplOutcome {
    /// Posterior marginals under the final predictor and weights.
    pub q: Marginals,
    pub log: Vec<EmIterationRecord>,
    /// False if any E-step or weight-step inference failed to converge.
    pub bp_converged: bool,
    pub clamped: Vec<EvidenceId>,
}

/// Held-out instances with gold labels for accuracy tracking.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub corpus: &'a Corpus,
    pub gold: &'a [LabelId],
}

pub fn accuracy<P: Predictor>(psi: &P, eval: &EvalSet<'_>) -> f64 {
    if eval.gold.is_empty() {
        return 0.0;
    }
    let pred = psi.predict_all(eval.corpus);
    let hits = eval
        .gold
        .iter()
        .enumerate()
        .filter(|(i, &y)| pred.argmax(*i) == y)
        .count();
    hits as f64 / eval.gold.len() as f64
}

/// Fraction of rows whose argmax matches `gold`.
pub fn argmax_accuracy(probs: &crate::dist::LabelMatrix, gold: &[LabelId]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hits = gold
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    hits as f64 / gold.len() as f64
}

/// Runs `cfg.em_iterations` rounds of E-step, predictor training (warm
/// start, fresh optimizer moments) and weight updates, then refreshes q
/// under the final parameters.
pub fn dpl_learn<P: Predictor>(
    g: &mut FactorGraph,
    psi: &mut P,
    cfg: &EmConfig,
    eval: Option<&EvalSet<'_>>,
) -> Result<DplOutcome, LearnError> {
    if psi.n_labels() != g.n_labels() {
        return Err(LearnError::LabelMismatch {
            predictor: psi.n_labels(),
            graph: g.n_labels(),
        });
    }
    let corpus = g.corpus().clone();
    let mut log = Vec::with_capacity(cfg.em_iterations);
    let mut bp_converged = true;
    let mut clamped = Vec::new();
    for iteration in 0..cfg.em_iterations {
        let q = bp_posterior(g, &psi.predict_all(&corpus), &cfg.bp)?;
        bp_converged &= q.converged;
        let targets = ProbabilisticLabelSet::full(q.probs.clone())?;
        let opts = TrainOptions {
            reset_optimizer: true,
            ..cfg.train
        };
        let trained = psi.train(&corpus, &targets, &opts)?;
        let wu = update_weights(g, &q, cfg)?;
        bp_converged &= wu.bp_converged;
        for id in wu.clamped {
            if !clamped.contains(&id) {
                clamped.push(id);
            }
        }
        let rec = EmIterationRecord {
            iteration,
            predictor_loss: trained.final_loss,
            weights: g
                .active()
                .filter(|e| e.learnable)
                .map(|e| (e.id, e.weight))
                .collect(),
            weight_steps: wu.steps,
            weight_gap: wu.max_gap,
            bp_sweeps: q.sweeps,
            bp_residual: q.max_residual,
            bp_converged: q.converged,
            heldout_accuracy: eval.map(|e| accuracy(psi, e)),
        };
        debug!(
            "em iteration {iteration}: loss {:.5}, weight gap {:.2e}, bp sweeps {}",
            rec.predictor_loss, rec.weight_gap, rec.bp_sweeps
        );
        log.push(rec);
    }
    let q = bp_posterior(g, &psi.predict_all(&corpus), &cfg.bp)?;
    bp_converged &= q.converged;
    if !bp_converged {
        warn!("belief propagation did not converge in every step");
    }
    Ok(DplOutcome {
        q,
        log,
        bp_converged,
        clamped,
    })
}
