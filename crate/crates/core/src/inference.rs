//! Posterior label marginals by belief propagation over the factor graph,
//! plus an exact enumeration oracle for small subgraphs.
//!
//! Unary evidences (token, feature and instance formulas) fold into each
//! instance's local log-potential together with the predictor's log
//! probabilities. Pair-agreement factors form the edges of a pairwise model
//! on which messages are passed in log space. Each connected component is
//! handled separately: acyclic components run undamped and reach the exact
//! marginals, loopy components use the configured damping and tolerance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelId;
use crate::dist::{log_sum_exp, LabelMatrix};
use crate::evidence::{eval_formula, EvidenceId, EvidenceKind, FactorGraph, VirtualEvidence};

/// Enumeration limit of [`brute_force_posterior`].
pub const MAX_BRUTE_FORCE_INSTANCES: usize = 15;
pub const MAX_BRUTE_FORCE_ASSIGNMENTS: u64 = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("predictor distributions have {rows}x{labels} entries, expected {n}x{n_labels}")]
    Shape {
        rows: usize,
        labels: usize,
        n: usize,
        n_labels: usize,
    },
    #[error("predictor distribution of instance {0} is not a finite nonnegative vector with positive mass")]
    BadDistribution(usize),
    #[error("subset of {size} instances with {n_labels} labels is too large to enumerate")]
    SubsetTooLarge { size: usize, n_labels: usize },
    #[error("evidence {0} connects the subset to an instance outside it")]
    NotClosed(EvidenceId),
    #[error("instance {0} is out of range")]
    BadInstance(usize),
    #[error("marginals do not cover instance {0}")]
    Uncovered(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Synchronous,
    #[default]
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    pub max_sweeps: usize,
    /// Fraction of the previous message kept on each update (loopy
    /// components only).
    pub damping: f64,
    /// Convergence threshold on the largest message change.
    pub tolerance: f64,
    pub schedule: Schedule,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            max_sweeps: 50,
            damping: 0.5,
            tolerance: 1e-6,
            schedule: Schedule::Sequential,
        }
    }
}

/// Per-instance label distributions q_i(Y_i) with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub probs: LabelMatrix,
    /// Largest sweep count over components.
    pub sweeps: usize,
    /// Largest message change in the final sweep.
    pub max_residual: f64,
    pub converged: bool,
    /// Probability that the two endpoints of each pair factor agree, from the
    /// factor's joint belief.
    pub pair_agreement: BTreeMap<EvidenceId, f64>,
    /// Row-to-instance map when only a subset was computed; sorted.
    subset: Option<Vec<usize>>,
}

impl Marginals {
    /// Marginals equal to the given distributions (no factors involved).
    pub fn from_matrix(probs: LabelMatrix) -> Marginals {
        Marginals {
            probs,
            sweeps: 0,
            max_residual: 0.0,
            converged: true,
            pair_agreement: BTreeMap::new(),
            subset: None,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.probs.n_labels()
    }

    /// Number of covered instances.
    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self) -> Option<&[usize]> {
        self.subset.as_deref()
    }

    /// Distribution of instance `i`, if covered.
    pub fn get(&self, i: usize) -> Option<&[f64]> {
        match &self.subset {
            None => (i < self.probs.rows()).then(|| self.probs.row(i)),
            Some(ids) => ids.binary_search(&i).ok().map(|r| self.probs.row(r)),
        }
    }

    pub fn argmax(&self, i: usize) -> Option<LabelId> {
        self.get(i).map(crate::dist::argmax)
    }
}

struct Edge {
    id: EvidenceId,
    a: usize,
    b: usize,
    w: f64,
}

fn check_predictions(g: &FactorGraph, pred: &LabelMatrix) -> Result<(), InferenceError> {
    let (n, n_labels) = (g.n_instances(), g.n_labels());
    if pred.rows() != n || pred.n_labels() != n_labels {
        return Err(InferenceError::Shape {
            rows: pred.rows(),
            labels: pred.n_labels(),
            n,
            n_labels,
        });
    }
    for (i, r) in pred.iter_rows().enumerate() {
        if r.iter().any(|p| !p.is_finite() || *p < 0.0) || r.iter().sum::<f64>() <= 0.0 {
            return Err(InferenceError::BadDistribution(i));
        }
    }
    Ok(())
}

/// log Ψ plus the weights of all true unary groundings, per instance.
fn local_log_potentials(g: &FactorGraph, pred: &LabelMatrix) -> LabelMatrix {
    let n_labels = g.n_labels();
    let mut local = LabelMatrix::zeros(g.n_instances(), n_labels);
    for i in 0..g.n_instances() {
        let row = local.row_mut(i);
        for (l, p) in pred.row(i).iter().enumerate() {
            row[l] = p.ln();
        }
    }
    for e in g.active() {
        if let Some(label) = e.kind.label() {
            for &i in g.grounding(e.id) {
                local.row_mut(i)[label] += e.weight;
            }
        }
    }
    local
}

fn normalize_log(v: &mut [f64]) {
    let z = log_sum_exp(v);
    for x in v.iter_mut() {
        *x -= z;
    }
}

fn softmax_log(v: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(v);
    v.iter().map(|x| (x - z).exp()).collect()
}

/// log Σ_{y_a} exp(cav(y_a) + w·I[y_a = y_b]) for every y_b, normalized.
fn agreement_message(cav: &[f64], w: f64, out: &mut [f64]) {
    let m = cav.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = cav.iter().map(|c| (c - m).exp()).collect();
    let s: f64 = shifted.iter().sum();
    let boost = w.exp_m1();
    for (o, x) in out.iter_mut().zip(&shifted) {
        *o = (s + boost * x).max(f64::MIN_POSITIVE).ln();
    }
    normalize_log(out);
}

struct ComponentResult {
    nodes: Vec<usize>,
    beliefs: Vec<Vec<f64>>,
    agreement: Vec<(EvidenceId, f64)>,
    sweeps: usize,
    residual: f64,
    converged: bool,
}

fn run_component(
    nodes: Vec<usize>,
    edges: Vec<&Edge>,
    local: &LabelMatrix,
    cfg: &BpConfig,
) -> ComponentResult {
    let n_labels = local.n_labels();
    let pos: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let is_tree = edges.len() + 1 == nodes.len();
    let damping = if is_tree { 0.0 } else { cfg.damping };
    // msgs[2e] flows a->b, msgs[2e+1] flows b->a; log domain, normalized.
    let uniform = -(n_labels as f64).ln();
    let mut msgs = vec![vec![uniform; n_labels]; 2 * edges.len()];
    let mut incoming: Vec<Vec<f64>> = vec![vec![0.0; n_labels]; nodes.len()];
    for (e_idx, e) in edges.iter().enumerate() {
        for l in 0..n_labels {
            incoming[pos[&e.b]][l] += msgs[2 * e_idx][l];
            incoming[pos[&e.a]][l] += msgs[2 * e_idx + 1][l];
        }
    }
    // (message index, source node, target node, reverse message index)
    let directed: Vec<(usize, usize, usize, usize)> = edges
        .iter()
        .enumerate()
        .flat_map(|(k, e)| {
            [
                (2 * k, pos[&e.a], pos[&e.b], 2 * k + 1),
                (2 * k + 1, pos[&e.b], pos[&e.a], 2 * k),
            ]
        })
        .collect();
    let weight_of = |m: usize| edges[m / 2].w;

    let compute = |m: usize,
                   src: usize,
                   rev: usize,
                   incoming: &[Vec<f64>],
                   msgs: &[Vec<f64>],
                   out: &mut Vec<f64>| {
        let node = nodes[src];
        let cav: Vec<f64> = (0..n_labels)
            .map(|l| local.row(node)[l] + incoming[src][l] - msgs[rev][l])
            .collect();
        agreement_message(&cav, weight_of(m), out);
        if damping > 0.0 {
            for (o, old) in out.iter_mut().zip(&msgs[m]) {
                *o = (1.0 - damping) * *o + damping * old;
            }
            normalize_log(out);
        }
    };
    let change = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.exp() - y.exp()).abs())
            .fold(0.0, f64::max)
    };

    let (max_sweeps, tol) = if is_tree {
        // Undamped passes on a tree settle exactly within diameter + 1 sweeps.
        (nodes.len() + 2, 1e-15)
    } else {
        (cfg.max_sweeps.max(1), cfg.tolerance)
    };
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    let mut buf = vec![0.0; n_labels];
    while sweeps < max_sweeps {
        sweeps += 1;
        residual = 0.0;
        match cfg.schedule {
            Schedule::Sequential => {
                for &(m, src, dst, rev) in &directed {
                    compute(m, src, rev, &incoming, &msgs, &mut buf);
                    residual = f64::max(residual, change(&buf, &msgs[m]));
                    for l in 0..n_labels {
                        incoming[dst][l] += buf[l] - msgs[m][l];
                    }
                    msgs[m].copy_from_slice(&buf);
                }
            }
            Schedule::Synchronous => {
                let mut next = msgs.clone();
                for &(m, src, _dst, rev) in &directed {
                    compute(m, src, rev, &incoming, &msgs, &mut next[m]);
                    residual = f64::max(residual, change(&next[m], &msgs[m]));
                }
                msgs = next;
                for v in incoming.iter_mut() {
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
                for &(m, _src, dst, _rev) in &directed {
                    for l in 0..n_labels {
                        incoming[dst][l] += msgs[m][l];
                    }
                }
            }
        }
        if residual <= tol {
            break;
        }
    }
    let converged = residual <= tol || (is_tree && residual <= cfg.tolerance);

    let beliefs = nodes
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let v: Vec<f64> = (0..n_labels)
                .map(|l| local.row(i)[l] + incoming[k][l])
                .collect();
            softmax_log(&v)
        })
        .collect();
    let agreement = edges
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let (pa, pb) = (pos[&e.a], pos[&e.b]);
            let cav_a: Vec<f64> = (0..n_labels)
                .map(|l| local.row(e.a)[l] + incoming[pa][l] - msgs[2 * k + 1][l])
                .collect();
            let cav_b: Vec<f64> = (0..n_labels)
                .map(|l| local.row(e.b)[l] + incoming[pb][l] - msgs[2 * k][l])
                .collect();
            (
                e.id,
                agreement_probability(&softmax_log(&cav_a), &softmax_log(&cav_b), e.w),
            )
        })
        .collect();
    ComponentResult {
        nodes,
        beliefs,
        agreement,
        sweeps,
        residual,
        converged,
    }
}

/// P(Y_a = Y_b) under the joint ∝ p_a(x) p_b(y) exp(w I[x = y]).
fn agreement_probability(pa: &[f64], pb: &[f64], w: f64) -> f64 {
    let same: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
    let boosted = w.exp() * same;
    boosted / (1.0 - same + boosted)
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

fn run_bp(g: &FactorGraph, local: LabelMatrix, cfg: &BpConfig) -> Marginals {
    let n = g.n_instances();
    let edges: Vec<Edge> = g
        .active()
        .filter_map(|e| match e.kind {
            EvidenceKind::PairAgree { first, second } => Some(Edge {
                id: e.id,
                a: first,
                b: second,
                w: e.weight,
            }),
            _ => None,
        })
        .collect();

    let mut probs = LabelMatrix::zeros(n, g.n_labels());
    for i in 0..n {
        let b = softmax_log(local.row(i));
        probs.row_mut(i).copy_from_slice(&b);
    }
    if edges.is_empty() {
        return Marginals::from_matrix(probs);
    }

    let mut parent: Vec<usize> = (0..n).collect();
    for e in &edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<&Edge>)> = BTreeMap::new();
    for e in &edges {
        let r = find(&mut parent, e.a);
        groups.entry(r).or_default().1.push(e);
    }
    for i in 0..n {
        let r = find(&mut parent, i);
        if let Some(entry) = groups.get_mut(&r) {
            entry.0.push(i);
        }
    }
    let results: Vec<ComponentResult> = groups
        .into_values()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(nodes, es)| run_component(nodes, es, &local, cfg))
        .collect();

    let mut out = Marginals::from_matrix(probs);
    for r in results {
        for (k, &i) in r.nodes.iter().enumerate() {
            out.probs.row_mut(i).copy_from_slice(&r.beliefs[k]);
        }
        out.pair_agreement.extend(r.agreement);
        out.sweeps = out.sweeps.max(r.sweeps);
        out.max_residual = out.max_residual.max(r.residual);
        out.converged &= r.converged;
    }
    out
}

/// Marginals of ∏_v Φ_v · ∏_i Ψ(X_i, Y_i). Non-convergence is reported in
/// the result, not as an error.
pub fn bp_posterior(
    g: &FactorGraph,
    pred: &LabelMatrix,
    cfg: &BpConfig,
) -> Result<Marginals, InferenceError> {
    check_predictions(g, pred)?;
    Ok(run_bp(g, local_log_potentials(g, pred), cfg))
}

/// Marginals of the evidence factors alone (Ψ replaced by uniform).
pub fn evidence_only_marginals(
    g: &FactorGraph,
    cfg: &BpConfig,
) -> Result<Marginals, InferenceError> {
    let uniform = LabelMatrix::uniform(g.n_instances(), g.n_labels());
    bp_posterior(g, &uniform, cfg)
}

/// Exact marginals over `subset` by summing over every label assignment.
///
/// Formulas are evaluated through [`eval_formula`], independently of the
/// grounding tables used by [`bp_posterior`]. No pair factor may cross the
/// subset boundary. Rows follow the sorted subset.
pub fn brute_force_posterior(
    g: &FactorGraph,
    pred: &LabelMatrix,
    subset: &[usize],
) -> Result<Marginals, InferenceError> {
    check_predictions(g, pred)?;
    let mut ids = subset.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n_labels = g.n_labels();
    let size = ids.len();
    let assignments = (n_labels as u64).checked_pow(size as u32);
    if size > MAX_BRUTE_FORCE_INSTANCES
        || assignments.is_none_or(|a| a > MAX_BRUTE_FORCE_ASSIGNMENTS)
    {
        return Err(InferenceError::SubsetTooLarge { size, n_labels });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= g.n_instances()) {
        return Err(InferenceError::BadInstance(bad));
    }
    let corpus = g.corpus();
    let pos = |i: usize| ids.binary_search(&i).ok();

    // Unary log-potentials per subset member and label.
    let mut unary = vec![vec![0.0; n_labels]; size];
    let mut pairs: Vec<(EvidenceId, usize, usize, Vec<f64>)> = Vec::new();
    for (k, &i) in ids.iter().enumerate() {
        for l in 0..n_labels {
            unary[k][l] = pred.row(i)[l].ln();
        }
    }
    let truth = |e: &VirtualEvidence, a: &[(usize, LabelId)]| {
        eval_formula(e, a, corpus).expect("assignment covers the formula")
    };
    for e in g.active() {
        match e.kind {
            EvidenceKind::PairAgree { first, second } => match (pos(first), pos(second)) {
                (Some(ka), Some(kb)) => {
                    let mut table = vec![0.0; n_labels * n_labels];
                    for x in 0..n_labels {
                        for y in 0..n_labels {
                            if truth(e, &[(first, x), (second, y)]) {
                                table[x * n_labels + y] = e.weight;
                            }
                        }
                    }
                    pairs.push((e.id, ka, kb, table));
                }
                (None, None) => {}
                _ => return Err(InferenceError::NotClosed(e.id)),
            },
            EvidenceKind::InstanceLabel { instance, .. } => {
                if let Some(k) = pos(instance) {
                    for l in 0..n_labels {
                        if truth(e, &[(instance, l)]) {
                            unary[k][l] += e.weight;
                        }
                    }
                }
            }
            EvidenceKind::TokenLabel { .. } | EvidenceKind::FeatureLabel { .. } => {
                for (k, &i) in ids.iter().enumerate() {
                    for l in 0..n_labels {
                        if truth(e, &[(i, l)]) {
                            unary[k][l] += e.weight;
                        }
                    }
                }
            }
        }
    }

    // Upper bound on any assignment's log score, used as the shift.
    let shift: f64 = unary
        .iter()
        .map(|u| u.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        + pairs
            .iter()
            .map(|(_, _, _, t)| t.iter().copied().fold(0.0, f64::max))
            .sum::<f64>();

    let mut acc = vec![vec![0.0; n_labels]; size];
    let mut agree = vec![0.0; pairs.len()];
    let mut total = 0.0;
    let mut y = vec![0usize; size];
    loop {
        let mut s = 0.0;
        for k in 0..size {
            s += unary[k][y[k]];
        }
        for (_, a, b, t) in &pairs {
            s += t[y[*a] * n_labels + y[*b]];
        }
        let wgt = (s - shift).exp();
        total += wgt;
        for k in 0..size {
            acc[k][y[k]] += wgt;
        }
        for (p, (_, a, b, _)) in pairs.iter().enumerate() {
            if y[*a] == y[*b] {
                agree[p] += wgt;
            }
        }
        // Odometer increment.
        let mut k = 0;
        while k < size {
            y[k] += 1;
            if y[k] < n_labels {
                break;
            }
            y[k] = 0;
            k += 1;
        }
        if k == size {
            break;
        }
    }
    let rows: Vec<Vec<f64>> = acc
        .into_iter()
        .map(|r| r.into_iter().map(|x| x / total).collect())
        .collect();
    let pair_agreement = pairs
        .iter()
        .zip(agree)
        .map(|((id, ..), a)| (*id, a / total))
        .collect();
    Ok(Marginals {
        probs: LabelMatrix::from_rows(&rows, n_labels),
        sweeps: 0,
        max_residual: 0.0,
        converged: true,
        pair_agreement,
        subset: Some(ids),
    })
}

/// Expectation of `e`'s formula under `m`: the mean over groundings of
/// m_i(l) for unary formulas, the agreement probability for pairs (from the
/// factor's joint belief when available, else Σ_l m_i(l) m_j(l)).
pub fn expected_feature(
    g: &FactorGraph,
    e: &VirtualEvidence,
    m: &Marginals,
) -> Result<f64, InferenceError> {
    match e.kind {
        EvidenceKind::PairAgree { first, second } => {
            if let Some(&a) = m.pair_agreement.get(&e.id) {
                return Ok(a);
            }
            let pa = m.get(first).ok_or(InferenceError::Uncovered(first))?;
            let pb = m.get(second).ok_or(InferenceError::Uncovered(second))?;
            Ok(pa.iter().zip(pb).map(|(x, y)| x * y).sum())
        }
        _ => {
            let label = e.kind.label().expect("unary formula has a label");
            let grounding = g.grounding(e.id);
            if grounding.is_empty() {
                return Ok(0.0);
            }
            let mut s = 0.0;
            for &i in grounding {
                s += m.get(i).ok_or(InferenceError::Uncovered(i))?[label];
            }
            Ok(s / grounding.len() as f64)
        }
    }
}
