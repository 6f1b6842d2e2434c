//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s4_core::corpus::{
    build_feature_universe, Corpus, Instance, LoadOptions, OracleAccess, RawRecord,
};
use s4_core::evidence::{EvidenceId, EvidenceKind, EvidenceSpec, FactorGraph, Predicate, Source};
use s4_core::inference::{
    bp_posterior, brute_force_posterior, evidence_only_marginals, expected_feature, BpConfig,
    Marginals,
};
use s4_core::learning::{update_weights, EmConfig};
use s4_core::predictor::{
    AttentionClassifier, ParamGroup, PredictorConfig, PredictorError, ProbabilisticLabelSet,
    TrainOptions, TrainReport,
};
use s4_core::proposers::{
    attn_score, entropy_score, joint_score, prop_fal, prop_sst, ProposalLedger, ProposerConfig,
    ScoreStats, Strategy,
};
use s4_core::s4::EvalData;
use s4_core::synthetic::{SyntheticConfig, SyntheticCorpus};
use s4_core::{LabelMatrix, Predictor};

pub const TOKENS: [&str; 5] = ["ta", "tb", "tc", "td", "te"];

pub fn label_names(n: usize) -> Vec<String> {
    (0..n).map(|l| format!("l{l}")).collect()
}

pub fn corpus_from(texts: &[String], n_labels: usize) -> Arc<Corpus> {
    let recs: Vec<RawRecord> = texts
        .iter()
        .map(|t| RawRecord {
            text: t.clone(),
            label: None,
        })
        .collect();
    let opts = LoadOptions {
        labels: Some(label_names(n_labels)),
        ..Default::default()
    };
    Arc::new(Corpus::from_records(&recs, &opts).expect("valid fixture corpus"))
}

/// A random simplex point with every entry at least `floor / n`.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter()
        .map(|x| (1.0 - floor) * x / s + floor / n as f64)
        .collect()
}

/// Pair factor layout of a random graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pairs {
    None,
    /// Each instance links to a random earlier one with this probability.
    Forest(f64),
    /// Each unordered pair is linked with this probability.
    Density(f64),
}

pub struct RandomGraph {
    pub graph: FactorGraph,
    pub pred: LabelMatrix,
}

/// Instances carry a unique token plus a random subset of [`TOKENS`], so
/// token and conjunction factors ground on several instances while only pair
/// factors can close cycles.
pub fn random_graph(
    rng: &mut ChaCha8Rng,
    n: usize,
    n_labels: usize,
    pairs: Pairs,
    max_w: f64,
) -> RandomGraph {
    let texts: Vec<String> = (0..n)
        .map(|i| {
            let mut words = vec![format!("doc{i}")];
            for t in TOKENS {
                if rng.random_bool(0.4) {
                    words.push(t.to_string());
                }
            }
            words.join(" ")
        })
        .collect();
    let corpus = corpus_from(&texts, n_labels);
    let mut g = FactorGraph::new(corpus.clone());
    let mut kinds = Vec::new();
    for t in TOKENS {
        if let Some(id) = corpus.vocabulary().id(t) {
            if rng.random_bool(0.5) {
                kinds.push(EvidenceKind::TokenLabel {
                    token: id,
                    label: rng.random_range(0..n_labels),
                });
            }
        }
    }
    if let (Some(a), Some(b)) = (
        corpus.vocabulary().id(TOKENS[0]),
        corpus.vocabulary().id(TOKENS[1]),
    ) {
        if rng.random_bool(0.5) {
            kinds.push(EvidenceKind::feature_label(
                Predicate::both(a, b),
                rng.random_range(0..n_labels),
            ));
        }
    }
    for i in 0..n {
        if rng.random_bool(0.3) {
            kinds.push(EvidenceKind::InstanceLabel {
                instance: i,
                label: rng.random_range(0..n_labels),
            });
        }
    }
    match pairs {
        Pairs::None => {}
        Pairs::Forest(p) => {
            for i in 1..n {
                if rng.random_bool(p) {
                    kinds.push(EvidenceKind::pair(rng.random_range(0..i), i));
                }
            }
        }
        Pairs::Density(p) => {
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(p) {
                        kinds.push(EvidenceKind::pair(i, j));
                    }
                }
            }
        }
    }
    for kind in kinds {
        if g.contains(&kind)
            || (kind
                .predicate()
                .is_some_and(|b| b.matches(&corpus).is_empty()))
        {
            continue;
        }
        let w = rng.random_range(-max_w..=max_w);
        g.attach(EvidenceSpec::new(kind, Source::Seed).with_weight(w))
            .expect("valid random evidence");
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| random_distribution(rng, n_labels, 0.0))
        .collect();
    RandomGraph {
        graph: g,
        pred: LabelMatrix::from_rows(&rows, n_labels),
    }
}

/// Connected components under pair factors, each sorted.
pub fn components(g: &FactorGraph) -> Vec<Vec<usize>> {
    let n = g.n_instances();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for e in g.active() {
        if let EvidenceKind::PairAgree { first, second } = e.kind {
            let (a, b) = (find(&mut parent, first), find(&mut parent, second));
            parent[a] = b;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Predictor with fixed outputs: attention proportional to a per-token
/// score, embeddings looked up per instance.
#[derive(Clone)]
pub struct Scripted {
    pub n_labels: usize,
    pub token_score: Vec<f64>,
    pub pred: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

impl Predictor for Scripted {
    fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn predict(&self, x: &Instance) -> Vec<f64> {
        self.pred[x.id].clone()
    }

    fn attention(&self, x: &Instance) -> Vec<f64> {
        let s: Vec<f64> = x
            .tokens
            .iter()
            .map(|&t| self.token_score[t as usize])
            .collect();
        let z: f64 = s.iter().sum();
        s.iter().map(|v| v / z).collect()
    }

    fn embed(&self, x: &Instance) -> Vec<f64> {
        self.embeddings[x.id].clone()
    }

    fn train(
        &mut self,
        _: &Corpus,
        _: &ProbabilisticLabelSet,
        _: &TrainOptions,
    ) -> Result<TrainReport, PredictorError> {
        Ok(TrainReport {
            epoch_losses: Vec::new(),
            final_loss: 0.0,
        })
    }

    fn save_checkpoint(&self, _: &Path) -> Result<(), PredictorError> {
        Ok(())
    }
}

/// Random corpus over a small vocabulary with random marginals.
pub fn random_texts(rng: &mut ChaCha8Rng, n_docs: usize, vocab: usize) -> Vec<String> {
    let words: Vec<String> = (0..vocab).map(|k| format!("w{k}")).collect();
    (0..n_docs)
        .map(|_| {
            let len = rng.random_range(1..=6);
            (0..len)
                .map(|_| words.choose(rng).expect("nonempty vocabulary").as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// The planted corpus with its train split loaded and the test split
/// prepared for evaluation under the train vocabulary.
pub struct Planted {
    pub syn: SyntheticCorpus,
    pub train: Arc<Corpus>,
    pub eval: EvalData,
}

impl Planted {
    pub fn generate(cfg: &SyntheticConfig) -> Planted {
        let syn = SyntheticCorpus::generate(cfg);
        let train = Arc::new(
            Corpus::from_records(&syn.train, &LoadOptions::default()).expect("train split"),
        );
        let test = Corpus::from_records(
            &syn.test,
            &LoadOptions {
                vocabulary: Some(train.vocabulary().clone()),
                labels: Some(train.labels().to_vec()),
                ..Default::default()
            },
        )
        .expect("test split");
        let gold = test
            .gold_labels(&OracleAccess::grant())
            .into_iter()
            .map(|g| g.expect("labeled test split"))
            .collect();
        Planted {
            syn,
            train,
            eval: EvalData {
                corpus: Arc::new(test),
                gold,
            },
        }
    }

    pub fn default_corpus() -> Planted {
        Planted::generate(&SyntheticConfig::default())
    }

    /// The `n` most frequent planted tokens of each class as seed evidence.
    pub fn seeds(&self, n: usize) -> Vec<EvidenceSpec> {
        self.syn
            .seed_tokens(n)
            .into_iter()
            .map(|(t, label)| {
                let token = self
                    .train
                    .vocabulary()
                    .id(&t)
                    .expect("seed token in vocabulary");
                EvidenceSpec::new(EvidenceKind::TokenLabel { token, label }, Source::Seed)
            })
            .collect()
    }

    pub fn train_gold(&self) -> Vec<usize> {
        self.train
            .gold_labels(&OracleAccess::grant())
            .into_iter()
            .map(|g| g.expect("labeled train split"))
            .collect()
    }

    /// Whether an evidence names a planted token with its planted class.
    pub fn is_planted(&self, kind: &EvidenceKind) -> bool {
        match (kind.predicate(), kind.label()) {
            (Some(Predicate::Token(t)), Some(l)) => {
                self.syn.planted_class(self.train.vocabulary().token(t)) == Some(l)
            }
            _ => false,
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Worst per-instance discrepancy between BP and exact enumeration of each
/// connected component.
pub fn bp_vs_exact(g: &RandomGraph, cfg: &BpConfig, metric: fn(&[f64], &[f64]) -> f64) -> f64 {
    let bp = bp_posterior(&g.graph, &g.pred, cfg).expect("valid graph");
    let mut worst: f64 = 0.0;
    for comp in components(&g.graph) {
        let exact = brute_force_posterior(&g.graph, &g.pred, &comp).expect("closed component");
        for &i in &comp {
            worst = worst.max(metric(
                bp.get(i).expect("full marginals"),
                exact.get(i).expect("component row"),
            ));
        }
    }
    worst
}

pub fn pair_count(g: &FactorGraph) -> usize {
    g.active().filter(|e| e.kind.is_pair()).count()
}

/// A random forest graph: at most 12 instances, 2 to 4 labels, |w| ≤ 3.
pub fn acyclic_case(seed: u64) -> RandomGraph {
    let mut r = rng(seed);
    let n = r.random_range(1..=12);
    let labels = r.random_range(2..=4);
    random_graph(&mut r, n, labels, Pairs::Forest(0.7), 3.0)
}

/// A random graph with at least one cycle: at most 10 instances, pair
/// density at most 0.4, |w| ≤ 2.5.
pub fn loopy_case(seed: u64) -> RandomGraph {
    let mut r = rng(seed);
    loop {
        let n = r.random_range(3..=10);
        let labels = r.random_range(2..=4);
        let density = r.random_range(0.15..=0.4);
        let g = random_graph(&mut r, n, labels, Pairs::Density(density), 2.5);
        if pair_count(&g.graph) + components(&g.graph).len() > n {
            return g;
        }
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs the weight M-step to convergence against frozen posterior marginals
/// of a random forest graph and returns the largest violation of
/// |E_Φ[f] − E_q[f]| ≤ 1e-3 + 2λ|w| (non-positive when stationary).
pub fn stationarity_violation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let labels = r.random_range(2..=3);
    let mut g = random_graph(&mut r, n, labels, Pairs::Forest(0.5), 2.0);
    let cfg = EmConfig {
        weight_steps: 50_000,
        weight_tolerance: Some(1e-6),
        ..Default::default()
    };
    let q = bp_posterior(&g.graph, &g.pred, &cfg.bp).expect("valid graph");
    // Start from weights unrelated to the ones that produced q.
    let ids: Vec<EvidenceId> = g.graph.active().map(|e| e.id).collect();
    for id in &ids {
        g.graph
            .set_weight(*id, r.random_range(-1.0..1.0))
            .expect("finite weight");
    }
    update_weights(&mut g.graph, &q, &cfg).expect("weight update");
    let phi = evidence_only_marginals(&g.graph, &cfg.bp).expect("valid graph");
    let mut worst = f64::NEG_INFINITY;
    for e in g.graph.active().filter(|e| e.learnable) {
        let gap = (expected_feature(&g.graph, e, &phi).unwrap()
            - expected_feature(&g.graph, e, &q).unwrap())
        .abs();
        worst = worst.max(gap - (1e-3 + 2.0 * e.prior_strength * e.weight.abs()));
    }
    worst
}

/// The weight a single learnable factor converges to when the frozen
/// posterior of its only instance puts `q` on its label.
pub fn single_factor_weight(q: f64) -> f64 {
    let c = corpus_from(&["good".into()], 2);
    let good = c.vocabulary().id("good").expect("token");
    let mut g = FactorGraph::new(c);
    g.attach(EvidenceSpec::new(
        EvidenceKind::TokenLabel {
            token: good,
            label: 0,
        },
        Source::Seed,
    ))
    .expect("valid evidence");
    let frozen = Marginals::from_matrix(LabelMatrix::from_rows(&[[q, 1.0 - q]], 2));
    let cfg = EmConfig {
        weight_steps: 20_000,
        weight_tolerance: Some(1e-9),
        ..Default::default()
    };
    update_weights(&mut g, &frozen, &cfg).expect("weight update");
    let w = g.active().next().expect("one evidence").weight;
    w
}

/// Relative error ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖) of the
/// loss gradient for every parameter group, on a random 5-instance batch
/// with soft targets, using central differences with step 1e-5.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let texts = random_texts(&mut r, 5, 12);
    let c = corpus_from(&texts, 3);
    let mut m = AttentionClassifier::for_corpus(
        &c,
        PredictorConfig {
            init_scale: 0.5,
            seed,
            ..Default::default()
        },
    );
    for group in [
        ParamGroup::Output,
        ParamGroup::OutputBias,
        ParamGroup::AttentionBias,
    ] {
        for x in m.param_mut(group) {
            *x = r.random_range(-0.5..0.5);
        }
    }
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| random_distribution(&mut r, 3, 0.0))
        .collect();
    let targets =
        ProbabilisticLabelSet::full(LabelMatrix::from_rows(&rows, 3)).expect("valid targets");
    let (_, grads) = m.loss_and_gradients(&c, &targets);
    let h = 1e-5;
    ParamGroup::ALL
        .into_iter()
        .map(|group| {
            let analytic = grads.dense(group, &m);
            let mut numeric = vec![0.0; analytic.len()];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let orig = m.param(group)[k];
                m.param_mut(group)[k] = orig + h;
                let up = m.loss(&c, &targets);
                m.param_mut(group)[k] = orig - h;
                let down = m.loss(&c, &targets);
                m.param_mut(group)[k] = orig;
                *slot = (up - down) / (2.0 * h);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let denom = (norm(&analytic) + norm(&numeric)).max(1e-300);
            (group.name(), norm(&diff) / denom)
        })
        .collect()
}

fn entropy_nats(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

/// On a random corpus with random marginals, the entropy-strategy SST pick
/// has the smallest Ent(b) over all universe tokens and the FAL pick the
/// largest. Ent(b) is recomputed here from the definition.
pub fn entropy_extremes_hold(seed: u64) -> bool {
    let mut r = rng(seed);
    let n_labels = r.random_range(2..=3);
    let n_docs = r.random_range(5..=30);
    let vocab = r.random_range(3..=10);
    let texts = random_texts(&mut r, n_docs, vocab);
    let c = corpus_from(&texts, n_labels);
    let rows: Vec<Vec<f64>> = (0..n_docs)
        .map(|_| random_distribution(&mut r, n_labels, 0.0))
        .collect();
    let q = Marginals::from_matrix(LabelMatrix::from_rows(&rows, n_labels));
    let universe = build_feature_universe(&c, 1.0, &[]).expect("valid fraction");
    let g = FactorGraph::new(c.clone());
    let ent: Vec<(Predicate, f64)> = universe
        .tokens()
        .iter()
        .map(|&t| {
            let ids: Vec<usize> = (0..n_docs).filter(|&i| c.instance(i).contains(t)).collect();
            let mut mean = vec![0.0; n_labels];
            for &i in &ids {
                for l in 0..n_labels {
                    mean[l] += rows[i][l] / ids.len() as f64;
                }
            }
            (Predicate::Token(t), entropy_nats(&mean))
        })
        .collect();
    let lo = ent.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let hi = ent.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let of = |b: Predicate| {
        ent.iter()
            .find(|e| e.0 == b)
            .map(|e| e.1)
            .expect("scored predicate")
    };

    let psi = Scripted {
        n_labels,
        token_score: vec![1.0; c.vocabulary().len()],
        pred: rows.clone(),
        embeddings: vec![vec![1.0]; n_docs],
    };
    let cfg = ProposerConfig {
        strategy: Strategy::Entropy,
        ..Default::default()
    };
    let sst = prop_sst(
        &g,
        &psi,
        &psi,
        &q,
        &mut ProposalLedger::new(),
        &universe,
        &cfg,
    )
    .expect("scoring");
    let fal = prop_fal(&g, &q, &mut ProposalLedger::new(), &universe, false).expect("scoring");
    let (Some(s), Some(f)) = (sst.first(), fal) else {
        return false;
    };
    let sst_b = s.spec.kind.predicate().expect("token proposal");
    (of(sst_b) - lo).abs() <= 1e-12 && (of(f.predicate) - hi).abs() <= 1e-12
}

/// The worked scorer examples as (name, computed, hand value).
pub fn scorer_examples() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();

    // One occurrence of "good" at attention 0.5 in a doc with q = (0.8, 0.2).
    let c = corpus_from(&["good film".into(), "other thing".into()], 2);
    let good = c.vocabulary().id("good").expect("token");
    let psi = Scripted {
        n_labels: 2,
        token_score: vec![1.0; c.vocabulary().len()],
        pred: vec![vec![0.5, 0.5]; 2],
        embeddings: vec![vec![1.0]; 2],
    };
    let q = Marginals::from_matrix(LabelMatrix::from_rows(&[[0.8, 0.2], [0.5, 0.5]], 2));
    let u = build_feature_universe(&c, 1.0, &[]).expect("valid fraction");
    let r = attn_score(good, 0, &q, &psi, &c, &u).expect("eligible");
    if let ScoreStats::Attention { per_label, .. } = &r.stats {
        out.push(("Attn(good, pos)", per_label[0], 0.5 * 0.8));
        out.push(("Attn(good, neg)", per_label[1], 0.5 * 0.2));
    }
    out.push(("S_token(good, pos)", r.score, 0.5 * 0.8 - 0.5 * 0.2));
    out.push(("S_token recomputed", r.recompute(), 0.3));

    // "good" in two docs with q = (0.9, 0.1) and (0.7, 0.3).
    let c = corpus_from(&["good film".into(), "good plot".into(), "bad".into()], 2);
    let good = c.vocabulary().id("good").expect("token");
    let q = Marginals::from_matrix(LabelMatrix::from_rows(
        &[[0.9, 0.1], [0.7, 0.3], [0.1, 0.9]],
        2,
    ));
    let u = build_feature_universe(&c, 1.0, &[]).expect("valid fraction");
    let r = entropy_score(Predicate::Token(good), &q, &c, &u).expect("eligible");
    let h = -(0.8f64 * 0.8f64.ln() + 0.2f64 * 0.2f64.ln());
    if let ScoreStats::Entropy {
        entropy,
        mean_posterior,
        ..
    } = &r.stats
    {
        out.push(("Ent(good)", *entropy, h));
        out.push(("mean posterior", mean_posterior[0], 0.8));
    }
    out.push(("S_entropy(good)", r.score, 1.0 / h));
    out.push((
        "S_entropy label",
        r.candidate.label().unwrap_or(9) as f64,
        0.0,
    ));

    // Embeddings (1, 0) and (1, 1) now, (1, 0) and (0, 1) at baseline.
    let c = corpus_from(&["a".into(), "b".into()], 2);
    let scripted = |e: Vec<Vec<f64>>| Scripted {
        n_labels: 2,
        token_score: vec![1.0; c.vocabulary().len()],
        pred: vec![vec![0.5, 0.5]; 2],
        embeddings: e,
    };
    let now = scripted(vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
    let base = scripted(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let r = joint_score(0, 1, &now, &base, &c).expect("nonzero embeddings");
    out.push(("S_joint(0, 1)", r.score, 1.0 / 2f64.sqrt()));
    let back = joint_score(1, 0, &now, &base, &c).expect("nonzero embeddings");
    out.push(("S_joint(1, 0)", back.score, 1.0 / 2f64.sqrt()));
    let same = joint_score(0, 1, &now, &now, &c).expect("nonzero embeddings");
    out.push(("S_joint against itself", same.score, 0.0));
    out
}
