mod common;

use common::*;
use proptest::prelude::*;
use s4_core::evidence::{EvidenceKind, EvidenceSpec, FactorGraph, Source};
use s4_core::inference::{
    bp_posterior, brute_force_posterior, evidence_only_marginals, expected_feature, BpConfig,
    Schedule,
};
use s4_core::LabelMatrix;

#[test]
fn bp_is_exact_on_forests() {
    for seed in 0..60 {
        let g = acyclic_case(seed);
        let err = bp_vs_exact(&g, &BpConfig::default(), max_abs_diff);
        assert!(err <= 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn loopy_bp_is_close_in_the_median() {
    let errs: Vec<f64> = (0..40)
        .map(|seed| {
            bp_vs_exact(
                &loopy_case(1000 + seed),
                &BpConfig::default(),
                total_variation,
            )
        })
        .collect();
    assert!(median(errs.clone()) <= 0.05, "{errs:?}");
}

#[test]
fn schedules_agree_on_forests() {
    let sync = BpConfig {
        schedule: Schedule::Synchronous,
        ..Default::default()
    };
    for seed in 0..30 {
        let g = acyclic_case(500 + seed);
        let a = bp_posterior(&g.graph, &g.pred, &BpConfig::default()).unwrap();
        let b = bp_posterior(&g.graph, &g.pred, &sync).unwrap();
        for i in 0..g.graph.n_instances() {
            assert!(max_abs_diff(a.get(i).unwrap(), b.get(i).unwrap()) < 1e-8);
        }
    }
}

#[test]
fn marginals_are_normalized_even_when_loopy() {
    for seed in 0..30 {
        let g = loopy_case(2000 + seed);
        let m = bp_posterior(&g.graph, &g.pred, &BpConfig::default()).unwrap();
        assert!(m.probs.max_normalization_error() < 1e-9);
        assert!(m.probs.as_slice().iter().all(|p| *p >= 0.0));
    }
}

#[test]
fn exact_marginals_respect_label_swap_symmetry() {
    // Two labels: negating every unary weight and swapping the predictor
    // columns swaps the marginals. Agreement factors are label-symmetric.
    for seed in 0..20 {
        let mut r = rng(3000 + seed);
        let g = random_graph(&mut r, 6, 2, Pairs::Density(0.3), 2.0);
        let mut flipped = FactorGraph::new(g.graph.corpus().clone());
        for e in g.graph.active() {
            let kind = match e.kind {
                EvidenceKind::TokenLabel { token, label } => EvidenceKind::TokenLabel {
                    token,
                    label: 1 - label,
                },
                EvidenceKind::FeatureLabel { predicate, label } => EvidenceKind::FeatureLabel {
                    predicate,
                    label: 1 - label,
                },
                EvidenceKind::InstanceLabel { instance, label } => EvidenceKind::InstanceLabel {
                    instance,
                    label: 1 - label,
                },
                k => k,
            };
            flipped
                .attach(EvidenceSpec::new(kind, Source::Seed).with_weight(e.weight))
                .unwrap();
        }
        let rows: Vec<[f64; 2]> = g.pred.iter_rows().map(|p| [p[1], p[0]]).collect();
        let swapped = LabelMatrix::from_rows(&rows, 2);
        let all: Vec<usize> = (0..6).collect();
        let a = brute_force_posterior(&g.graph, &g.pred, &all).unwrap();
        let b = brute_force_posterior(&flipped, &swapped, &all).unwrap();
        for i in 0..6 {
            let (p, q) = (a.get(i).unwrap(), b.get(i).unwrap());
            assert!((p[0] - q[1]).abs() < 1e-12 && (p[1] - q[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn pair_expectation_matches_exact_pair_marginal() {
    let c = corpus_from(&["doc0 ta".into(), "doc1".into()], 3);
    let mut g = FactorGraph::new(c.clone());
    let ta = c.vocabulary().id("ta").unwrap();
    g.attach(EvidenceSpec::new(
        EvidenceKind::TokenLabel {
            token: ta,
            label: 2,
        },
        Source::Seed,
    ))
    .unwrap();
    let pid = g
        .attach(EvidenceSpec::new(EvidenceKind::pair(0, 1), Source::Seed).with_weight(1.3))
        .unwrap();
    let pred = LabelMatrix::from_rows(&[[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]], 3);
    let bp = bp_posterior(&g, &pred, &BpConfig::default()).unwrap();
    let got = expected_feature(&g, g.get(pid).unwrap(), &bp).unwrap();

    // Enumerate the 9 joint assignments by hand.
    let w_tok = s4_core::evidence::DEFAULT_WEIGHT;
    let (mut z, mut agree) = (0.0, 0.0);
    for a in 0..3 {
        for b in 0..3 {
            let mut p = pred.row(0)[a] * pred.row(1)[b];
            if a == 2 {
                p *= w_tok.exp();
            }
            if a == b {
                p *= 1.3f64.exp();
                agree += p;
            }
            z += p;
        }
    }
    assert!((got - agree / z).abs() <= 1e-8, "{got} vs {}", agree / z);
}

#[test]
fn evidence_only_ignores_the_predictor_and_matches_closed_form() {
    let c = corpus_from(&["doc0 ta".into(), "doc1".into()], 2);
    let mut g = FactorGraph::new(c.clone());
    let ta = c.vocabulary().id("ta").unwrap();
    g.attach(EvidenceSpec::new(
        EvidenceKind::TokenLabel {
            token: ta,
            label: 0,
        },
        Source::Seed,
    ))
    .unwrap();
    let m = evidence_only_marginals(&g, &BpConfig::default()).unwrap();
    let w = s4_core::evidence::DEFAULT_WEIGHT;
    assert!((m.get(0).unwrap()[0] - w.exp() / (w.exp() + 1.0)).abs() < 1e-12);
    assert_eq!(m.get(1).unwrap(), &[0.5, 0.5]);
}

proptest! {
    #[test]
    fn raising_a_true_unary_weight_never_lowers_its_label(
        w1 in -5.0f64..5.0,
        dw in 0.0f64..5.0,
        p in 0.01f64..0.99,
    ) {
        let c = corpus_from(&["doc0 ta".into()], 2);
        let ta = c.vocabulary().id("ta").unwrap();
        let pred = LabelMatrix::from_rows(&[[p, 1.0 - p]], 2);
        let q = |w: f64| {
            let mut g = FactorGraph::new(c.clone());
            g.attach(EvidenceSpec::new(EvidenceKind::TokenLabel { token: ta, label: 0 }, Source::Seed).with_weight(w))
                .unwrap();
            bp_posterior(&g, &pred, &BpConfig::default()).unwrap().get(0).unwrap()[0]
        };
        prop_assert!(q(w1 + dw) >= q(w1) - 1e-15);
    }

    #[test]
    fn forests_match_enumeration(seed in 10_000u64..20_000) {
        let g = acyclic_case(seed);
        prop_assert!(bp_vs_exact(&g, &BpConfig::default(), max_abs_diff) <= 1e-8);
    }
}
