//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gating criterion fails.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use s4_core::corpus::{read_records, Corpus, Format, LoadOptions, OracleAccess};
use s4_core::evidence::{EvidenceKind, EvidenceSpec, FactorGraph, Predicate, Source};
use s4_core::inference::{bp_posterior, BpConfig};
use s4_core::learning::{dpl_learn, EmConfig};
use s4_core::oracle::{simulate_oracle, OracleConfig};
use s4_core::proposers::{Decision, Origin, ProposerConfig, Strategy};
use s4_core::s4::{
    history_csv, instance_seeds, pseudo_label_sequence, run_s4, self_train_baseline, EvalData,
    NoHuman, SelfTrainConfig,
};
use s4_core::synthetic::SyntheticConfig;
use s4_core::{
    AttentionClassifier, LabelMatrix, OracleChannel, Predictor, PredictorConfig, S4Config, S4Run,
};

const MINUTE: Duration = Duration::from_secs(60);

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, name: &str, pass: bool, detail: String, took: Duration) {
        if !pass {
            self.failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag}  {name}: {detail} [{:.1}s]", took.as_secs_f64());
    }
}

fn inference_correctness() -> (bool, String) {
    let acyclic = (0..200)
        .map(|s| bp_vs_exact(&acyclic_case(s), &BpConfig::default(), max_abs_diff))
        .fold(0.0, f64::max);
    let loopy: Vec<f64> = (0..200)
        .map(|s| bp_vs_exact(&loopy_case(1000 + s), &BpConfig::default(), total_variation))
        .collect();
    let tv = median(loopy);
    (
        acyclic <= 1e-8 && tv <= 0.05,
        format!("acyclic max error {acyclic:.2e} (<= 1e-8), loopy median TV {tv:.4} (<= 0.05)"),
    )
}

fn gradient_check() -> (bool, String) {
    let worst = (0..3)
        .flat_map(gradient_errors)
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    (
        worst.1 <= 1e-4,
        format!(
            "worst relative error {:.2e} in {} (<= 1e-4)",
            worst.1, worst.0
        ),
    )
}

fn stationarity() -> (bool, String) {
    let worst = (0..20)
        .map(stationarity_violation)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut closed = 0.0f64;
    for q in [0.6, 0.75, 0.9] {
        closed = closed.max((single_factor_weight(q) - (q / (1.0 - q)).ln()).abs());
    }
    (
        worst <= 0.0 && closed <= 1e-3,
        format!("largest excess over tolerance {worst:.2e} (<= 0), log-odds error {closed:.2e} (<= 1e-3)"),
    )
}

fn toy_set() -> Planted {
    Planted::generate(&SyntheticConfig {
        n_train: 200,
        n_test: 50,
        noise_vocab: 300,
        ..Default::default()
    })
}

fn special_cases() -> (bool, String) {
    let p = toy_set();
    let gold = p.train_gold();

    // (a) hard gold evidence on every instance.
    let labeled: Vec<(usize, usize)> = gold.iter().copied().enumerate().collect();
    let mut g = FactorGraph::new(p.train.clone());
    for spec in instance_seeds(&labeled) {
        g.attach(spec).expect("instance seed");
    }
    let mut psi = AttentionClassifier::for_corpus(&p.train, PredictorConfig::default());
    let one_hot = LabelMatrix::one_hot(&gold, 2);
    let first = bp_posterior(&g, &psi.predict_all(&p.train), &BpConfig::default()).expect("bp");
    let mut em = EmConfig::default();
    em.train.epochs = 2;
    let out = dpl_learn(&mut g, &mut psi, &em, None).expect("dpl");
    let err_a = max_abs_diff(first.probs.as_slice(), one_hot.as_slice())
        .max(max_abs_diff(out.q.probs.as_slice(), one_hot.as_slice()));

    // (b) the instance-label loop against the self-training baseline.
    let labeled: Vec<(usize, usize)> = (0..20).map(|i| (i, gold[i])).collect();
    let st = SelfTrainConfig {
        rounds: 4,
        threshold: 0.0,
        batch: 10,
    };
    let mut base = S4Config::default();
    base.em.train.epochs = 2;
    base.em.em_iterations = 2;
    let baseline =
        self_train_baseline(p.train.clone(), &labeled, &st, &base, None).expect("self-training");
    let cfg = S4Config {
        outer_iterations: 4,
        budget: 0,
        sst: Some(ProposerConfig {
            strategy: Strategy::InstanceConfidence,
            batch: Some(10),
            instance_threshold: 0.0,
            conjunctions: false,
        }),
        max_sst_steps: 1,
        sst_weight: s4_core::evidence::HARD_WEIGHT,
        sst_learnable: false,
        ..base
    };
    let mut run = S4Run::new(p.train.clone(), instance_seeds(&labeled), cfg, None).expect("run");
    run.run(&mut NoHuman).expect("run");
    let a = pseudo_label_sequence(run.ledger());
    let b = pseudo_label_sequence(baseline.ledger());
    (
        err_a <= 1e-6 && a == b && a.len() == 40,
        format!(
            "(a) one-hot error {err_a:.2e} (<= 1e-6); (b) {} pseudo-labels, sequences {}",
            a.len(),
            if a == b { "identical" } else { "differ" }
        ),
    )
}

fn scorer_exactness() -> (bool, String) {
    let worst = scorer_examples()
        .into_iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let corpora = 500;
    let held = (0..corpora).filter(|&s| entropy_extremes_hold(s)).count();
    (
        worst <= 1e-9 && held == corpora as usize,
        format!("worked examples max error {worst:.2e} (<= 1e-9); entropy extremes held on {held}/{corpora} corpora"),
    )
}

fn token_run(p: &Planted, seeds: usize, cfg: S4Config) -> (S4Run<AttentionClassifier>, Duration) {
    let start = Instant::now();
    let run = run_s4(
        p.train.clone(),
        p.seeds(seeds),
        cfg,
        Some(p.eval.clone()),
        &mut NoHuman,
    )
    .expect("s4 run");
    (run, start.elapsed())
}

fn final_accuracy<P: Predictor>(run: &S4Run<P>) -> f64 {
    run.history()
        .last()
        .and_then(|r| r.test_accuracy)
        .expect("evaluated run")
}

fn dpl_config() -> S4Config {
    S4Config {
        outer_iterations: 1,
        sst: None,
        ..Default::default()
    }
}

fn sst_config() -> S4Config {
    S4Config {
        outer_iterations: 25,
        ..Default::default()
    }
}

fn sst_terminated(run: &S4Run<AttentionClassifier>) -> bool {
    run.history()
        .iter()
        .all(|r| r.inner_steps <= 50 && !r.sst_capped)
}

struct EndToEnd {
    sst: S4Run<AttentionClassifier>,
}

fn synthetic_end_to_end(p: &Planted) -> (bool, String, EndToEnd) {
    let (dpl, t_dpl) = token_run(p, 3, dpl_config());
    let (sst, t_sst) = token_run(p, 3, sst_config());
    let (dpl_acc, sst_acc) = (final_accuracy(&dpl), final_accuracy(&sst));
    let margin = sst_acc - dpl_acc;

    let first: Vec<&EvidenceKind> = sst
        .ledger()
        .records()
        .iter()
        .filter(|r| matches!(r.origin, Origin::Sst(_)))
        .flat_map(|r| r.candidates.iter())
        .take(20)
        .collect();
    let planted = first.iter().filter(|k| p.is_planted(k)).count();

    let start = Instant::now();
    let gold = p.train_gold();
    let labeled: Vec<(usize, usize)> = (0..50).map(|i| (i, gold[i])).collect();
    let st = SelfTrainConfig {
        rounds: 25,
        threshold: 0.0,
        batch: 10,
    };
    let self_trained = self_train_baseline(
        p.train.clone(),
        &labeled,
        &st,
        &S4Config::default(),
        Some(p.eval.clone()),
    )
    .expect("self-training");
    let t_st = start.elapsed();
    let st_acc = final_accuracy(&self_trained);

    let slowest = t_dpl.max(t_sst).max(t_st);
    let pass = margin >= 0.05
        && first.len() == 20
        && planted >= 12
        && sst_acc > st_acc
        && slowest < 10 * MINUTE;
    let detail = format!(
        "(i) S4-SST {:.3} vs DPL {:.3}, margin {:+.1} points (>= 5); (ii) {planted}/{} of the first SST proposals planted with correct class (>= 12/20); (iii) S4-SST {:.3} vs self-training with 50 labels {:.3}; slowest run {:.0}s (< 600s)",
        sst_acc,
        dpl_acc,
        100.0 * margin,
        first.len(),
        sst_acc,
        st_acc,
        slowest.as_secs_f64(),
    );
    (pass, detail, EndToEnd { sst })
}

fn fal_value(p: &Planted) -> (bool, String) {
    let (dpl, _) = token_run(p, 2, dpl_config());
    let oracle = simulate_oracle(
        &p.train,
        &OracleConfig {
            l1: 3e-3,
            ..Default::default()
        },
        &OracleAccess::grant(),
    )
    .expect("oracle");
    let (budget, iterations) = (10, 10);
    let cfg = S4Config {
        outer_iterations: iterations,
        budget,
        sst: None,
        ..Default::default()
    };
    let mut run = S4Run::new(p.train.clone(), p.seeds(2), cfg, Some(p.eval.clone())).expect("run");
    run.run(&mut OracleChannel { oracle: &oracle })
        .expect("fal run");
    let queries: Vec<_> = run
        .ledger()
        .records()
        .iter()
        .filter(|r| r.origin == Origin::Fal)
        .collect();
    let in_universe = queries.iter().all(|r| {
        r.candidates.iter().all(|k| match k.predicate() {
            Some(Predicate::Token(t)) => run.universe().contains(t),
            _ => false,
        })
    });
    let accepted = queries
        .iter()
        .filter(|r| matches!(r.decision, Decision::Accepted { .. }))
        .count();
    let (dpl_acc, fal_acc) = (final_accuracy(&dpl), final_accuracy(&run));
    let expected = budget.min(iterations);
    (
        fal_acc >= dpl_acc && in_universe && queries.len() == expected,
        format!(
            "S4-FAL {fal_acc:.3} vs DPL {dpl_acc:.3} (>=); {} queries ({accepted} accepted), expected {expected}; all in universe: {in_universe}",
            queries.len()
        ),
    )
}

fn determinism(p: &Planted, e2e: &EndToEnd) -> (bool, String) {
    let cfg = S4Config {
        outer_iterations: 5,
        ..Default::default()
    };
    let (a, _) = token_run(p, 3, cfg.clone());
    let (b, _) = token_run(p, 3, cfg);
    let identical = a.history() == b.history()
        && history_csv(a.history()) == history_csv(b.history())
        && a.ledger() == b.ledger()
        && a.predictor().same_parameters(b.predictor());
    let rows: Vec<_> = e2e.sst.history().iter().chain(a.history()).collect();
    let max_inner = rows.iter().map(|r| r.inner_steps).max().unwrap_or(0);
    let terminated = sst_terminated(&e2e.sst) && sst_terminated(&a);
    (
        identical && terminated,
        format!(
            "repeated runs {}; {} SST loops, longest {max_inner} inner steps (<= 50), capped: {}",
            if identical { "bit-identical" } else { "differ" },
            rows.len(),
            !terminated
        ),
    )
}

/// Paths to labeled review files, one record per line, from
/// `S4_IMDB_TRAIN` and `S4_IMDB_TEST`.
fn imdb_paths() -> Option<(PathBuf, PathBuf)> {
    let train = PathBuf::from(std::env::var_os("S4_IMDB_TRAIN")?);
    let test = PathBuf::from(std::env::var_os("S4_IMDB_TEST")?);
    (train.exists() && test.exists()).then_some((train, test))
}

fn imdb_trend((train_path, test_path): (PathBuf, PathBuf)) -> Result<(bool, String), String> {
    let take = |path: &PathBuf| -> Result<Vec<_>, String> {
        let mut recs = read_records(path, Format::from_path(path)).map_err(|e| e.to_string())?;
        recs.truncate(2000);
        Ok(recs)
    };
    let train = Arc::new(
        Corpus::from_records(&take(&train_path)?, &LoadOptions::default())
            .map_err(|e| e.to_string())?,
    );
    let test = Corpus::from_records(
        &take(&test_path)?,
        &LoadOptions {
            vocabulary: Some(train.vocabulary().clone()),
            labels: Some(train.labels().to_vec()),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let gold = test
        .gold_labels(&OracleAccess::grant())
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or("unlabeled test record")?;
    let eval = EvalData {
        corpus: Arc::new(test),
        gold,
    };
    // Six seed tokens: the strongest oracle tokens per class.
    let oracle = simulate_oracle(&train, &OracleConfig::default(), &OracleAccess::grant())
        .map_err(|e| e.to_string())?;
    let per_class = 6 / train.n_labels().max(1);
    let seeds: Vec<EvidenceSpec> = (0..train.n_labels())
        .flat_map(|l| {
            let train = &train;
            oracle
                .tokens(l)
                .iter()
                .take(per_class)
                .filter_map(move |t| {
                    let token = train.vocabulary().id(&t.token)?;
                    Some(EvidenceSpec::new(
                        EvidenceKind::TokenLabel { token, label: l },
                        Source::Seed,
                    ))
                })
        })
        .collect();
    let run = |cfg: S4Config| {
        run_s4(
            train.clone(),
            seeds.clone(),
            cfg,
            Some(eval.clone()),
            &mut NoHuman,
        )
        .map_err(|e| e.to_string())
    };
    let dpl = final_accuracy(&run(dpl_config())?);
    let sst = final_accuracy(&run(S4Config {
        outer_iterations: 10,
        ..Default::default()
    })?);
    Ok((
        sst > dpl,
        format!(
            "S4-SST {sst:.3} vs DPL {dpl:.3} with {} seed tokens",
            seeds.len()
        ),
    ))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };

    let ((pass, detail), took) = timed(inference_correctness);
    suite.report("inference correctness", pass && took < MINUTE, detail, took);

    let ((pass, detail), took) = timed(gradient_check);
    suite.report("gradient check", pass && took < MINUTE, detail, took);

    let ((pass, detail), took) = timed(stationarity);
    suite.report("M-step stationarity", pass, detail, took);

    let ((pass, detail), took) = timed(special_cases);
    suite.report("special-case reductions", pass, detail, took);

    let ((pass, detail), took) = timed(scorer_exactness);
    suite.report("scorer exactness", pass, detail, took);

    let p = Planted::default_corpus();
    let ((pass, detail, e2e), took) = timed(|| synthetic_end_to_end(&p));
    suite.report("synthetic end-to-end", pass, detail, took);

    let ((pass, detail), took) = timed(|| fal_value(&p));
    suite.report("FAL value", pass, detail, took);

    let ((pass, detail), took) = timed(|| determinism(&p, &e2e));
    suite.report("determinism and convergence", pass, detail, took);

    match imdb_paths() {
        None => println!(
            "SKIP  IMDb trend check (non-gating): set S4_IMDB_TRAIN and S4_IMDB_TEST to run it"
        ),
        Some(paths) => {
            let start = Instant::now();
            let took = |s: Instant| s.elapsed().as_secs_f64();
            match imdb_trend(paths) {
                Ok((pass, detail)) => println!(
                    "{}  IMDb trend check (non-gating): {detail} [{:.1}s]",
                    if pass { "PASS" } else { "FAIL" },
                    took(start)
                ),
                Err(e) => println!("SKIP  IMDb trend check (non-gating): {e}"),
            }
        }
    }

    if suite.failed == 0 {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} gating criteria failed", suite.failed);
        ExitCode::FAILURE
    }
}
