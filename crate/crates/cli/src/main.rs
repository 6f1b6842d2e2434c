//! Command line entry points for learning, self-supervision and evaluation.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 3 when a
//! run fails.

mod config;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;
use s4_core::corpus::{Corpus, OracleAccess};
use s4_core::evidence::{graph_from_records, load_evidence_file};
use s4_core::inference::bp_posterior;
use s4_core::oracle::{simulate_oracle, Oracle, OracleConfig};
use s4_core::proposers::{score_candidates, Strategy};
use s4_core::s4::{
    evaluate, run_s4, self_train_baseline, DecisionChannel, NoHuman, SelfTrainConfig,
};
use s4_core::settings::{load_eval, load_train, RunInputs, Settings, SstStrategy};
use s4_core::synthetic::{SyntheticConfig, SyntheticCorpus};
use s4_core::{AttentionClassifier, OracleChannel, Predictor, S4Config, S4Run};
use s4_service::api::{RunRequest, RunState};
use s4_service::{Service, ServiceConfig};

use config::{Config, Files};

#[derive(Parser)]
#[command(
    name = "s4",
    version,
    about = "Self-supervised text classification with virtual evidence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn from seed evidence once, without self-supervision.
    RunDpl(RunArgs),
    /// Run the self-supervision loop.
    RunS4(S4Args),
    /// Build a simulated expert from gold labels.
    MakeOracle(OracleArgs),
    /// Self-train from the first N labeled instances.
    SelfTrain(SelfTrainArgs),
    /// Write the top-scoring self-supervision candidates.
    Score(ScoreArgs),
    /// Accuracy of a saved model on a labeled corpus.
    Eval(EvalArgs),
    /// Generate the planted synthetic corpus.
    GenSynthetic(SynthArgs),
    /// Serve the HTTP API for interactive runs.
    Serve(ServeArgs),
    /// Print the manual page.
    Man {
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (.jsonl with text and label, or .tsv label<TAB>text).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Labeled evaluation corpus.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for inference and scoring (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, e.g. --set epochs=2. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed of the predictor.
    #[arg(long)]
    rng_seed: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Seed evidence file (JSON lines).
    #[arg(long = "seed", value_name = "FILE")]
    seed_file: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct S4Args {
    #[command(flatten)]
    run: RunArgs,
    /// Feature query budget T.
    #[arg(long)]
    budget: Option<usize>,
    /// Outer iterations M.
    #[arg(long)]
    outer: Option<usize>,
    /// Self-training proposal strategy.
    #[arg(long, value_parser = ["attention", "entropy", "joint", "none"])]
    strategy: Option<String>,
    /// Answer feature queries with this oracle file.
    #[arg(long, conflicts_with = "interactive")]
    oracle: Option<PathBuf>,
    /// Answer feature queries over HTTP.
    #[arg(long)]
    interactive: bool,
    /// Address for --interactive.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
}

#[derive(Args, Clone)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Tokens kept per class.
    #[arg(long)]
    top_k: Option<usize>,
    /// L1 strength of the unigram model.
    #[arg(long)]
    l1: Option<f64>,
}

#[derive(Args, Clone)]
struct SelfTrainArgs {
    #[command(flatten)]
    common: Common,
    /// Number of labeled instances, taken from the start of the corpus.
    #[arg(long)]
    labeled: Option<usize>,
    /// Self-training rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Minimum confidence of a pseudo-label.
    #[arg(long)]
    threshold: Option<f64>,
    /// Pseudo-labels added per round.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Clone)]
struct ScoreArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Scoring strategy.
    #[arg(long, default_value = "attention", value_parser = ["attention", "entropy", "joint"])]
    strategy: String,
    /// Score against the model and evidence of this checkpoint instead of
    /// learning from the seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of candidates written.
    #[arg(long, default_value_t = 50)]
    top: usize,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory written by a run.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    /// Training documents.
    #[arg(long)]
    n_train: Option<usize>,
    /// Test documents.
    #[arg(long)]
    n_test: Option<usize>,
    /// Seed tokens per class written to seed.jsonl.
    #[arg(long, default_value_t = 3)]
    seed_tokens: usize,
}

#[derive(Args, Clone)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory for run checkpoints and decision logs.
    #[arg(long, default_value = "runs")]
    data_dir: PathBuf,
    /// Report a run as paused after this many seconds without a decision.
    #[arg(long)]
    decision_timeout: Option<u64>,
}

/// A failure and the exit code it maps to.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunDpl(a) => run_dpl(a),
        Command::RunS4(a) => run_s4_cmd(a),
        Command::MakeOracle(a) => make_oracle(a),
        Command::SelfTrain(a) => self_train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Serve(a) => serve(a),
        Command::Man { out } => man(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(common: &Common, files: Files, settings: Settings) -> Result<Config, Failure> {
    let flags = Config {
        files: Files {
            corpus: common.corpus.clone(),
            eval: common.eval.clone(),
            out: common.out.clone(),
            threads: common.threads,
            ..files
        },
        settings: Settings {
            seed: common.rng_seed,
            ..settings
        },
    };
    let cfg = Config::load(common.config.as_deref(), &common.sets, flags).invalid()?;
    if let Some(n) = cfg.files.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")
            .invalid()?;
    }
    Ok(cfg)
}

fn s4_config(settings: &Settings, base: S4Config) -> Result<S4Config, Failure> {
    settings.apply(base).invalid()
}

fn inputs(cfg: &Config) -> Result<RunInputs, Failure> {
    let corpus = cfg.files.corpus().invalid()?;
    RunInputs::load(
        corpus,
        cfg.files.eval.as_deref(),
        cfg.files.seed_file.as_deref(),
    )
    .invalid()
}

fn report<P: Predictor>(run: &S4Run<P>, out: &Path) -> Outcome {
    run.write_checkpoint(out).runtime()?;
    let last = run.history().last();
    let acc = last
        .and_then(|r| r.test_accuracy)
        .map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "outer iterations {}  evidence {}  feature queries {}  test accuracy {acc}",
        run.history().len(),
        run.graph().active_count(),
        run.ledger().fal_queries(),
    );
    println!("checkpoint and history.csv written to {}", out.display());
    Ok(())
}

fn run_dpl(a: RunArgs) -> Outcome {
    let files = Files {
        seed_file: a.seed_file.clone(),
        ..Default::default()
    };
    let cfg = load_config(&a.common, files, Settings::default())?;
    let s4 = s4_config(&cfg.settings, S4Config::default())?;
    let s4 = S4Config {
        outer_iterations: 1,
        budget: 0,
        sst: None,
        ..s4
    };
    let inputs = inputs(&cfg)?;
    let run = run_s4(inputs.corpus, inputs.seed, s4, inputs.eval, &mut NoHuman).runtime()?;
    report(&run, &cfg.files.out())
}

fn run_s4_cmd(a: S4Args) -> Outcome {
    let files = Files {
        seed_file: a.run.seed_file.clone(),
        oracle: a.oracle.clone(),
        ..Default::default()
    };
    let strategy = a
        .strategy
        .as_deref()
        .map(|s| s.parse::<SstStrategy>())
        .transpose()
        .map_err(|e| anyhow!(e))
        .invalid()?;
    let flags = Settings {
        budget: a.budget,
        outer_iterations: a.outer,
        strategy,
        ..Default::default()
    };
    let cfg = load_config(&a.run.common, files, flags)?;
    let s4 = s4_config(&cfg.settings, S4Config::default())?;
    let out = cfg.files.out();
    if a.interactive {
        return interactive(&cfg, a.listen, &out);
    }
    let oracle = cfg
        .files
        .oracle
        .as_deref()
        .map(Oracle::load)
        .transpose()
        .invalid()?;
    if s4.budget > 0 && oracle.is_none() {
        return Err(anyhow!(
            "a query budget needs --oracle FILE or --interactive"
        ))
        .invalid();
    }
    let inputs = inputs(&cfg)?;
    let mut none = NoHuman;
    let mut with_oracle;
    let channel: &mut dyn DecisionChannel = match &oracle {
        Some(o) => {
            with_oracle = OracleChannel { oracle: o };
            &mut with_oracle
        }
        None => &mut none,
    };
    let run = run_s4(inputs.corpus, inputs.seed, s4, inputs.eval, channel).runtime()?;
    report(&run, &out)
}

/// Starts the run inside the HTTP service and serves until it ends.
fn interactive(cfg: &Config, listen: SocketAddr, out: &Path) -> Outcome {
    let service = Service::new(ServiceConfig {
        data_dir: out.to_path_buf(),
        decision_timeout: None,
    });
    let req = RunRequest {
        corpus: cfg.files.corpus().invalid()?.to_path_buf(),
        eval: cfg.files.eval.clone(),
        seed_file: cfg.files.seed_file.clone(),
        replay: None,
        settings: cfg.settings.clone(),
    };
    let rt = tokio::runtime::Runtime::new().runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .with_context(|| format!("binding {listen}"))
            .invalid()?;
        let started = service.start(req).invalid()?;
        println!("serving run {} on http://{listen}", started.run_id);
        let watcher = service.clone();
        let stopper = service.clone();
        axum::serve(listener, service.router())
            .with_graceful_shutdown(async move {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => stopper.stop(),
                    _ = async {
                        while watcher.status().state.is_active() {
                            tokio::time::sleep(Duration::from_millis(200)).await;
                        }
                    } => {}
                }
            })
            .await
            .runtime()?;
        let status = service.status();
        match status.state {
            RunState::Done => {
                println!(
                    "run finished: {} outer iterations, {} evidences; checkpoint in {}",
                    status.outer_iteration,
                    status.evidence_count,
                    started.checkpoint_dir.display()
                );
                Ok(())
            }
            _ => Err(anyhow!(status
                .error
                .unwrap_or_else(|| "run did not finish".into())))
            .runtime(),
        }
    })
}

fn make_oracle(a: OracleArgs) -> Outcome {
    let files = Files {
        top_k: a.top_k,
        l1: a.l1,
        ..Default::default()
    };
    let cfg = load_config(&a.common, files, Settings::default())?;
    let corpus = load_train(cfg.files.corpus().invalid()?).invalid()?;
    if !corpus.has_gold_labels() {
        return Err(anyhow!("the corpus has no gold labels")).invalid();
    }
    let defaults = OracleConfig::default();
    let oc = OracleConfig {
        top_k: cfg.files.top_k.unwrap_or(defaults.top_k),
        l1: cfg.files.l1.unwrap_or(defaults.l1),
        ..defaults
    };
    let oracle = simulate_oracle(&corpus, &oc, &OracleAccess::grant()).runtime()?;
    let out = cfg.files.out();
    std::fs::create_dir_all(&out).runtime()?;
    let path = out.join("oracle.json");
    oracle.save(&path).runtime()?;
    for (l, name) in oracle.labels().iter().enumerate() {
        println!("{name}: {} tokens", oracle.tokens(l).len());
    }
    println!("oracle written to {}", path.display());
    Ok(())
}

fn self_train(a: SelfTrainArgs) -> Outcome {
    let files = Files {
        labeled: a.labeled,
        rounds: a.rounds,
        threshold: a.threshold,
        pseudo_batch: a.batch,
        ..Default::default()
    };
    let cfg = load_config(&a.common, files, Settings::default())?;
    let base = s4_config(&cfg.settings, S4Config::default())?;
    let inputs = inputs(&cfg)?;
    let n = cfg.files.labeled.unwrap_or(50);
    if n == 0 || n > inputs.corpus.len() {
        return Err(anyhow!("--labeled must be in 1..={}", inputs.corpus.len())).invalid();
    }
    let labeled = first_labeled(&inputs.corpus, n).invalid()?;
    let defaults = SelfTrainConfig::default();
    let st = SelfTrainConfig {
        rounds: cfg.files.rounds.unwrap_or(defaults.rounds),
        threshold: cfg.files.threshold.unwrap_or(defaults.threshold),
        batch: cfg.files.pseudo_batch.unwrap_or(defaults.batch),
    };
    if st.rounds == 0 || st.batch == 0 {
        return Err(anyhow!("--rounds and --batch must be positive")).invalid();
    }
    let run = self_train_baseline(inputs.corpus, &labeled, &st, &base, inputs.eval).runtime()?;
    report(&run, &cfg.files.out())
}

fn first_labeled(corpus: &Corpus, n: usize) -> Result<Vec<(usize, usize)>> {
    corpus
        .gold_labels(&OracleAccess::grant())
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, l)| {
            l.map(|l| (i, l))
                .ok_or_else(|| anyhow!("instance {i} has no gold label"))
        })
        .collect()
}

fn score(a: ScoreArgs) -> Outcome {
    let files = Files {
        seed_file: a.run.seed_file.clone(),
        ..Default::default()
    };
    let cfg = load_config(&a.run.common, files, Settings::default())?;
    let strategy: Strategy = a
        .strategy
        .parse()
        .map_err(|e: String| anyhow!(e))
        .invalid()?;
    let s4 = s4_config(&cfg.settings, S4Config::default())?;
    let inputs = inputs(&cfg)?;
    let reports = match &a.checkpoint {
        Some(dir) => {
            let psi = AttentionClassifier::load(&dir.join("model.bin")).invalid()?;
            check_hash(dir, &inputs.corpus)?;
            let records =
                load_evidence_file(&dir.join("evidence.jsonl"), &inputs.corpus).invalid()?;
            let g = graph_from_records(inputs.corpus.clone(), records).invalid()?;
            let q = bp_posterior(&g, &psi.predict_all(&inputs.corpus), &s4.em.bp).runtime()?;
            let universe = s4_core::corpus::build_feature_universe(
                &inputs.corpus,
                s4.universe_fraction,
                &s4.stop_tokens,
            )
            .runtime()?;
            score_candidates(&g, &psi, &q, &universe, strategy, a.top).runtime()?
        }
        None => {
            let dpl = S4Config {
                outer_iterations: 1,
                budget: 0,
                sst: None,
                ..s4
            };
            let run =
                run_s4(inputs.corpus.clone(), inputs.seed, dpl, None, &mut NoHuman).runtime()?;
            let q = run
                .marginals()
                .ok_or_else(|| anyhow!("no marginals"))
                .runtime()?;
            score_candidates(
                run.graph(),
                run.predictor(),
                q,
                run.universe(),
                strategy,
                a.top,
            )
            .runtime()?
        }
    };
    let out = cfg.files.out();
    std::fs::create_dir_all(&out).runtime()?;
    let path = out.join("scores.csv");
    let mut w = csv::Writer::from_path(&path).runtime()?;
    w.write_record(["rank", "candidate", "score", "stats"])
        .runtime()?;
    for (rank, r) in reports.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            r.candidate.describe(&inputs.corpus),
            r.score.to_string(),
            serde_json::to_string(&r.stats).runtime()?,
        ])
        .runtime()?;
    }
    w.flush().runtime()?;
    for r in reports.iter().take(10) {
        println!(
            "{:>12.6}  {}",
            r.score,
            r.candidate.describe(&inputs.corpus)
        );
    }
    println!("{} candidates written to {}", reports.len(), path.display());
    Ok(())
}

fn check_hash(dir: &Path, corpus: &Corpus) -> Outcome {
    let path = dir.join("corpus.sha256");
    let want = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .invalid()?;
    if want.trim() != corpus.content_hash() {
        return Err(anyhow!(
            "{} was written for a different corpus",
            dir.display()
        ))
        .invalid();
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let cfg = load_config(&a.common, Files::default(), Settings::default())?;
    let train = Arc::new(load_train(cfg.files.corpus().invalid()?).invalid()?);
    check_hash(&a.checkpoint, &train)?;
    let eval_path = cfg
        .files
        .eval
        .as_deref()
        .ok_or_else(|| anyhow!("no evaluation corpus given (use --eval)"))
        .invalid()?;
    let data = load_eval(eval_path, &train).invalid()?;
    let psi = AttentionClassifier::load(&a.checkpoint.join("model.bin")).invalid()?;
    if psi.n_labels() != train.n_labels() {
        return Err(anyhow!(
            "model has {} labels, corpus {}",
            psi.n_labels(),
            train.n_labels()
        ))
        .invalid();
    }
    let acc = evaluate(&psi, &data);
    let correct = (acc * data.gold.len() as f64).round() as usize;
    println!("accuracy {acc:.4} ({correct}/{})", data.gold.len());
    Ok(())
}

fn gen_synthetic(a: SynthArgs) -> Outcome {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        seed: a.seed,
        n_train: a.n_train.unwrap_or(defaults.n_train),
        n_test: a.n_test.unwrap_or(defaults.n_test),
        ..defaults
    };
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(anyhow!("--n-train and --n-test must be positive")).invalid();
    }
    let syn = SyntheticCorpus::generate(&cfg);
    syn.write(&a.out).runtime()?;
    let train = load_train(&a.out.join("train.jsonl")).runtime()?;
    let seed: String = syn
        .seed_tokens(a.seed_tokens)
        .into_iter()
        .map(|(token, label)| {
            let rec = serde_json::json!({
                "kind": "token_label",
                "arguments": [token],
                "label": train.labels()[label],
            });
            rec.to_string() + "\n"
        })
        .collect();
    std::fs::write(a.out.join("seed.jsonl"), seed).runtime()?;
    println!(
        "wrote {} train and {} test documents, params.json and seed.jsonl to {} (corpus hash {})",
        syn.train.len(),
        syn.test.len(),
        a.out.display(),
        train.content_hash()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let config = ServiceConfig {
        data_dir: a.data_dir,
        decision_timeout: a.decision_timeout.map(Duration::from_secs),
    };
    let rt = tokio::runtime::Runtime::new().runtime()?;
    info!("run checkpoints go to {}", config.data_dir.display());
    rt.block_on(s4_service::serve(a.listen, config))
        .with_context(|| format!("serving on {}", a.listen))
        .runtime()
}

fn man(out: Option<PathBuf>) -> Outcome {
    let page = clap_mangen::Man::new(Cli::command());
    let mut buf = Vec::new();
    page.render(&mut buf).runtime()?;
    for sub in Cli::command().get_subcommands() {
        let name = format!("s4-{}", sub.get_name());
        clap_mangen::Man::new(sub.clone().display_name(name))
            .render(&mut buf)
            .runtime()?;
    }
    match out {
        Some(p) => std::fs::write(&p, buf).runtime(),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&buf).runtime()
        }
    }
}
