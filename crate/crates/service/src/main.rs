use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dym_core::confidence::{decode_confidence, reliability, stratified_sample, stratum};
use dym_core::dsl::{tokens_match, write_corpus, DialogueExample, Split};
use dym_core::gloss::{best_gloss, cycle_consistency_eval, write_audit, GlossAudit};
use dym_core::hitl::{default_thresholds, render_sweep, sweep_thresholds};
use dym_core::model::{confidence_pairs, tune_temperature};
use dym_core::selective::{evaluate, render_header, run_policy, write_records, ConfirmMode, Policy, UserModel};
use dym_service::config::Config;
use dym_service::server::{AppState, CreateSession, Source};
use dym_service::session::{selection_accuracy_by_bin, Selection, Session, SessionMode, SessionSettings};
use dym_service::simulate::simulate_users;
use dym_service::workbench::{inputs, load_corpus, load_grammar, predictions, Workbench};
use tracing::info;

#[derive(Parser)]
#[command(name = "dym", version, about = "Confidence-driven confirmation tools for a calendar parser")]
struct Cli {
    /// Seed for corpus generation, sampling and simulated users.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    All,
    AcceptAll,
    Threshold,
    DidyoumeanChosen,
    DidyoumeanReparsed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ConfirmChosen,
    ConfirmReparsed,
    Select,
}

impl From<ModeArg> for SessionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ConfirmChosen => SessionMode::ConfirmChosen,
            ModeArg::ConfirmReparsed => SessionMode::ConfirmReparsed,
            ModeArg::Select => SessionMode::Select,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum UserArg {
    Oracle,
    Noisy,
    Scripted,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the parse and gloss models.
    Train {
        #[arg(long, default_value = "models")]
        out_dir: PathBuf,
    },
    /// Oracle-assisted decoding across confidence thresholds.
    HitlSweep {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// JSON lines, one report per threshold.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the F-beta-optimal execution threshold on the validation split.
    TuneThreshold {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply decision policies and score them.
    RunPolicy {
        #[arg(long, value_enum, default_value = "all")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Interchange file with external predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Directory for one records file per policy.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Cycle-consistency accuracy of the gloss model.
    GlossEval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the candidate glosses of every example that has one here.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Reliability table and expected calibration error.
    Calibration {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified sample of low-confidence items and a simulated selection
    /// study over it.
    SampleStudy {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Sampled ids, one per line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Drive a running service with simulated users.
    SimulateUsers {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        #[arg(long, value_enum, default_value = "confirm-chosen")]
        mode: ModeArg,
        /// Defaults to the configured or tuned threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        quorum: Option<usize>,
        #[arg(long, value_enum, default_value = "oracle")]
        user: UserArg,
        /// Flip probability of the noisy user.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// JSON object mapping item id to accept, for the scripted user.
        #[arg(long)]
        judgments: Option<PathBuf>,
        /// Where to write the exported records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut out = output(Some(path))?;
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    }
    .with_seed(cli.seed);
    run(cli.command, config)
}

fn run(command: Command, config: Config) -> anyhow::Result<()> {
    match command {
        Command::GenCorpus { out } => {
            let grammar = load_grammar(&config)?;
            let corpus = load_corpus(&config, &grammar)?;
            let mut w = output(out.as_deref())?;
            write_corpus(&mut w, &corpus)?;
            w.flush()?;
            info!(examples = corpus.len(), seed = config.seed, "corpus written");
        }
        Command::Train { out_dir } => {
            let bench = Workbench::build(config)?;
            std::fs::create_dir_all(&out_dir)?;
            bench.parse.save(&out_dir.join("parse.json"))?;
            bench.gloss.save(&out_dir.join("gloss.json"))?;
            for split in [Split::Validation, Split::Test] {
                let pairs = confidence_pairs(&bench.parse, &bench.split(split), bench.max_len());
                let hits = pairs.iter().filter(|(_, ok)| *ok).count();
                println!("{} exact match: {:.4}", split.as_str(), hits as f64 / pairs.len().max(1) as f64);
            }
        }
        Command::HitlSweep { split, out } => {
            let bench = Workbench::build(config)?;
            let thresholds = bench.config.hitl.thresholds.clone().unwrap_or_else(default_thresholds);
            let reports = sweep_thresholds(&bench.parse, &bench.split(split.into()), &thresholds, bench.max_len());
            if let Some(p) = out {
                write_json_lines(&p, &reports)?;
            }
            print!("{}", render_sweep(&reports));
        }
        Command::TuneThreshold { out } => {
            let bench = Workbench::build(config)?;
            let tuning = bench.threshold()?;
            if let Some(p) = out {
                let mut w = output(Some(&p))?;
                serde_json::to_writer_pretty(&mut w, &tuning)?;
                w.flush()?;
            }
            println!("threshold {:.2} (validation F-beta {:.4})", tuning.threshold, tuning.score);
        }
        Command::RunPolicy { policy, split, predictions: pred, out_dir } => {
            let bench = Workbench::build(config)?;
            let examples = bench.split(split.into());
            let decodes = predictions(&bench, &examples, pred.as_deref())?;
            let inputs = inputs(&examples, &decodes);
            let tau = bench.threshold()?.threshold;
            let user = bench.config.selective.user.clone();
            let all = [
                (PolicyArg::AcceptAll, "accept", Policy::AcceptAll),
                (PolicyArg::Threshold, "tuned", Policy::Threshold { threshold: tau }),
                (
                    PolicyArg::DidyoumeanChosen,
                    "chosen",
                    Policy::DidYouMean { threshold: tau, mode: ConfirmMode::Chosen, user: user.clone() },
                ),
                (
                    PolicyArg::DidyoumeanReparsed,
                    "reparsed",
                    Policy::DidYouMean { threshold: tau, mode: ConfirmMode::Reparsed, user },
                ),
            ];
            println!("threshold {tau:.2}");
            println!("{}", render_header());
            for (arg, label, p) in all {
                if policy != PolicyArg::All && policy != arg {
                    continue;
                }
                let records = run_policy(&p, &inputs, &bench.policy_models())?;
                let report = evaluate::<f64>(&records)?;
                println!("{}", report.render_row(label));
                if let Some(dir) = &out_dir {
                    let mut w = output(Some(&dir.join(format!("{}.jsonl", p.name()))))?;
                    write_records(&mut w, &records)?;
                    w.flush()?;
                }
            }
        }
        Command::GlossEval { split, audit } => {
            let bench = Workbench::build(config)?;
            let examples = bench.split(split.into());
            let (beam, max_len) = (bench.config.decode.beam, bench.max_len());
            let report = cycle_consistency_eval(&bench.gloss, &bench.parse, &examples, beam, max_len);
            println!("cycle-consistency accuracy: {:.4} on {} examples", report.accuracy, examples.len());
            if let Some(p) = audit {
                let audits: Vec<GlossAudit> = examples
                    .iter()
                    .filter_map(|ex| {
                        best_gloss(&bench.gloss, &bench.parse, ex, ex.gold.tokens(), beam, max_len)
                            .ok()
                            .map(|c| GlossAudit::new(ex.id.clone(), &c))
                    })
                    .collect();
                let mut w = output(Some(&p))?;
                write_audit(&mut w, &audits)?;
                w.flush()?;
            }
        }
        Command::Calibration { split, predictions: pred, out } => {
            let bench = Workbench::build(config)?;
            let examples = bench.split(split.into());
            let decodes = predictions(&bench, &examples, pred.as_deref())?;
            let pairs: Vec<(f64, bool)> = examples
                .iter()
                .zip(&decodes)
                .map(|(ex, d)| (decode_confidence(d), d.terminated && tokens_match(&d.tokens, ex.gold.tokens())))
                .collect();
            let report = reliability(&pairs, bench.config.calibration.bins)?;
            if let Some(p) = out {
                let mut w = output(Some(&p))?;
                serde_json::to_writer_pretty(&mut w, &report)?;
                w.flush()?;
            }
            print!("{}", report.render_table());
            if pred.is_none() {
                let curve = tune_temperature(
                    &bench.parse,
                    &bench.split(Split::Validation),
                    &bench.config.calibration.temperatures,
                    bench.config.calibration.bins,
                    bench.max_len(),
                )?;
                println!("validation ECE by temperature:");
                for p in &curve.points {
                    println!("  T={:<5.2} ece={:.4} acc={:.4}", p.temperature, p.ece, p.accuracy);
                }
                println!("best temperature {:.2}", curve.best);
            }
        }
        Command::SampleStudy { split, out } => {
            let bench = Workbench::build(config)?;
            let study = bench.config.study;
            let examples = bench.split(split.into());
            let decodes = bench.decodes(&examples);
            let scored: Vec<(String, f64)> = examples
                .iter()
                .zip(&decodes)
                .filter(|(_, d)| d.terminated)
                .map(|(ex, d)| (ex.id.clone(), decode_confidence(d)))
                .collect();
            let ids = stratified_sample(&scored, study.bins, study.per_bin, study.max_conf, bench.config.seed)
                .with_context(|| {
                    let mut counts = vec![0usize; study.bins];
                    for (_, c) in &scored {
                        if let Some(b) = stratum(*c, study.bins, study.max_conf) {
                            counts[b] += 1;
                        }
                    }
                    format!("{} per bin requested; items per bin: {counts:?}", study.per_bin)
                })?;
            if let Some(p) = &out {
                let mut w = output(Some(p))?;
                for id in &ids {
                    writeln!(w, "{id}")?;
                }
                w.flush()?;
            }
            let by_id: HashMap<&str, usize> = examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
            let chosen: Vec<DialogueExample> = ids.iter().map(|id| examples[by_id[id.as_str()]].clone()).collect();
            let chosen_decodes: Vec<_> = ids.iter().map(|id| decodes[by_id[id.as_str()]].clone()).collect();
            let runtime = bench.runtime();
            let settings = SessionSettings {
                mode: SessionMode::Select,
                threshold: 1.01,
                quorum: 1,
                seed: bench.config.seed,
            };
            let mut session = Session::create("study", &inputs(&chosen, &chosen_decodes), &runtime, settings, bench.world())?;
            let open: Vec<(String, usize)> = session
                .state()
                .items
                .iter()
                .filter(|i| !i.state.is_terminal())
                .map(|i| {
                    let pick = i.candidates.iter().position(|c| c.correct).unwrap_or(0);
                    (i.id.clone(), pick)
                })
                .collect();
            for (id, pick) in open {
                session.submit_selection(&runtime, &id, Selection::Index(pick))?;
            }
            println!("{} sampled items; oracle selection accuracy by confidence bin:", ids.len());
            println!("{:>11}  {:>5}  {:>6}  {:>6}", "confidence", "n", "before", "after");
            for b in selection_accuracy_by_bin(session.state(), study.bins, study.max_conf) {
                println!(
                    "{:>5.2}-{:<5.2}  {:>5}  {:>6.2}  {:>6.2}",
                    b.lower, b.upper, b.count, b.before, b.after
                );
            }
        }
        Command::Serve { addr } => {
            let addr = addr.unwrap_or_else(|| config.service.addr.clone());
            let bench = Workbench::build(config)?;
            let (quorum, seed, log_dir) = (
                bench.config.service.quorum,
                bench.config.seed,
                bench.config.service.log_dir.clone(),
            );
            let state = AppState::new(bench.runtime(), bench.corpus.clone(), bench.world())
                .with_defaults(quorum, seed)
                .with_log_dir(log_dir);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                info!(addr = %listener.local_addr()?, "serving");
                dym_service::server::serve(Arc::new(state), listener).await?;
                anyhow::Ok(())
            })?;
        }
        Command::SimulateUsers {
            url,
            mode,
            threshold,
            split,
            offset,
            limit,
            quorum,
            user,
            epsilon,
            judgments,
            out,
        } => {
            let grammar = load_grammar(&config)?;
            let corpus = load_corpus(&config, &grammar)?;
            let gold: HashMap<String, Vec<String>> =
                corpus.iter().map(|e| (e.id.clone(), e.gold.tokens().to_vec())).collect();
            let user = match (user, judgments) {
                (UserArg::Oracle, _) => UserModel::Oracle,
                (UserArg::Noisy, _) => UserModel::Noisy { epsilon, seed: config.seed },
                (UserArg::Scripted, Some(p)) => {
                    let file = File::open(&p).with_context(|| format!("judgments {}", p.display()))?;
                    UserModel::Scripted(serde_json::from_reader(BufReader::new(file))?)
                }
                (UserArg::Scripted, None) => bail!("--user scripted needs --judgments"),
            };
            let threshold = match threshold.or(config.selective.threshold) {
                Some(t) => t,
                None => Workbench::build(config.clone())?.threshold()?.threshold,
            };
            let request = CreateSession {
                mode: mode.into(),
                threshold,
                quorum,
                seed: Some(config.seed),
                source: Source::Corpus { split: split.into(), offset, limit },
            };
            let rt = tokio::runtime::Runtime::new()?;
            let sim = rt.block_on(simulate_users(&url, &request, &user, &gold))?;
            if let Some(p) = out {
                std::fs::write(&p, &sim.export).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("session {} ({} items)", sim.session.session_id, sim.session.items);
            println!("{}", render_header());
            println!("{}", sim.report.render_row(mode_label(mode)));
        }
    }
    Ok(())
}

fn mode_label(mode: ModeArg) -> &'static str {
    match mode {
        ModeArg::ConfirmChosen => "chosen",
        ModeArg::ConfirmReparsed => "reparsed",
        ModeArg::Select => "select",
    }
}
