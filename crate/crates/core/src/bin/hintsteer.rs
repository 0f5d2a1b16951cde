use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use hintsteer::ensemble::{write_stats_csv, EnsembleModel};
use hintsteer::experience::ExperienceStore;
use hintsteer::experiment::{
    build_corpus, collect, compare_runs, plot_sidecar, read_summary, scope_csv, scope_experiment, write_report, Corpus,
    ExperimentConfig,
};
use hintsteer::harness::{evaluate, ArtifactMeta};
use hintsteer::model::LossKind;
use hintsteer::{Error, Result};

/// `println!` that treats a closed stdout as success.
macro_rules! out {
    ($($arg:tt)*) => {
        emit(&format!("{}\n", format_args!($($arg)*)))?
    };
}

#[derive(Parser)]
#[command(
    name = "hintsteer",
    version,
    about = "Learned hint steering against a simulated optimizer"
)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "HINTSTEER_SEED")]
    seed: Option<u64>,
    /// mse, mse-raw or qerror.
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    /// single, e1, e2, e3, e4 or custom.
    #[arg(long, global = true)]
    ensemble: Option<String>,
    #[arg(long = "timeout-ms", global = true)]
    timeout_ms: Option<f64>,
    /// Run directory; defaults to runs/<config name>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write catalogs, query lists and stats.csv.
    Gen,
    /// Collect one chunk of experience.
    Collect {
        /// 0 is the first chunk; later chunks execute the trained model's picks.
        #[arg(long, default_value_t = 0)]
        chunk: u32,
    },
    /// Train models on the collected experience.
    Train {
        /// Continue from the saved checkpoint for the retrain epoch count.
        #[arg(long)]
        resume: bool,
    },
    /// Print the chosen hintset and every prediction for one query.
    Predict {
        #[arg(long)]
        query: String,
    },
    /// Evaluate on the held-out queries.
    Evaluate {
        /// Evaluate freshly initialized models instead of the checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Collect, train, retrain and evaluate in one go.
    Run,
    /// Compare several runs' summary.csv files.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        output: PathBuf,
    },
    /// Train on small, medium and large workload scopes.
    ScopeExperiment {
        #[arg(long, default_value_t = 120)]
        total_train: usize,
        #[arg(long, default_value_t = 40)]
        eval_queries: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            fail("Usage", first);
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn fail(kind: &str, msg: &str) {
    let msg = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    eprintln!("error: kind={kind} msg=\"{msg}\"");
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = cli.loss {
        cfg.loss = l;
    }
    if let Some(e) = &cli.ensemble {
        cfg.ensemble = e.clone();
    }
    if let Some(t) = cli.timeout_ms {
        cfg.timeout_ms = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { summaries, output } = &cli.command {
        return report(summaries, output);
    }
    let cfg = resolve(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    fs::create_dir_all(&out)?;
    let corpus = build_corpus(&cfg)?;
    let meta = cfg.meta(corpus.env.hints.digest());
    let model_dir = out.join("model");
    let experience = out.join("experience.jsonl");
    match cli.command {
        Command::Gen => gen(&cfg, &corpus, &meta, &out),
        Command::Collect { chunk } => {
            let mut store = ExperienceStore::open(&experience, corpus.env.hints.digest())?;
            let model = if chunk > 0 {
                Some(load_model(&model_dir, &corpus)?)
            } else {
                None
            };
            let stats = collect(&cfg, &corpus, &mut store, chunk, model.as_ref())?;
            out!(
                "chunk={chunk} queries={} unique_plans={} executions={} timeouts={} inserted={} total_records={}",
                stats.queries,
                stats.unique_plans,
                stats.executions,
                stats.timeouts,
                stats.inserted,
                store.len()
            );
            Ok(())
        }
        Command::Train { resume } => {
            let store = ExperienceStore::open(&experience, corpus.env.hints.digest())?;
            let settings = cfg.train_settings();
            let (mut ens, epochs) = if resume {
                (load_model(&model_dir, &corpus)?, settings.retrain_epochs)
            } else {
                let mut e = EnsembleModel::untrained(cfg.routing()?, &settings, &corpus.env);
                e.max_pool = cfg.max_pool;
                (e, settings.epochs)
            };
            let reports = ens.train(store.records(), epochs, settings.seed)?;
            ens.save(&model_dir)?;
            for (k, r) in reports {
                out!(
                    "model={k} mean_qloss={:.6} median_qloss={:.6} q90_qloss={:.6}",
                    r.mean_qloss,
                    r.median_qloss,
                    r.q90_qloss
                );
            }
            Ok(())
        }
        Command::Predict { query } => {
            let ens = load_model(&model_dir, &corpus)?;
            let q = corpus
                .train
                .iter()
                .chain(&corpus.eval)
                .find(|q| q.id == query)
                .ok_or_else(|| Error::Config(format!("no query `{query}` in this corpus")))?;
            let p = ens.predict_hintset(&corpus.env, q)?;
            let set = corpus
                .env
                .hints
                .get(p.hintset_id)
                .expect("prediction comes from the catalog");
            out!(
                "query={} model={} hintset={} hints=[{}]",
                q.id,
                p.model,
                p.hintset_id,
                corpus.env.hints.names(set).join(",")
            );
            let mut table = String::from("hintset_id,predicted_reward\n");
            for (id, v) in p.predictions.iter().enumerate() {
                table.push_str(&format!("{id},{v:.6}\n"));
            }
            emit(&table)
        }
        Command::Evaluate { untrained } => {
            let ens = if untrained {
                EnsembleModel::untrained(cfg.routing()?, &cfg.train_settings(), &corpus.env)
            } else {
                load_model(&model_dir, &corpus)?
            };
            let rep = evaluate(&ens, &corpus.env, &cfg.harness()?, &corpus.eval, cfg.eval_threshold)?;
            let (rows, summary) = write_report(&rep, &meta, &out)?;
            print_summary(&rep.summary)?;
            out!("wrote {} and {}", rows.display(), summary.display());
            Ok(())
        }
        Command::Run => {
            let mut store = ExperienceStore::open(&experience, corpus.env.hints.digest())?;
            let run = hintsteer::experiment::run_pipeline(&cfg, &corpus, &mut store)?;
            run.ensemble.save(&model_dir)?;
            write_report(&run.report, &meta, &out)?;
            print_summary(&run.report.summary)?;
            Ok(())
        }
        Command::ScopeExperiment {
            total_train,
            eval_queries,
        } => {
            let results = scope_experiment(&cfg, total_train, eval_queries)?;
            let path = out.join("scope.csv");
            fs::write(&path, scope_csv(&results, &meta)?)?;
            fs::write(
                out.join("scope.plot.json"),
                plot_sidecar(
                    "scope.csv",
                    "Unseen-query outcome by training scope",
                    "scope",
                    &["improved_pct", "regressed_pct", "mean_qloss"],
                ),
            )?;
            for r in &results {
                out!(
                    "scope={} workloads={} improved_pct={:.2} regressed_pct={:.2} mean_qloss={:.4}",
                    r.scope,
                    r.workloads,
                    r.summary.improved_pct,
                    r.summary.regressed_pct,
                    r.summary.mean_qloss
                );
            }
            Ok(())
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn load_model(dir: &Path, corpus: &Corpus) -> Result<EnsembleModel> {
    let mut ens = EnsembleModel::load(dir)?;
    if ens.catalog_digest != corpus.env.hints.digest() {
        return Err(Error::DigestMismatch {
            expected: corpus.env.hints.digest().to_string(),
            found: ens.catalog_digest,
        });
    }
    for s in corpus.env.stats() {
        ens.register(s);
    }
    Ok(ens)
}

fn gen(cfg: &ExperimentConfig, corpus: &Corpus, meta: &ArtifactMeta, out: &Path) -> Result<()> {
    let meta_json = serde_json::to_value(meta)?;
    fs::write(
        out.join("config.toml"),
        toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&meta_json)?)?;
    let cat_dir = out.join("catalogs");
    let wl_dir = out.join("workloads");
    fs::create_dir_all(&cat_dir)?;
    fs::create_dir_all(&wl_dir)?;
    for w in corpus.env.workloads() {
        let doc = json!({ "meta": meta_json, "spec": w.spec, "catalog": w.catalog });
        fs::write(
            cat_dir.join(format!("{}.json", w.id)),
            serde_json::to_string_pretty(&doc)?,
        )?;
        for (split, qs) in [("train", &corpus.train), ("eval", &corpus.eval)] {
            let mut text = format!("{}\n", serde_json::to_string(&meta_json)?);
            for q in qs.iter().filter(|q| q.workload_id == w.id) {
                text.push_str(&q.to_json_line());
                text.push('\n');
            }
            fs::write(wl_dir.join(format!("{}.{split}.jsonl", w.id)), text)?;
        }
    }
    write_stats_csv(&corpus.env.stats(), &out.join("stats.csv"))?;
    out!(
        "workloads={} train_queries={} eval_queries={} catalog_digest={}",
        corpus.env.workloads().count(),
        corpus.train.len(),
        corpus.eval.len(),
        meta.catalog_digest
    );
    Ok(())
}

fn report(summaries: &[PathBuf], output: &Path) -> Result<()> {
    let runs = summaries.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>>>()?;
    let table = compare_runs(&runs)?;
    fs::write(output, &table)?;
    let name = output
        .file_name()
        .map_or("report.csv".into(), |n| n.to_string_lossy().into_owned());
    fs::write(
        output.with_extension("plot.json"),
        plot_sidecar(
            &name,
            "Improved and regressed shares per run",
            "run",
            &[
                "improved_pct",
                "regressed_pct",
                "short_improved_pct",
                "long_improved_pct",
                "short_long_gap",
            ],
        ),
    )?;
    emit(&table)?;
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_summary(s: &hintsteer::harness::EvalSummary) -> Result<()> {
    out!(
        "n={} improved={} regressed={} neutral={} no_hint={} improved_pct={:.2} regressed_pct={:.2} no_hint_pct={:.2} short_long_gap={:.2}",
        s.n, s.improved, s.regressed, s.neutral, s.no_hint, s.improved_pct, s.regressed_pct, s.no_hint_pct, s.short_long_gap
    );
    Ok(())
}
