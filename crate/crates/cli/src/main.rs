use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use vulrtex_core::corpus::{read_jsonl, write_jsonl, CanonicalIR};
use vulrtex_core::evaluation::{write_curve_csv, TruthRow};
use vulrtex_core::identifier::Prediction;
use vulrtex_core::knowledge::KnowledgeStore;
use vulrtex_core::llm::Gateway;
use vulrtex_core::pipeline::{
    self, build_corpus, evaluate_predictions, fetch_pages, prepare_db, read_url_manifest, retrieve_for, run_all,
    Database, PipelineConfig,
};
use vulrtex_core::tools::ToolRunner;

#[derive(Parser)]
#[command(name = "vulrtex", version, about = "Vulnerability identification over issue reports with reasoning graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// TOML config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print a machine-readable JSON summary on stdout
    #[arg(long, global = true)]
    json: bool,
    /// Master seed for every stochastic stage
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Similarity threshold for graph and knowledge retrieval
    #[arg(long, global = true)]
    theta_sim: Option<f64>,
    /// Probability threshold for a Yes verdict
    #[arg(long, global = true)]
    theta_out: Option<f64>,
    /// Share of the corpus, oldest first, used as history
    #[arg(long, global = true)]
    historical_proportion: Option<f64>,
    /// Random walks per graph when pruning
    #[arg(long, global = true)]
    walks: Option<usize>,
    /// Reasoning database directory
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Stub LLM rule table (JSONL)
    #[arg(long, global = true)]
    stub_rules: Option<PathBuf>,
    /// Seeded noise added to stub logprobs
    #[arg(long, global = true)]
    stub_jitter: Option<f64>,
    /// Sidecar directory for the stub screenshot analyzer
    #[arg(long, global = true)]
    sidecars: Option<PathBuf>,
    /// Skip golden-knowledge correction of reasoning paths
    #[arg(long, global = true)]
    no_correction: bool,
    /// Allow code snippets before all screenshots are explored
    #[arg(long, global = true)]
    no_inclusion_order: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split the corpus, ingest the VA file and build historical graphs
    PrepareDb {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        va: Option<PathBuf>,
    },
    /// Retrieve relevant pruned graphs for each target
    Retrieve {
        /// Target IRs (JSONL); defaults to the database target split
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: u32,
        /// Output JSONL; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a verdict, probability and CWE for each target
    Identify {
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Repeated identification passes, each with its own seed
        #[arg(long, default_value_t = 1)]
        runs: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        /// Ground truth (JSONL with id, label_vul, cwe_id); defaults to the database target split
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Directory for report.json and curve.csv
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// prepare-db, identify and evaluate in one go
    RunAll {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        va: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Print the resolved config and exit
        #[arg(long)]
        dry_run: bool,
    },
    /// Vulnerability-analysis knowledge store
    Va {
        #[command(subcommand)]
        cmd: VaCmd,
    },
    /// Snapshot issue pages listed in a URL manifest
    Fetch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        timeout_seconds: f64,
    },
    /// Canonical corpus construction
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
}

#[derive(Subcommand)]
enum VaCmd {
    /// Load a VA JSONL file into the database directory
    Ingest { file: PathBuf },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Parse fetched snapshots into a canonical JSONL corpus
    Build {
        /// Directory written by `fetch`
        #[arg(long)]
        pages: PathBuf,
        /// JSONL label rows: {id, label_vul, cwe_ids, cve_id}
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        merge_threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_toml_file(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.theta_sim {
            cfg.theta_sim = v;
        }
        if let Some(v) = self.theta_out {
            cfg.theta_out = v;
        }
        if let Some(v) = self.historical_proportion {
            cfg.historical_proportion = v;
        }
        if let Some(v) = self.walks {
            cfg.walks = v;
        }
        if let Some(v) = &self.db {
            cfg.db_path = v.clone();
        }
        if let Some(v) = &self.stub_rules {
            cfg.llm.stub_rules = Some(v.clone());
        }
        if let Some(v) = self.stub_jitter {
            cfg.llm.stub_jitter = v;
        }
        if let Some(v) = &self.sidecars {
            cfg.tools.sidecar_dir = Some(v.clone());
        }
        if self.no_correction {
            cfg.reasoner.correction_enabled = false;
        }
        if self.no_inclusion_order {
            cfg.reasoner.inclusion_order = false;
        }
        // the reasoner's golden-knowledge threshold follows the top-level one
        cfg.reasoner.theta_sim = cfg.theta_sim;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_targets(cfg: &PipelineConfig, path: Option<&Path>) -> Result<Vec<CanonicalIR>> {
    Ok(match path {
        Some(p) => read_jsonl(p).with_context(|| format!("reading targets {}", p.display()))?,
        None => Database::targets(&cfg.db_path)?,
    })
}

fn emit(json: bool, summary: Value, human: impl FnOnce() -> String) {
    let line = if json { summary.to_string() } else { human() };
    // a closed pipe (e.g. `| head`) is not an error for a one-line summary
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.common.json;
    let cfg = cli.common.resolve()?;
    match cli.cmd {
        Cmd::PrepareDb { corpus, va } => {
            let corpus = corpus.or(cfg.corpus.clone()).context("no corpus given (--corpus or config)")?;
            let va = va.or(cfg.va.clone());
            let m = prepare_db(&cfg, &corpus, va.as_deref(), &cfg.db_path)?;
            emit(json, serde_json::to_value(&m)?, || {
                format!(
                    "{}: {} historical, {} targets; graphs built {}, partial {}, failed {} (config {})",
                    cfg.db_path.display(),
                    m.n_historical,
                    m.n_target,
                    m.graphs_built,
                    m.graphs_partial,
                    m.graphs_failed,
                    m.config_hash
                )
            });
        }
        Cmd::Retrieve { targets, run, out } => {
            let db = Database::open(&cfg, &cfg.db_path)?;
            let targets = load_targets(&cfg, targets.as_deref())?;
            let tools = ToolRunner::from_config(&cfg.tools)?;
            let rows = targets
                .iter()
                .map(|t| retrieve_for(&cfg, &db.retriever, &tools, t, run))
                .collect::<Result<Vec<_>, _>>()?;
            match &out {
                Some(p) => write_jsonl(p, &rows)?,
                None if !json => {
                    for r in &rows {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
                None => {}
            }
            let n: usize = rows.iter().map(|r| r.graphs.len()).sum();
            let summary = match out {
                Some(_) => json!({"targets": rows.len(), "graphs_retrieved": n, "config_hash": cfg.hash()}),
                None => json!({"targets": rows.len(), "graphs_retrieved": n, "config_hash": cfg.hash(), "results": rows}),
            };
            if json {
                println!("{summary}");
            } else {
                eprintln!("{} targets, {n} graphs retrieved", rows.len());
            }
        }
        Cmd::Identify { targets, runs, out } => {
            if runs == 0 {
                bail!("--runs must be at least 1");
            }
            let db = Database::open(&cfg, &cfg.db_path)?;
            let targets = load_targets(&cfg, targets.as_deref())?;
            let llm = Gateway::from_config(&cfg.llm)?;
            let tools = ToolRunner::from_config(&cfg.tools)?;
            let mut preds = Vec::new();
            for r in 0..runs {
                preds.extend(pipeline::identify_targets(&cfg, &db.retriever, &llm, &tools, &targets, r)?);
            }
            write_jsonl(&out, &preds)?;
            let scored = preds.iter().filter(|p| p.is_scored()).count();
            let positive = preds.iter().filter(|p| p.verdict).count();
            emit(
                json,
                json!({"predictions": preds.len(), "scored": scored, "positive": positive, "runs": runs,
                       "out": out, "config_hash": cfg.hash()}),
                || format!("{} predictions ({scored} scored, {positive} positive) -> {}", preds.len(), out.display()),
            );
        }
        Cmd::Evaluate { preds, truth, out, runs } => {
            let predictions: Vec<Prediction> = read_jsonl(&preds).with_context(|| format!("reading {}", preds.display()))?;
            let truths: Vec<TruthRow> = match &truth {
                Some(p) => read_jsonl(p)?,
                None => Database::targets(&cfg.db_path)?
                    .into_iter()
                    .map(|ir| TruthRow { id: ir.id, label_vul: ir.label_vul, cwe_id: ir.cwe_id })
                    .collect(),
            };
            let (report, curve) = evaluate_predictions(&predictions, &truths, cfg.theta_out, cfg.pr_interval, runs)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join(pipeline::REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
            write_curve_csv(&out.join(pipeline::CURVE_FILE), &curve, &report.config_hash)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            emit(json, serde_json::to_value(&report)?, || {
                let r = &report.report;
                format!(
                    "P {:.4}  R {:.4}  F1 {:.4}  AUROC {}  AUPRC {}  Macro-F1 {}  ({} rows, {} runs)",
                    r.precision,
                    r.recall,
                    r.f1,
                    fmt_opt(r.auroc),
                    fmt_opt(r.auprc),
                    fmt_opt(r.macro_f1),
                    r.n_rows,
                    r.n_runs
                )
            });
        }
        Cmd::RunAll { corpus, va, out, runs, dry_run } => {
            let mut cfg = cfg;
            if let Some(c) = corpus {
                cfg.corpus = Some(c);
            }
            if let Some(v) = va {
                cfg.va = Some(v);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if dry_run {
                if json {
                    println!("{}", json!({"config": cfg, "config_hash": cfg.hash(), "runs": runs}));
                } else {
                    print!("# config_hash = {}\n# runs = {runs}\n{}", cfg.hash(), toml::to_string(&cfg)?);
                }
                return Ok(());
            }
            let m = run_all(&cfg, runs)?;
            let report: Value = serde_json::from_str(&fs::read_to_string(&m.report)?)?;
            emit(json, json!({"manifest": m, "report": report}), || {
                let r = &report["report"];
                format!(
                    "{} targets x {} runs: P {}  R {}  F1 {}  AUROC {}  AUPRC {}  Macro-F1 {} -> {}",
                    m.n_targets,
                    m.runs,
                    r["precision"],
                    r["recall"],
                    r["f1"],
                    r["auroc"],
                    r["auprc"],
                    r["macro_f1"],
                    cfg.out_dir.display()
                )
            });
        }
        Cmd::Va { cmd: VaCmd::Ingest { file } } => {
            let store = KnowledgeStore::from_jsonl(&file)?;
            store.save(&cfg.db_path)?;
            emit(json, json!({"records": store.len(), "db": cfg.db_path}), || {
                format!("{} VA records -> {}", store.len(), cfg.db_path.display())
            });
        }
        Cmd::Fetch { manifest, out, timeout_seconds } => {
            let urls = read_url_manifest(&manifest)?;
            let log = fetch_pages(&urls, &out, Duration::from_secs_f64(timeout_seconds))?;
            let ok = log.iter().filter(|r| r.ok).count();
            for r in log.iter().filter(|r| !r.ok) {
                eprintln!("warning: {}: {}", r.source_url, r.error.as_deref().unwrap_or("failed"));
            }
            emit(json, json!({"requested": urls.len(), "fetched": ok, "log": log}), || {
                format!("fetched {ok}/{} pages -> {}", urls.len(), out.display())
            });
        }
        Cmd::Corpus { cmd: CorpusCmd::Build { pages, labels, merge_threshold, out } } => {
            let built = build_corpus(&pages, labels.as_deref(), merge_threshold, &out)?;
            for s in &built.skipped {
                eprintln!("warning: skipped {s}");
            }
            emit(json, serde_json::to_value(&built)?, || format!("{} records -> {}", built.records, out.display()));
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
