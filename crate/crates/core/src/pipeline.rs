//! Configuration, the reasoning database on disk, and the stage drivers
//! behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    issue_id_from_url, merge_similar_elements, normalize_text, parse_issue_page, read_jsonl, split_corpus,
    split_multi_cwe, write_jsonl, CanonicalIR, CorpusError, RawIssuePage, DEFAULT_MERGE_THRESHOLD,
};
use crate::evaluation::{self, EvalError, MetricsReport, PrPoint, TruthRow};
use crate::graph::{graph_path, load_all_graphs, save_graph, GraphError};
use crate::identifier::{build_identify_prompt, generate_guidance, identify, target_json, IdentifyError, Prediction};
use crate::knowledge::{KnowledgeError, KnowledgeStore, STORE_FILE};
use crate::llm::{Gateway, LlmConfig, LlmError};
use crate::reasoner::{Reasoner, ReasonerConfig, ReasonerError};
use crate::retrieval::{target_text, RetrievalError, RetrievedGraph, Retriever, DEFAULT_WALKS};
use crate::tools::{sha256_hex, ToolError, ToolRunner, ToolsConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TARGETS_FILE: &str = "targets.jsonl";
pub const FETCH_LOG: &str = "fetch_log.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("database was built with config {found}, current config is {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<PipelineError> },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn stage<T>(name: &'static str, r: Result<T, PipelineError>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Stage { stage: name, source: Box::new(e) })
}

/// Deterministic child seed for one stage and key.
pub fn derive_seed(master: u64, stage: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub theta_sim: f64,
    pub theta_out: f64,
    pub historical_proportion: f64,
    pub walks: usize,
    pub seed: u64,
    pub pr_interval: f64,
    pub db_path: PathBuf,
    pub out_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub va: Option<PathBuf>,
    pub reasoner: ReasonerConfig,
    pub llm: LlmConfig,
    pub tools: ToolsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta_sim: 0.7,
            theta_out: 0.55,
            historical_proportion: 0.6,
            walks: DEFAULT_WALKS,
            seed: 0,
            pr_interval: evaluation::DEFAULT_PR_INTERVAL,
            db_path: PathBuf::from("vulrtex-db"),
            out_dir: PathBuf::from("vulrtex-out"),
            corpus: None,
            va: None,
            reasoner: ReasonerConfig::default(),
            llm: LlmConfig::default(),
            tools: ToolsConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct DbKey<'a> {
    historical_proportion: f64,
    seed: u64,
    theta_sim: f64,
    reasoner: &'a ReasonerConfig,
    llm: &'a LlmConfig,
    tools: &'a ToolsConfig,
}

fn short_hash<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_vec(v).expect("config serializes");
    sha256_hex(&json)[..16].to_string()
}

impl PipelineConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Resolves relative input paths against `base`. Output locations stay
    /// relative to the working directory.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.corpus, &mut self.va, &mut self.llm.stub_rules, &mut self.tools.sidecar_dir, &mut self.tools.cache_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [("theta_sim", self.theta_sim), ("theta_out", self.theta_out)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.historical_proportion > 0.0 && self.historical_proportion < 1.0) {
            return Err(PipelineError::Config(format!(
                "historical_proportion = {} outside (0, 1)",
                self.historical_proportion
            )));
        }
        if self.walks == 0 {
            return Err(PipelineError::Config("walks must be at least 1".into()));
        }
        if !(self.pr_interval > 0.0 && self.pr_interval < 1.0) {
            return Err(PipelineError::Config(format!("pr_interval = {} outside (0, 1)", self.pr_interval)));
        }
        self.reasoner_config("").validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Copy with file-system locations cleared; hashes ignore where files live.
    fn without_paths(&self) -> Self {
        let mut c = self.clone();
        c.db_path = PathBuf::new();
        c.out_dir = PathBuf::new();
        c.corpus = None;
        c.va = None;
        c.llm.stub_rules = None;
        c.tools.sidecar_dir = None;
        c.tools.cache_dir = None;
        c
    }

    /// Hash of every setting that affects outputs.
    pub fn hash(&self) -> String {
        short_hash(&self.without_paths())
    }

    /// Hash of the settings that shape the reasoning database.
    pub fn db_hash(&self) -> String {
        let c = self.without_paths();
        short_hash(&DbKey {
            historical_proportion: c.historical_proportion,
            seed: c.seed,
            theta_sim: c.theta_sim,
            reasoner: &c.reasoner,
            llm: &c.llm,
            tools: &c.tools,
        })
    }

    fn reasoner_config(&self, ir_id: &str) -> ReasonerConfig {
        ReasonerConfig { theta_sim: self.theta_sim, seed: derive_seed(self.seed, "reason", ir_id), ..self.reasoner.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IrStatus {
    Built,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub ir_id: String,
    pub status: IrStatus,
    pub nodes: usize,
    pub edges: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub corpus_sha256: String,
    pub va_records: usize,
    pub n_historical: usize,
    pub n_target: usize,
    pub graphs_built: usize,
    pub graphs_partial: usize,
    pub graphs_failed: usize,
    pub entries: Vec<DbEntry>,
}

fn write_json_pretty<T: Serialize>(path: &Path, v: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest(db: &Path) -> Result<DbManifest, PipelineError> {
    let p = db.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p)
        .map_err(|e| PipelineError::Config(format!("no reasoning database at {}: {e}", db.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_store(cfg: &PipelineConfig, va: Option<&Path>, db: &Path) -> Result<KnowledgeStore, PipelineError> {
    match va {
        Some(p) if !p.exists() => Err(PipelineError::Config(format!("VA file {} does not exist", p.display()))),
        Some(p) => Ok(KnowledgeStore::from_jsonl(p)?),
        None if db.join(STORE_FILE).exists() => Ok(KnowledgeStore::load(db)?),
        None if cfg.reasoner.correction_enabled => {
            Err(PipelineError::Config("correction is enabled but no VA file was given".into()))
        }
        None => Ok(KnowledgeStore::default()),
    }
}

/// Splits the corpus, ingests the VA store and builds one graph per
/// historical IR. Gateway failures are recorded per IR.
pub fn prepare_db(cfg: &PipelineConfig, corpus: &Path, va: Option<&Path>, db: &Path) -> Result<DbManifest, PipelineError> {
    cfg.validate()?;
    let bytes = fs::read(corpus).map_err(|e| PipelineError::Config(format!("cannot read corpus {}: {e}", corpus.display())))?;
    let irs: Vec<CanonicalIR> = read_jsonl(corpus)?;
    let store = load_store(cfg, va, db)?;
    let split = split_corpus(&irs, cfg.historical_proportion)?;
    let llm = Gateway::from_config(&cfg.llm)?;
    let tools = ToolRunner::from_config(&cfg.tools)?;

    let graphs_dir = db.join("graphs");
    if graphs_dir.exists() {
        fs::remove_dir_all(&graphs_dir)?;
    }
    fs::create_dir_all(&graphs_dir)?;
    store.save(db)?;
    write_jsonl(&db.join(TARGETS_FILE), &split.target)?;

    let store_ref = (!store.is_empty()).then_some(&store);
    let results: Vec<DbEntry> = split
        .historical
        .par_iter()
        .map(|ir| {
            let rcfg = cfg.reasoner_config(&ir.id);
            let reasoner = Reasoner { cfg: &rcfg, llm: &llm, tools: &tools, store: store_ref };
            match reasoner.generate_reasoning_graph(ir) {
                Ok(g) => {
                    let status = if g.partial { IrStatus::Partial } else { IrStatus::Built };
                    let entry = DbEntry {
                        ir_id: ir.id.clone(),
                        status,
                        nodes: g.nodes.len(),
                        edges: g.edges.len(),
                        error: None,
                        warnings: g.warnings.clone(),
                    };
                    match save_graph(db, &g) {
                        Ok(_) => entry,
                        Err(e) => DbEntry { status: IrStatus::Failed, error: Some(e.to_string()), ..entry },
                    }
                }
                Err(e) => {
                    tracing::warn!(ir = %ir.id, "graph generation failed: {e}");
                    DbEntry {
                        ir_id: ir.id.clone(),
                        status: IrStatus::Failed,
                        nodes: 0,
                        edges: 0,
                        error: Some(e.to_string()),
                        warnings: Vec::new(),
                    }
                }
            }
        })
        .collect();

    let count = |s: IrStatus| results.iter().filter(|e| e.status == s).count();
    let manifest = DbManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.db_hash(),
        corpus_sha256: sha256_hex(&bytes),
        va_records: store.len(),
        n_historical: split.historical.len(),
        n_target: split.target.len(),
        graphs_built: count(IrStatus::Built),
        graphs_partial: count(IrStatus::Partial),
        graphs_failed: count(IrStatus::Failed),
        entries: results,
    };
    write_json_pretty(&db.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loaded reasoning database, checked against the current config.
pub struct Database {
    pub manifest: DbManifest,
    pub retriever: Retriever,
}

impl Database {
    pub fn open(cfg: &PipelineConfig, db: &Path) -> Result<Self, PipelineError> {
        let manifest = read_manifest(db)?;
        let expected = cfg.db_hash();
        if manifest.config_hash != expected {
            return Err(PipelineError::ConfigHashMismatch { expected, found: manifest.config_hash });
        }
        let graphs = load_all_graphs(db)?;
        Ok(Self { manifest, retriever: Retriever::new(graphs) })
    }

    pub fn targets(db: &Path) -> Result<Vec<CanonicalIR>, PipelineError> {
        Ok(read_jsonl(&db.join(TARGETS_FILE))?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetRetrieval {
    pub ir_id: String,
    pub graphs: Vec<RetrievedGraph>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Seed for one identification pass.
pub fn run_seed(master: u64, run: u32) -> u64 {
    derive_seed(master, "run", &run.to_string())
}

pub fn retrieve_for(
    cfg: &PipelineConfig,
    retriever: &Retriever,
    tools: &ToolRunner,
    target: &CanonicalIR,
    run: u32,
) -> Result<TargetRetrieval, PipelineError> {
    let (text, warnings) = target_text(target, tools);
    let seed = derive_seed(run_seed(cfg.seed, run), "retrieve", &target.id);
    let graphs = retriever.retrieve_relevant(&text, cfg.theta_sim, cfg.walks, seed)?;
    Ok(TargetRetrieval { ir_id: target.id.clone(), graphs, warnings })
}

fn identify_one(
    cfg: &PipelineConfig,
    retriever: &Retriever,
    llm: &Gateway,
    tools: &ToolRunner,
    target: &CanonicalIR,
    run: u32,
) -> Result<Prediction, PipelineError> {
    let retrieved = retrieve_for(cfg, retriever, tools, target, run)?;
    let (flat, _) = tools.flatten_ir(target);
    let json = target_json(target, &flat);
    let seed = run_seed(cfg.seed, run);
    let guide = generate_guidance(&retrieved.graphs, &json, llm, derive_seed(seed, "guide", &target.id))?;
    let descriptions: Vec<&str> = retrieved.graphs.iter().map(|g| g.description.as_str()).collect();
    let prompt = build_identify_prompt(&guide, &json, &descriptions);
    let mut p = identify(&target.id, prompt, &guide, llm, cfg.theta_out, derive_seed(seed, "identify", &target.id))?;
    p.run = run;
    p.config_hash = cfg.hash();
    p.diagnostics.extend(retrieved.warnings);
    Ok(p)
}

/// One identification pass over `targets`, in input order.
pub fn identify_targets(
    cfg: &PipelineConfig,
    retriever: &Retriever,
    llm: &Gateway,
    tools: &ToolRunner,
    targets: &[CanonicalIR],
    run: u32,
) -> Result<Vec<Prediction>, PipelineError> {
    targets.par_iter().map(|t| identify_one(cfg, retriever, llm, tools, t, run)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub report: MetricsReport,
    pub runs: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Scores predictions against truths. All predictions must come from one
/// config.
pub fn evaluate_predictions(
    preds: &[Prediction],
    truths: &[TruthRow],
    theta_out: f64,
    pr_interval: f64,
    expected_runs: Option<usize>,
) -> Result<(Report, Vec<PrPoint>), PipelineError> {
    let mut hashes: Vec<&str> = preds.iter().map(|p| p.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    if hashes.len() > 1 {
        return Err(PipelineError::ConfigHashMismatch { expected: hashes[0].to_string(), found: hashes[1].to_string() });
    }
    let ev = evaluation::evaluate(preds, truths, theta_out, pr_interval, expected_runs)?;
    let report = Report {
        config_hash: hashes.first().map(|s| s.to_string()).unwrap_or_default(),
        report: ev.report,
        runs: ev.runs,
        warnings: ev.warnings,
    };
    Ok((report, ev.curve))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub runs: u32,
    pub n_targets: usize,
    pub preds: PathBuf,
    pub report: PathBuf,
    pub curve: PathBuf,
    pub timings: Vec<StageTiming>,
}

pub const PREDS_FILE: &str = "preds.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// prepare-db → retrieve/identify for `runs` passes → evaluate. Artifacts
/// already written are kept when a later stage fails.
pub fn run_all(cfg: &PipelineConfig, runs: u32) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    if runs == 0 {
        return Err(PipelineError::Config("runs must be at least 1".into()));
    }
    let corpus = cfg.corpus.clone().ok_or_else(|| PipelineError::Config("no corpus configured".into()))?;
    let out = &cfg.out_dir;
    let mut timings = Vec::new();
    let mut timed = |name: &str, t: Instant| timings.push(StageTiming { stage: name.into(), seconds: t.elapsed().as_secs_f64() });

    let t = Instant::now();
    stage("prepare-db", prepare_db(cfg, &corpus, cfg.va.as_deref(), &cfg.db_path))?;
    timed("prepare-db", t);

    let t = Instant::now();
    let db = stage("load-db", Database::open(cfg, &cfg.db_path))?;
    let targets = stage("load-db", Database::targets(&cfg.db_path))?;
    let llm = Gateway::from_config(&cfg.llm)?;
    let tools = ToolRunner::from_config(&cfg.tools)?;
    fs::create_dir_all(out)?;
    let mut all = Vec::new();
    for run in 0..runs {
        let preds = stage("identify", identify_targets(cfg, &db.retriever, &llm, &tools, &targets, run))?;
        if runs > 1 {
            let p = out.join("runs").join(format!("run-{run:03}")).join(PREDS_FILE);
            fs::create_dir_all(p.parent().expect("has parent"))?;
            write_jsonl(&p, &preds)?;
        }
        all.extend(preds);
    }
    write_jsonl(&out.join(PREDS_FILE), &all)?;
    timed("identify", t);

    let t = Instant::now();
    let truths: Vec<TruthRow> = targets
        .iter()
        .map(|ir| TruthRow { id: ir.id.clone(), label_vul: ir.label_vul, cwe_id: ir.cwe_id.clone() })
        .collect();
    let (report, curve) = stage(
        "evaluate",
        evaluate_predictions(&all, &truths, cfg.theta_out, cfg.pr_interval, Some(runs as usize)),
    )?;
    write_json_pretty(&out.join(REPORT_FILE), &report)?;
    stage("evaluate", evaluation::write_curve_csv(&out.join(CURVE_FILE), &curve, &report.config_hash).map_err(Into::into))?;
    timed("evaluate", t);

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        runs,
        n_targets: targets.len(),
        preds: out.join(PREDS_FILE),
        report: out.join(REPORT_FILE),
        curve: out.join(CURVE_FILE),
        timings,
    };
    write_json_pretty(&out.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchRecord {
    pub source_url: String,
    pub file: String,
    pub fetched_at: i64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// URLs from a manifest, one per line; blank lines and `#` comments skipped.
pub fn read_url_manifest(path: &Path) -> Result<Vec<String>, PipelineError> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn snapshot_name(url: &str) -> String {
    format!("{}.html", sha256_hex(url.as_bytes()))
}

/// Downloads each page to `<out>/<sha256(url)>.html` and appends to the
/// fetch log. Failures are logged and skipped.
pub fn fetch_pages(urls: &[String], out: &Path, timeout: Duration) -> Result<Vec<FetchRecord>, PipelineError> {
    fs::create_dir_all(out)?;
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| PipelineError::Config(format!("http client: {e}")))?;
    let mut log = Vec::new();
    for url in urls {
        let file = snapshot_name(url);
        let fetched_at = chrono::Utc::now().timestamp();
        let res = client.get(url).send().and_then(|r| r.error_for_status()).and_then(|r| r.text());
        let rec = match res {
            Ok(html) if !html.trim().is_empty() => {
                fs::write(out.join(&file), html)?;
                FetchRecord { source_url: url.clone(), file, fetched_at, ok: true, error: None }
            }
            Ok(_) => FetchRecord { source_url: url.clone(), file, fetched_at, ok: false, error: Some("empty body".into()) },
            Err(e) => FetchRecord { source_url: url.clone(), file, fetched_at, ok: false, error: Some(e.to_string()) },
        };
        log.push(rec);
    }
    let log_path = out.join(FETCH_LOG);
    let mut prior: Vec<FetchRecord> = if log_path.exists() { read_jsonl(&log_path)? } else { Vec::new() };
    prior.retain(|r| !log.iter().any(|n| n.source_url == r.source_url));
    prior.extend(log.iter().cloned());
    write_jsonl(&log_path, &prior)?;
    Ok(log)
}

/// Label line for corpus building: an IR id with its vulnerability label
/// and zero or more CWE ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub label_vul: bool,
    #[serde(default)]
    pub cwe_ids: Vec<String>,
    #[serde(default)]
    pub cve_id: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusBuild {
    pub records: usize,
    pub skipped: Vec<String>,
}

/// Parses fetched snapshots into canonical records: element merge, text
/// normalization, labels attached and multi-CWE records split.
pub fn build_corpus(
    pages_dir: &Path,
    labels: Option<&Path>,
    merge_threshold: Option<f64>,
    out: &Path,
) -> Result<CorpusBuild, PipelineError> {
    let log: Vec<FetchRecord> = read_jsonl(&pages_dir.join(FETCH_LOG))?;
    let labels: Vec<LabelRow> = match labels {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let threshold = merge_threshold.unwrap_or(DEFAULT_MERGE_THRESHOLD);
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for rec in log.iter().filter(|r| r.ok) {
        let html = match fs::read_to_string(pages_dir.join(&rec.file)) {
            Ok(h) => h,
            Err(e) => {
                skipped.push(format!("{}: {e}", rec.source_url));
                continue;
            }
        };
        let page = RawIssuePage { source_url: rec.source_url.clone(), html, fetched_at: rec.fetched_at };
        let ir = match parse_issue_page(&page) {
            Ok(ir) => normalize_text(&merge_similar_elements(&ir, threshold)),
            Err(e) => {
                skipped.push(format!("{}: {e}", rec.source_url));
                continue;
            }
        };
        let id = issue_id_from_url(&rec.source_url);
        match labels.iter().find(|l| l.id == id) {
            Some(l) if l.label_vul && !l.cwe_ids.is_empty() => {
                let base = CanonicalIR { label_vul: Some(true), cve_id: l.cve_id.clone(), ..ir };
                records.extend(split_multi_cwe(&base, &l.cwe_ids)?);
            }
            Some(l) => records.push(CanonicalIR { label_vul: Some(l.label_vul), cve_id: l.cve_id.clone(), ..ir }),
            None => records.push(ir),
        }
    }
    write_jsonl(out, &records)?;
    Ok(CorpusBuild { records: records.len(), skipped })
}

/// Graph file of a stored IR, for callers that want to inspect one.
pub fn stored_graph_path(db: &Path, ir_id: &str) -> PathBuf {
    graph_path(db, ir_id)
}
