//! Agent tools: screenshot-to-text, code-to-description and termination,
//! with a payload-hash cache shared by every caller.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CanonicalIR, ElementKind, RichTextElement, TAG_RE};
use crate::graph::Tool;
use crate::llm::BackendKind;

pub const TERMINATE: &str = "TERMINATE";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("tool backend unavailable: {0}")]
    ToolBackendUnavailable(String),
    #[error("{tool:?} cannot analyze {tag}")]
    KindMismatch { tool: Tool, tag: String },
    #[error("{0:?} needs a rich-text element")]
    MissingElement(Tool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: Tool,
    pub input_tag: String,
    pub output_text: String,
}

pub trait ToolBackend: Send + Sync {
    fn analyze(&self, payload: &str) -> Result<String, ToolError>;
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Resolves a screenshot URL to `<dir>/<sha256(url)>.txt` and returns the
/// sidecar text verbatim.
pub struct SidecarScrAnalyzer {
    pub dir: PathBuf,
}

impl SidecarScrAnalyzer {
    pub fn sidecar_path(&self, url: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", sha256_hex(url.as_bytes())))
    }
}

impl ToolBackend for SidecarScrAnalyzer {
    fn analyze(&self, url: &str) -> Result<String, ToolError> {
        let p = self.sidecar_path(url);
        fs::read_to_string(&p).map_err(|e| ToolError::ToolBackendUnavailable(format!("{}: {e}", p.display())))
    }
}

// Checked in order; the first language with a matching keyword wins.
const LANGUAGE_KEYWORDS: &[(&str, &[&str])] = &[
    ("php", &["<?php", "$_get", "$_post", "$_request"]),
    ("javascript", &["<script", "alert(", "document.", "console.log", "function(", "=>"]),
    ("html", &["<html", "<div", "<img", "<a ", "<form", "<input", "<iframe"]),
    ("sql", &["select ", "insert into", "union ", "drop table", "update "]),
    ("python", &["def ", "import ", "print("]),
    ("java", &["public class", "system.out", "public static"]),
    ("c", &["#include", "printf(", "malloc("]),
    ("shell", &["#!/bin", "curl ", "wget ", "sudo ", "rm -", "echo "]),
];

pub fn guess_language(code: &str) -> &'static str {
    let lower = code.to_lowercase();
    LANGUAGE_KEYWORDS
        .iter()
        .find(|(_, kws)| kws.iter().any(|k| lower.contains(k)))
        .map(|(lang, _)| *lang)
        .unwrap_or("text")
}

/// Emits `code snippet in <language>: <first line>`.
pub struct KeywordCodeAnalyzer;

impl ToolBackend for KeywordCodeAnalyzer {
    fn analyze(&self, code: &str) -> Result<String, ToolError> {
        let first = code.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        Ok(format!("code snippet in {}: {first}", guess_language(code)))
    }
}

/// Posts `{"kind", "payload"}` and reads `{"text"}` back.
pub struct HttpToolBackend {
    client: reqwest::blocking::Client,
    endpoint_url: String,
    kind: ElementKind,
}

impl HttpToolBackend {
    pub fn new(endpoint_url: impl Into<String>, kind: ElementKind, timeout: Duration) -> Result<Self, ToolError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ToolError::ToolBackendUnavailable(e.to_string()))?;
        Ok(Self { client, endpoint_url: endpoint_url.into(), kind })
    }
}

impl ToolBackend for HttpToolBackend {
    fn analyze(&self, payload: &str) -> Result<String, ToolError> {
        let unavailable = |e: String| ToolError::ToolBackendUnavailable(format!("{}: {e}", self.endpoint_url));
        let resp = self
            .client
            .post(&self.endpoint_url)
            .json(&serde_json::json!({"kind": self.kind.label(), "payload": payload}))
            .send()
            .map_err(|e| unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("status {}", resp.status())));
        }
        let v: serde_json::Value = resp.json().map_err(|e| unavailable(e.to_string()))?;
        v.get("text").and_then(|t| t.as_str()).map(str::to_string).ok_or_else(|| unavailable("no text field".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolsConfig {
    pub scr_backend: BackendKind,
    pub code_backend: BackendKind,
    pub scr_endpoint: String,
    pub code_endpoint: String,
    pub timeout_seconds: f64,
    /// Sidecar directory for the stub screenshot analyzer.
    pub sidecar_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ToolsConfig {
    fn default() -> Self {
        Self {
            scr_backend: BackendKind::Stub,
            code_backend: BackendKind::Stub,
            scr_endpoint: String::new(),
            code_endpoint: String::new(),
            timeout_seconds: 30.0,
            sidecar_dir: None,
            cache_dir: None,
        }
    }
}

/// Runs tools with caching by `(tool, sha256(payload))` in memory and,
/// when configured, as files under the cache directory.
pub struct ToolRunner {
    scr: Arc<dyn ToolBackend>,
    code: Arc<dyn ToolBackend>,
    cache: Mutex<HashMap<(Tool, String), String>>,
    cache_dir: Option<PathBuf>,
    backend_calls: AtomicUsize,
    tmp_counter: AtomicUsize,
}

impl ToolRunner {
    pub fn new(scr: Arc<dyn ToolBackend>, code: Arc<dyn ToolBackend>, cache_dir: Option<PathBuf>) -> Self {
        Self {
            scr,
            code,
            cache: Mutex::new(HashMap::new()),
            cache_dir,
            backend_calls: AtomicUsize::new(0),
            tmp_counter: AtomicUsize::new(0),
        }
    }

    pub fn from_config(cfg: &ToolsConfig) -> Result<Self, ToolError> {
        let timeout = Duration::from_secs_f64(cfg.timeout_seconds.max(0.001));
        let scr: Arc<dyn ToolBackend> = match cfg.scr_backend {
            BackendKind::Stub => Arc::new(SidecarScrAnalyzer { dir: cfg.sidecar_dir.clone().unwrap_or_default() }),
            BackendKind::Http => Arc::new(HttpToolBackend::new(&cfg.scr_endpoint, ElementKind::Scr, timeout)?),
        };
        let code: Arc<dyn ToolBackend> = match cfg.code_backend {
            BackendKind::Stub => Arc::new(KeywordCodeAnalyzer),
            BackendKind::Http => Arc::new(HttpToolBackend::new(&cfg.code_endpoint, ElementKind::Code, timeout)?),
        };
        Ok(Self::new(scr, code, cfg.cache_dir.clone()))
    }

    /// Stub analyzers over a sidecar directory, no disk cache.
    pub fn stub(sidecar_dir: impl Into<PathBuf>) -> Self {
        Self::new(Arc::new(SidecarScrAnalyzer { dir: sidecar_dir.into() }), Arc::new(KeywordCodeAnalyzer), None)
    }

    /// Calls that reached a backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::Relaxed)
    }

    fn cache_file(&self, tool: Tool, hash: &str) -> Option<PathBuf> {
        let prefix = if tool == Tool::ScrAnalyzer { "scr" } else { "code" };
        self.cache_dir.as_ref().map(|d| d.join(format!("{prefix}-{hash}.txt")))
    }

    fn persist(&self, path: &Path, text: &str) {
        let Some(dir) = path.parent() else { return };
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        let res = fs::create_dir_all(dir).and_then(|_| fs::write(&tmp, text)).and_then(|_| fs::rename(&tmp, path));
        if let Err(e) = res {
            tracing::warn!(path = %path.display(), error = %e, "could not persist tool cache entry");
        }
    }

    pub fn run_tool(&self, tool: Tool, element: Option<&RichTextElement>) -> Result<ToolResult, ToolError> {
        if tool == Tool::AgentTerminator {
            return Ok(ToolResult {
                tool,
                input_tag: element.map(|e| e.tag.clone()).unwrap_or_default(),
                output_text: TERMINATE.into(),
            });
        }
        let el = element.ok_or(ToolError::MissingElement(tool))?;
        let (want, backend) = match tool {
            Tool::ScrAnalyzer => (ElementKind::Scr, &self.scr),
            _ => (ElementKind::Code, &self.code),
        };
        if el.kind != want {
            return Err(ToolError::KindMismatch { tool, tag: el.tag.clone() });
        }
        let hash = sha256_hex(el.payload.as_bytes());
        let key = (tool, hash.clone());
        let done = |text: String| ToolResult { tool, input_tag: el.tag.clone(), output_text: text };
        if let Some(hit) = self.cache.lock().get(&key) {
            return Ok(done(hit.clone()));
        }
        let file = self.cache_file(tool, &hash);
        if let Some(text) = file.as_ref().and_then(|f| fs::read_to_string(f).ok()) {
            self.cache.lock().insert(key, text.clone());
            return Ok(done(text));
        }
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let text = backend.analyze(&el.payload)?;
        if let Some(f) = &file {
            self.persist(f, &text);
        }
        self.cache.lock().insert(key, text.clone());
        Ok(done(text))
    }

    /// Runs the tool matching the element's kind.
    pub fn analyze_element(&self, el: &RichTextElement) -> Result<ToolResult, ToolError> {
        let tool = match el.kind {
            ElementKind::Scr => Tool::ScrAnalyzer,
            ElementKind::Code => Tool::CodeAnalyzer,
        };
        self.run_tool(tool, Some(el))
    }

    /// Content with every tag occurrence followed by ` (<tool output>)`.
    /// Failed or missing outputs become empty text plus a warning.
    pub fn flatten_ir(&self, ir: &CanonicalIR) -> (String, Vec<String>) {
        let mut warnings = Vec::new();
        let mut out = String::with_capacity(ir.content.len() * 2);
        let mut last = 0;
        for m in TAG_RE.find_iter(&ir.content) {
            out.push_str(&ir.content[last..m.end()]);
            last = m.end();
            let text = match ir.element(m.as_str()) {
                Some(el) => match self.analyze_element(el) {
                    Ok(r) => r.output_text,
                    Err(e) => {
                        warnings.push(format!("{}: {}: {e}", ir.id, m.as_str()));
                        String::new()
                    }
                },
                None => {
                    warnings.push(format!("{}: {} has no rich-text entry", ir.id, m.as_str()));
                    String::new()
                }
            };
            out.push_str(" (");
            out.push_str(&text.split_whitespace().collect::<Vec<_>>().join(" "));
            out.push(')');
        }
        out.push_str(&ir.content[last..]);
        (out, warnings)
    }
}
