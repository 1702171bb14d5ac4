use std::sync::LazyLock;

use regex::Regex;

use super::step::CWE;
use crate::graph::{Path, ReasoningGraph, Verdict};
use crate::knowledge::{KnowledgeRecord, KnowledgeStore, GOLDEN_CAP};
use crate::llm::{Gateway, LlmError, LlmRequest};

pub const CORRECTION_SYSTEM_PROMPT: &str =
    "You check reasoning about issue reports against known vulnerability facts and fix factual errors.";

static REPLY_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(O[0-9][0-9.]*)\s*:\s*(.+?)\s*$").unwrap());

pub fn build_correction_prompt(g: &ReasoningGraph, path: &Path, golden: &[(&KnowledgeRecord, f64)]) -> String {
    let mut p = String::from(
        "Use the golden knowledge to correct factual errors in the observations of the reasoning path. \
Keep every observation id. Reply with one line per changed observation, formatted \"<id>: <corrected text>\".\n",
    );
    p.push_str("Golden knowledge:\n");
    for (r, _) in golden {
        match &r.cwe_id {
            Some(c) => p.push_str(&format!("- [{}/{}] {} ({c})\n", r.source, r.key, r.text)),
            None => p.push_str(&format!("- [{}/{}] {}\n", r.source, r.key, r.text)),
        }
    }
    p.push_str(&format!("Path: {}\n", g.describe_path(path)));
    p.push_str("Observations:\n");
    for id in &path.observations {
        if let Some(n) = g.node(id) {
            p.push_str(&format!("{id}: {}\n", n.text));
        }
    }
    p
}

/// Text rewrites proposed for one path. Empty when no golden knowledge
/// clears the threshold; ids off the path and structural edits are ignored.
pub fn correct_path(
    g: &ReasoningGraph,
    path: &Path,
    store: &KnowledgeStore,
    llm: &Gateway,
    theta_sim: f64,
    seed: u64,
) -> Result<Vec<(String, String)>, LlmError> {
    let description = g.describe_path(path);
    let mut golden = store.retrieve_golden(&description, theta_sim);
    golden.truncate(GOLDEN_CAP);
    if golden.is_empty() {
        return Ok(Vec::new());
    }
    let req = LlmRequest::new(CORRECTION_SYSTEM_PROMPT, build_correction_prompt(g, path, &golden)).with_seed(seed);
    let resp = llm.complete(&req)?;
    let mut edits: Vec<(String, String)> = Vec::new();
    for line in resp.text.lines() {
        let Some(c) = REPLY_LINE.captures(line) else { continue };
        let id = &c[1];
        if !path.observations.iter().any(|o| o == id) {
            continue;
        }
        match edits.iter_mut().find(|(e, _)| e == id) {
            Some(e) => e.1 = c[2].to_string(),
            None => edits.push((id.to_string(), c[2].to_string())),
        }
    }
    Ok(edits)
}

/// Applies text rewrites in place; verdict nodes pick up a corrected CWE.
pub fn apply_corrections(g: &mut ReasoningGraph, edits: &[(String, String)]) {
    for (id, text) in edits {
        let Some(node) = g.node_mut(id) else { continue };
        node.text = text.clone();
        if let Verdict::Vul(cwe) = &mut node.verdict {
            if let Some(m) = CWE.find(text) {
                *cwe = Some(m.as_str().to_string());
            }
        }
    }
}
