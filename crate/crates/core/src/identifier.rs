//! Per-target guidance generation and the final yes/no + CWE classification.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CanonicalIR;
use crate::llm::{yes_probability, Gateway, LlmError, LlmRequest};
use crate::retrieval::RetrievedGraph;

pub const DEFAULT_THETA_OUT: f64 = 0.55;

pub const P_IDENTIFY: &str = "Please identify whether the following IR contains the vulnerability, and predict the type (CWE-ID) of the vulnerability. \
This is a classification task, so please directly output whether the IR contains the vulnerability with \"Yes, No\". \
The output format for vulnerability identification is {Yes, No}. \
Moreover, you need to just directly output the {CWE-ID} without other information.";

pub const GUIDE_HEADER: &str =
    "According to the relevant reasoning graph, the generated guidance prompt contains the following steps.";

pub const GUIDE_SYSTEM_PROMPT: &str = "You write step-by-step instructions for analyzing issue reports for vulnerabilities.";
pub const IDENTIFY_SYSTEM_PROMPT: &str = "You are a security analyst classifying issue reports.";

static STEP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*STEP-([0-9]+)\s*[:.)-]?\s*(.*)$").unwrap());
static CWE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"CWE-[0-9]+").unwrap());

#[derive(Debug, Error)]
pub enum IdentifyError {
    #[error("theta_out {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuidancePrompt {
    pub steps: Vec<String>,
    pub source_graphs: Vec<String>,
    /// The response had no STEP lines and was kept whole.
    #[serde(default)]
    pub unparsed: bool,
    #[serde(default)]
    pub latency_seconds: f64,
}

impl GuidancePrompt {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::from(GUIDE_HEADER);
        for (i, step) in self.steps.iter().enumerate() {
            s.push_str(&format!("\nSTEP-{}: {step}", i + 1));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub ir_id: String,
    /// Absent when the backend gave no usable label token.
    pub p_yes: Option<f64>,
    pub verdict: bool,
    pub cwe_id: Option<String>,
    pub theta_out: f64,
    pub guidance_used: bool,
    pub latency_seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    /// Index of the identification pass that produced this row.
    #[serde(default)]
    pub run: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config_hash: String,
}

impl Prediction {
    pub fn is_scored(&self) -> bool {
        self.p_yes.is_some()
    }
}

/// The target as the model sees it: labels are never included.
pub fn target_json(ir: &CanonicalIR, flattened_content: &str) -> String {
    let v = serde_json::json!({
        "id": ir.id,
        "Title": ir.title,
        "Content": flattened_content,
        "Rich-Text": ir.rich_text,
    });
    serde_json::to_string(&v).expect("json value serializes")
}

pub fn build_guidance_request(graphs: &[RetrievedGraph], target_json: &str) -> String {
    let mut p = String::from(
        "Based on the reasoning records of similar issue reports, write instructions for how to analyze the target issue report. \
Reply with numbered steps, one per line, formatted \"STEP-1: ...\", \"STEP-2: ...\".\n",
    );
    p.push_str("Reasoning records:\n");
    for g in graphs {
        p.push_str(&format!("- {}: {}\n", g.ir_id, g.description.replace('\n', " ")));
    }
    p.push_str("Target issue report:\n");
    p.push_str(target_json);
    p.push('\n');
    p
}

/// Numbered steps in order of appearance; lines after a step continue it.
/// Returns `None` when no step marker is present.
pub fn parse_steps(text: &str) -> Option<Vec<String>> {
    let mut steps: Vec<String> = Vec::new();
    for line in text.lines() {
        if let Some(c) = STEP.captures(line) {
            steps.push(c[2].trim().to_string());
        } else if let Some(last) = steps.last_mut() {
            let extra = line.trim();
            if !extra.is_empty() {
                if !last.is_empty() {
                    last.push(' ');
                }
                last.push_str(extra);
            }
        }
    }
    (!steps.is_empty()).then_some(steps)
}

pub fn generate_guidance(
    graphs: &[RetrievedGraph],
    target_json: &str,
    llm: &Gateway,
    seed: u64,
) -> Result<GuidancePrompt, LlmError> {
    if graphs.is_empty() {
        return Ok(GuidancePrompt::default());
    }
    let req = LlmRequest::new(GUIDE_SYSTEM_PROMPT, build_guidance_request(graphs, target_json)).with_seed(seed);
    let resp = llm.complete(&req)?;
    let source_graphs = graphs.iter().map(|g| g.ir_id.clone()).collect();
    let (steps, unparsed) = match parse_steps(&resp.text) {
        Some(steps) => (steps, false),
        None => {
            tracing::warn!("guidance response has no STEP lines, keeping it as one step");
            (vec![resp.text.trim().to_string()], true)
        }
    };
    Ok(GuidancePrompt { steps, source_graphs, unparsed, latency_seconds: resp.latency_seconds })
}

/// P_identify, then the guidance, then the JSON target, then the graph
/// descriptions.
pub fn build_identify_prompt(guide: &GuidancePrompt, target_json: &str, descriptions: &[&str]) -> String {
    let mut p = String::from(P_IDENTIFY);
    p.push('\n');
    if !guide.is_empty() {
        p.push_str(&guide.render());
        p.push('\n');
    }
    p.push_str("- Input: The content of target IR, which is formatted as JSON.\n");
    p.push_str(target_json);
    p.push('\n');
    if !descriptions.is_empty() {
        p.push_str("- Input: The textual description of all the selected graphs.\n");
        for d in descriptions {
            p.push_str(d);
            p.push('\n');
        }
    }
    p
}

pub fn identify(
    ir_id: &str,
    prompt: String,
    guide: &GuidancePrompt,
    llm: &Gateway,
    theta_out: f64,
    seed: u64,
) -> Result<Prediction, IdentifyError> {
    if !(0.0..=1.0).contains(&theta_out) {
        return Err(IdentifyError::InvalidThreshold(theta_out));
    }
    let req = LlmRequest::new(IDENTIFY_SYSTEM_PROMPT, prompt).with_logprobs().with_seed(seed);
    let mut diagnostics = Vec::new();
    if guide.unparsed {
        diagnostics.push("guidance kept as raw text".to_string());
    }
    let resp = match llm.complete(&req) {
        Ok(r) => r,
        Err(e @ LlmError::LogprobsUnavailable) => {
            diagnostics.push(format!("unscored: {e}"));
            return Ok(unscored(ir_id, theta_out, guide, diagnostics));
        }
        Err(e) => return Err(e.into()),
    };
    let latency_seconds = guide.latency_seconds + resp.latency_seconds;
    let p_yes = match yes_probability(&resp) {
        Ok(p) => p,
        Err(e) => {
            tracing::warn!(ir = ir_id, "prediction unscored: {e}");
            diagnostics.push(format!("unscored: {e}"));
            return Ok(Prediction { latency_seconds, ..unscored(ir_id, theta_out, guide, diagnostics) });
        }
    };
    let verdict = p_yes >= theta_out;
    let mut cwes = CWE.find_iter(&resp.text).map(|m| m.as_str().to_string());
    let first = cwes.next();
    let rest: Vec<String> = cwes.collect();
    if !rest.is_empty() {
        diagnostics.push(format!("extra CWE mentions: {}", rest.join(", ")));
    }
    Ok(Prediction {
        ir_id: ir_id.to_string(),
        p_yes: Some(p_yes),
        verdict,
        cwe_id: if verdict { first } else { None },
        theta_out,
        guidance_used: !guide.is_empty(),
        latency_seconds,
        diagnostics,
        run: 0,
        config_hash: String::new(),
    })
}

fn unscored(ir_id: &str, theta_out: f64, guide: &GuidancePrompt, diagnostics: Vec<String>) -> Prediction {
    Prediction {
        ir_id: ir_id.to_string(),
        p_yes: None,
        verdict: false,
        cwe_id: None,
        theta_out,
        guidance_used: !guide.is_empty(),
        latency_seconds: guide.latency_seconds,
        diagnostics,
        run: 0,
        config_hash: String::new(),
    }
}

/// Re-thresholds a scored prediction.
pub fn apply_threshold(p: &Prediction, theta_out: f64) -> Prediction {
    let mut out = p.clone();
    out.theta_out = theta_out;
    out.verdict = p.p_yes.is_some_and(|x| x >= theta_out);
    if !out.verdict {
        out.cwe_id = None;
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::corpus::{ElementKind, RichTextElement};
    use crate::llm::{LlmConfig, StubBackend, StubRule};
    use crate::retrieval::ReservedGraph;
    use crate::graph::ReasoningGraph;
    use proptest::prelude::*;

    fn ir() -> CanonicalIR {
        CanonicalIR {
            id: "fuel-cms/fuel-cms#536".into(),
            title: "XSS after saving title".into(),
            content: "save the title [SCR1] then open [SCR2]".into(),
            rich_text: vec![
                RichTextElement::new(ElementKind::Scr, 1, "https://img/1.png"),
                RichTextElement::new(ElementKind::Scr, 2, "https://img/2.png"),
            ],
            created_at: 0,
            label_vul: Some(true),
            cwe_id: Some("CWE-79".into()),
            cve_id: None,
            page_missing: false,
        }
    }

    fn logprobs(yes: f64) -> Option<BTreeMap<String, f64>> {
        Some(BTreeMap::from([("Yes".to_string(), yes.ln()), ("No".to_string(), (1.0 - yes).ln())]))
    }

    fn gw(rules: Vec<StubRule>) -> Gateway {
        Gateway::new(Arc::new(StubBackend::new(rules).unwrap()), &LlmConfig::default())
    }

    fn retrieved(id: &str, desc: &str) -> RetrievedGraph {
        RetrievedGraph {
            ir_id: id.into(),
            similarity: 0.8,
            description: desc.into(),
            reserved: Arc::new(ReservedGraph {
                graph: ReasoningGraph::new(id),
                origin_ir: id.into(),
                description: desc.into(),
            }),
        }
    }

    #[test]
    fn step_grammar() {
        assert_eq!(parse_steps("STEP-1: x\nSTEP-2: y").unwrap(), ["x", "y"]);
        assert_eq!(parse_steps("intro\nSTEP-1: look\n  closer\nSTEP-2. done").unwrap(), ["look closer", "done"]);
        assert!(parse_steps("no steps here").is_none());
    }

    #[test]
    fn empty_retrieval_skips_guidance() {
        let g = generate_guidance(&[], "{}", &gw(vec![]), 0).unwrap();
        assert!(g.is_empty());
        assert!(g.source_graphs.is_empty());
    }

    #[test]
    fn guidance_for_fig_target() {
        let rules = vec![StubRule {
            pattern: "Reasoning records:".into(),
            response_text: "STEP-1: Analyze the main page [SCR1] where the title is saved.\n\
STEP-2: Analyze the XSS-triggered page [SCR2] reached after redirection.\n\
STEP-3: Check whether the title is rendered without escaping."
                .into(),
            first_token_logprobs: None,
        }];
        let j = target_json(&ir(), &ir().content);
        let g = generate_guidance(&[retrieved("a#1", "from the observation O1 ...")], &j, &gw(rules), 0).unwrap();
        assert_eq!(g.steps.len(), 3);
        assert!(g.steps[0].contains("main page"));
        assert!(g.steps[1].contains("XSS-triggered page"));
        assert_eq!(g.source_graphs, ["a#1"]);
        assert!(!g.unparsed);
    }

    #[test]
    fn unparseable_guidance_kept_raw() {
        let rules = vec![StubRule { pattern: ".".into(), response_text: "look at it".into(), first_token_logprobs: None }];
        let g = generate_guidance(&[retrieved("a#1", "d")], "{}", &gw(rules), 0).unwrap();
        assert_eq!(g.steps, ["look at it"]);
        assert!(g.unparsed);
    }

    #[test]
    fn target_json_hides_labels() {
        let j = target_json(&ir(), "flat");
        assert!(!j.contains("CWE-79"));
        assert!(!j.contains("label"));
        assert!(j.contains("\"[SCR1]\""));
    }

    #[test]
    fn prompt_order() {
        let guide = GuidancePrompt { steps: vec!["a".into()], ..Default::default() };
        let p = build_identify_prompt(&guide, "{\"id\":1}", &["desc one"]);
        let pos = |s: &str| p.find(s).unwrap();
        assert!(p.starts_with(P_IDENTIFY));
        assert!(pos("STEP-1: a") < pos("{\"id\":1}"));
        assert!(pos("{\"id\":1}") < pos("desc one"));
    }

    fn predict(yes: f64, text: &str, theta: f64) -> Prediction {
        let rules = vec![StubRule { pattern: ".".into(), response_text: text.into(), first_token_logprobs: logprobs(yes) }];
        identify("x#1", "prompt".into(), &GuidancePrompt::default(), &gw(rules), theta, 0).unwrap()
    }

    #[test]
    fn thresholding() {
        let p = predict(0.9, "Yes\nCWE-79", 0.55);
        assert!(p.verdict);
        assert_eq!(p.cwe_id.as_deref(), Some("CWE-79"));
        assert!((p.p_yes.unwrap() - 0.9).abs() < 1e-12);
        let p = predict(0.5, "No\nCWE-79", 0.55);
        assert!(!p.verdict);
        assert_eq!(p.cwe_id, None);
        assert!(!p.guidance_used);
    }

    #[test]
    fn extra_cwes_go_to_diagnostics() {
        let p = predict(0.9, "Yes CWE-79 or CWE-352", 0.55);
        assert_eq!(p.cwe_id.as_deref(), Some("CWE-79"));
        assert!(p.diagnostics.iter().any(|d| d.contains("CWE-352")));
    }

    #[test]
    fn missing_label_is_unscored() {
        let rules = vec![StubRule {
            pattern: ".".into(),
            response_text: "Maybe".into(),
            first_token_logprobs: Some(BTreeMap::from([("Maybe".to_string(), -0.1)])),
        }];
        let p = identify("x#1", "p".into(), &GuidancePrompt::default(), &gw(rules), 0.55, 0).unwrap();
        assert!(!p.is_scored());
        assert!(!p.verdict);
        let rules = vec![StubRule { pattern: ".".into(), response_text: "Yes".into(), first_token_logprobs: None }];
        let p = identify("x#1", "p".into(), &GuidancePrompt::default(), &gw(rules), 0.55, 0).unwrap();
        assert!(!p.is_scored());
        assert!(matches!(
            identify("x", "p".into(), &GuidancePrompt::default(), &gw(vec![]), 1.5, 0),
            Err(IdentifyError::InvalidThreshold(_))
        ));
    }

    proptest! {
        #[test]
        fn raising_theta_never_flips_to_true(p in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let base = Prediction {
                ir_id: "x".into(), p_yes: Some(p), verdict: false, cwe_id: Some("CWE-79".into()),
                theta_out: 0.0, guidance_used: false, latency_seconds: 0.0, diagnostics: vec![], run: 0, config_hash: String::new(),
            };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let low = apply_threshold(&base, lo);
            let high = apply_threshold(&base, hi);
            prop_assert!(!high.verdict || low.verdict);
            prop_assert_eq!(low.verdict, p >= lo);
            prop_assert!(high.verdict || high.cwe_id.is_none());
        }
    }
}
