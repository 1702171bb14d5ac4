use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{CanonicalIR, ElementKind, RichTextElement};
use crate::graph::{Tool, Verdict};

pub const INCLUSION_NOTE: &str = "We suggest you first analyze the text, then explore the page screenshot [SCR], \
and finally analyze the code snippets [CODE].";

pub const REASON_SYSTEM_PROMPT: &str =
    "You are a security analyst who reasons over issue reports one step at a time using the listed tools.";

static VERDICT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*vulnerability identified:\s*(yes|no|undecided)\b(.*)$").unwrap());
static ACTION_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*action:\s*(.*)$").unwrap());
static OBSERVATION_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*observation:\s*(.*)$").unwrap());
static CALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([A-Za-z]+)\(([^()]*)\)").unwrap());
pub(crate) static CWE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"CWE-[0-9]+").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedAction {
    pub tool: Tool,
    pub tag: String,
}

/// One parsed agent reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepParse {
    pub observation_text: String,
    pub verdict: Verdict,
    /// Tool actions in reply order (terminator excluded).
    pub actions: Vec<ProposedAction>,
    /// Explicit `AgentTerminator()` or no parseable action at all.
    pub terminate: bool,
    pub warnings: Vec<String>,
}

impl StepParse {
    pub fn chosen_elements(&self) -> Vec<&str> {
        self.actions.iter().map(|a| a.tag.as_str()).collect()
    }
}

/// Parses `Observation:`, `Vulnerability identified:` and `Action:` lines.
/// Never fails; malformed action text is skipped with a warning.
pub fn parse_step(resp_text: &str) -> StepParse {
    let mut observation: Vec<&str> = Vec::new();
    let mut in_observation = false;
    let mut verdict = Verdict::Undecided;
    let mut actions = Vec::new();
    let mut explicit_stop = false;
    let mut warnings = Vec::new();
    let mut any_label = false;

    for line in resp_text.lines() {
        if let Some(c) = VERDICT_LINE.captures(line) {
            any_label = true;
            in_observation = false;
            verdict = match c[1].to_ascii_lowercase().as_str() {
                "yes" => Verdict::Vul(CWE.find(&c[2]).map(|m| m.as_str().to_string())),
                "no" => Verdict::NotVul,
                _ => Verdict::Undecided,
            };
        } else if let Some(c) = ACTION_LINE.captures(line) {
            any_label = true;
            in_observation = false;
            let body = c.get(1).unwrap().as_str();
            let mut parsed_any = false;
            for call in CALL.captures_iter(body) {
                parsed_any = true;
                let (name, arg) = (&call[1], call[2].trim());
                match Tool::from_name(name) {
                    Some(Tool::AgentTerminator) => explicit_stop = true,
                    Some(tool) => match RichTextElement::parse_tag(arg) {
                        Some(_) => actions.push(ProposedAction { tool, tag: arg.to_string() }),
                        None => warnings.push(format!("action {name}({arg}) has no valid tag")),
                    },
                    None => warnings.push(format!("unknown tool {name}")),
                }
            }
            if !parsed_any && !body.trim().is_empty() {
                warnings.push(format!("unparseable action line {:?}", line.trim()));
            }
        } else if let Some(c) = OBSERVATION_LINE.captures(line) {
            any_label = true;
            in_observation = true;
            observation.push(c.get(1).unwrap().as_str().trim());
        } else if in_observation || !any_label {
            observation.push(line.trim());
        }
    }
    let observation_text = observation.into_iter().filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ");
    StepParse { observation_text, verdict, terminate: explicit_stop || actions.is_empty(), actions, warnings }
}

/// Drops CODE actions while the IR still has screenshots that are not yet
/// explored on this path. Order within a kind is kept.
pub fn enforce_inclusion_order(parse: &StepParse, ir: &CanonicalIR, explored: &BTreeSet<String>) -> StepParse {
    let scr_pending = ir.rich_text.iter().any(|e| e.kind == ElementKind::Scr && !explored.contains(&e.tag));
    if !scr_pending {
        return parse.clone();
    }
    let mut out = parse.clone();
    out.actions.retain(|a| a.tool != Tool::CodeAnalyzer);
    out
}

/// Keeps actions whose tag exists in the IR with the matching kind and is
/// not yet explored on the path, without repeats.
pub fn filter_actions(parse: &StepParse, ir: &CanonicalIR, explored: &BTreeSet<String>) -> (Vec<ProposedAction>, Vec<String>) {
    let mut kept: Vec<ProposedAction> = Vec::new();
    let mut dropped = Vec::new();
    for a in &parse.actions {
        let want = if a.tool == Tool::ScrAnalyzer { ElementKind::Scr } else { ElementKind::Code };
        match ir.element(&a.tag) {
            None => dropped.push(format!("{} not in the IR", a.tag)),
            Some(el) if el.kind != want => dropped.push(format!("{}({}) kind mismatch", a.tool.name(), a.tag)),
            Some(_) if explored.contains(&a.tag) => dropped.push(format!("{} already explored", a.tag)),
            Some(_) if kept.iter().any(|k| k.tag == a.tag) => {}
            Some(_) => kept.push(a.clone()),
        }
    }
    (kept, dropped)
}

fn element_line(el: &RichTextElement) -> String {
    match el.kind {
        ElementKind::Scr => format!("{} page screenshot: {}", el.tag, el.payload),
        ElementKind::Code => {
            let first = el.payload.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            format!("{} code snippet: {first}", el.tag)
        }
    }
}

/// Current position of the agent, rendered into the prompt.
pub struct PromptContext<'a> {
    /// `describe_path` of the path leading to the node being expanded.
    pub path_description: Option<&'a str>,
    pub explored: &'a BTreeSet<String>,
    /// Tool call being taken and its output.
    pub current_step: Option<(Tool, &'a str, &'a str)>,
    pub include_inclusion_note: bool,
}

pub fn build_reason_prompt(ir: &CanonicalIR, ctx: &PromptContext) -> String {
    let mut p = String::new();
    p.push_str(
        "Please think step by step. At each step select the rich-text elements related to a possible vulnerability, \
decide whether this issue report contains a vulnerability, and write an Observation. Then choose Actions from the \
Tools to continue to the next Observation.\n",
    );
    p.push_str("Definitions:\n");
    p.push_str("- Observation: what the analyzed text and elements reveal about a vulnerability.\n");
    p.push_str("- Action: one tool call on one rich-text element.\n");
    p.push_str("Tools:\n");
    p.push_str("- ScrAnalyzer([SCRn]): extract the text and page elements of a screenshot.\n");
    p.push_str("- CodeAnalyzer([CODEn]): describe what a code snippet does.\n");
    p.push_str("- AgentTerminator(): stop reasoning.\n");
    if ctx.include_inclusion_note {
        p.push_str("Note of inclusion relationship: ");
        p.push_str(INCLUSION_NOTE);
        p.push('\n');
    }
    p.push_str("Reply format:\nObservation: <text>\nVulnerability identified: <Yes CWE-n | No | Undecided>\nAction: <Tool>(<tag>)\n\n");
    p.push_str(&format!("IR id: {}\n", ir.id));
    p.push_str(&format!("Title: {}\n", ir.title));
    p.push_str(&format!("Content: {}\n", ir.content));
    p.push_str("Rich-text elements:\n");
    if ir.rich_text.is_empty() {
        p.push_str("none\n");
    }
    for el in &ir.rich_text {
        p.push_str(&element_line(el));
        p.push('\n');
    }
    p.push_str(&format!("Context: {}\n", ctx.path_description.unwrap_or("none")));
    let explored = if ctx.explored.is_empty() {
        "none".to_string()
    } else {
        ctx.explored.iter().cloned().collect::<Vec<_>>().join(", ")
    };
    p.push_str(&format!("Explored elements: {explored}\n"));
    match ctx.current_step {
        Some((tool, tag, output)) => {
            p.push_str(&format!("Current step: {}({tag})\n", tool.name()));
            p.push_str(&format!("Tool output: {output}\n"));
        }
        None => p.push_str("Current step: none\n"),
    }
    p
}

/// Text of the terminal child created when the first step already decides.
pub fn verdict_statement(v: &Verdict) -> String {
    match v {
        Verdict::Vul(Some(c)) => format!("the issue report describes a {c} vulnerability"),
        Verdict::Vul(None) => "the issue report describes a vulnerability of unknown type".into(),
        Verdict::NotVul => "the issue report does not describe a vulnerability".into(),
        Verdict::Undecided => "no decision".into(),
    }
}
