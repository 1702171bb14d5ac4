//! Reasoning graphs: observations joined by tool actions, terminated-path
//! extraction and the text descriptions used for retrieval and correction.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROOT_ID: &str = "O1";

const FILE_ENCODE: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.');

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge {from} -> {to} would close a cycle")]
    CycleIntroduced { from: String, to: String },
    #[error("edge endpoint {0} does not exist")]
    DanglingEndpoint(String),
    #[error("id {0} already used")]
    DuplicateId(String),
    #[error("action {from} -> {to} via {tool:?}({argument}) already present")]
    DuplicateAction { from: String, to: String, tool: Tool, argument: String },
    #[error("graph invariant violated: {0}")]
    InvariantViolation(String),
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tool {
    ScrAnalyzer,
    CodeAnalyzer,
    AgentTerminator,
}

impl Tool {
    pub fn name(self) -> &'static str {
        match self {
            Tool::ScrAnalyzer => "ScrAnalyzer",
            Tool::CodeAnalyzer => "CodeAnalyzer",
            Tool::AgentTerminator => "AgentTerminator",
        }
    }

    pub fn from_name(name: &str) -> Option<Tool> {
        match name {
            "ScrAnalyzer" => Some(Tool::ScrAnalyzer),
            "CodeAnalyzer" => Some(Tool::CodeAnalyzer),
            "AgentTerminator" => Some(Tool::AgentTerminator),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "cwe_id")]
pub enum Verdict {
    Undecided,
    /// Vulnerability found; the CWE may be unknown.
    Vul(Option<String>),
    NotVul,
}

impl Verdict {
    pub fn is_decided(&self) -> bool {
        !matches!(self, Verdict::Undecided)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub focus_tags: Vec<String>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub id: String,
    pub from: String,
    pub to: String,
    pub tool: Tool,
    #[serde(default)]
    pub argument: String,
}

/// Alternating observation/action sequence starting at the root.
/// `actions[i]` joins `observations[i]` to `observations[i + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub observations: Vec<String>,
    pub actions: Vec<String>,
}

impl Path {
    pub fn last(&self) -> &str {
        self.observations.last().map(String::as_str).unwrap_or("")
    }

    /// Flattened `O1, A1.1, O2.1, ...` form.
    pub fn steps(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.observations.len() + self.actions.len());
        for (i, o) in self.observations.iter().enumerate() {
            out.push(o.as_str());
            if let Some(a) = self.actions.get(i) {
                out.push(a.as_str());
            }
        }
        out
    }
}

/// Orders ids such as `O2.10` after `O2.9` by comparing digit runs numerically.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn parts(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (pa, pb) = (parts(a), parts(b));
    for (x, y) in pa.iter().zip(&pb) {
        let ord = match (x, y) {
            ((true, x), (true, y)) => {
                let (x, y) = (x.trim_start_matches('0'), y.trim_start_matches('0'));
                x.len().cmp(&y.len()).then_with(|| x.cmp(y))
            }
            ((_, x), (_, y)) => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    pa.len().cmp(&pb.len()).then_with(|| a.cmp(b))
}

fn natural_seq_cmp(a: &[String], b: &[String]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = natural_cmp(x, y);
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningGraph {
    pub ir_id: String,
    /// In insertion order.
    pub nodes: Vec<Observation>,
    /// In insertion order.
    pub edges: Vec<Action>,
    /// Set when generation stopped early (gateway exhausted).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ReasoningGraph {
    pub fn new(ir_id: impl Into<String>) -> Self {
        Self { ir_id: ir_id.into(), nodes: Vec::new(), edges: Vec::new(), partial: false, warnings: Vec::new() }
    }

    pub fn node(&self, id: &str) -> Option<&Observation> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Observation> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn node_position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn action(&self, id: &str) -> Option<&Action> {
        self.edges.iter().find(|a| a.id == id)
    }

    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Action> + 'a {
        self.edges.iter().filter(move |a| a.from == id)
    }

    pub fn incoming<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Action> + 'a {
        self.edges.iter().filter(move |a| a.to == id)
    }

    pub fn out_degree(&self, id: &str) -> usize {
        self.outgoing(id).count()
    }

    /// In-degree plus out-degree.
    pub fn degree(&self, id: &str) -> usize {
        self.edges.iter().filter(|a| a.from == id || a.to == id).count()
    }

    /// No outgoing actions.
    pub fn is_sink(&self, id: &str) -> bool {
        self.out_degree(id) == 0
    }

    /// A sink reached by a terminator action or carrying a verdict.
    pub fn is_terminal(&self, id: &str) -> bool {
        self.is_sink(id)
            && (self.node(id).is_some_and(|n| n.verdict.is_decided())
                || self.incoming(id).any(|a| a.tool == Tool::AgentTerminator))
    }

    fn reaches(&self, from: &str, to: &str) -> bool {
        let mut stack = vec![from];
        let mut seen = HashSet::new();
        while let Some(cur) = stack.pop() {
            if cur == to {
                return true;
            }
            if seen.insert(cur) {
                stack.extend(self.outgoing(cur).map(|a| a.to.as_str()));
            }
        }
        false
    }

    /// Whether `ancestor` is `node` or reaches it.
    pub fn is_ancestor_or_self(&self, ancestor: &str, node: &str) -> bool {
        self.reaches(ancestor, node)
    }

    pub fn add_observation(&mut self, obs: Observation) -> Result<(), GraphError> {
        if self.node(&obs.id).is_some() {
            return Err(GraphError::DuplicateId(obs.id));
        }
        if self.nodes.is_empty() && obs.id != ROOT_ID {
            return Err(GraphError::InvariantViolation(format!("first observation must be {ROOT_ID}, got {}", obs.id)));
        }
        self.nodes.push(obs);
        Ok(())
    }

    pub fn add_action(&mut self, act: Action) -> Result<(), GraphError> {
        for end in [&act.from, &act.to] {
            if self.node(end).is_none() {
                return Err(GraphError::DanglingEndpoint(end.clone()));
            }
        }
        if self.action(&act.id).is_some() {
            return Err(GraphError::DuplicateId(act.id));
        }
        if self
            .edges
            .iter()
            .any(|a| a.from == act.from && a.to == act.to && a.tool == act.tool && a.argument == act.argument)
        {
            return Err(GraphError::DuplicateAction {
                from: act.from,
                to: act.to,
                tool: act.tool,
                argument: act.argument,
            });
        }
        if act.from == act.to || self.reaches(&act.to, &act.from) {
            return Err(GraphError::CycleIntroduced { from: act.from, to: act.to });
        }
        if self.node(&act.from).is_some_and(|n| n.verdict.is_decided()) {
            return Err(GraphError::InvariantViolation(format!("{} carries a verdict and cannot act", act.from)));
        }
        if self.incoming(&act.from).any(|a| a.tool == Tool::AgentTerminator) {
            return Err(GraphError::InvariantViolation(format!("{} was reached by a terminator", act.from)));
        }
        if act.tool == Tool::AgentTerminator && !self.is_sink(&act.to) {
            return Err(GraphError::InvariantViolation(format!("terminator target {} has outgoing actions", act.to)));
        }
        self.edges.push(act);
        Ok(())
    }

    /// Full invariant check, used after loading from disk.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut rebuilt = ReasoningGraph::new(self.ir_id.clone());
        for n in &self.nodes {
            rebuilt.add_observation(n.clone())?;
        }
        for a in &self.edges {
            rebuilt.add_action(a.clone())?;
        }
        // insertion order may add an action out of a node before its verdict
        // is known to be terminal, so recheck the terminal rules on the whole set
        for n in &self.nodes {
            if n.verdict.is_decided() && !self.is_sink(&n.id) {
                return Err(GraphError::InvariantViolation(format!("{} has a verdict and outgoing actions", n.id)));
            }
            if self.incoming(&n.id).any(|a| a.tool == Tool::AgentTerminator) && !self.is_sink(&n.id) {
                return Err(GraphError::InvariantViolation(format!("terminator target {} has outgoing actions", n.id)));
            }
            if !self.reaches(ROOT_ID, &n.id) {
                return Err(GraphError::InvariantViolation(format!("{} is unreachable from {ROOT_ID}", n.id)));
            }
        }
        Ok(())
    }

    /// Every root-to-sink path that ends in termination: the last action is
    /// a terminator or the last node carries a verdict. Undecided dead ends
    /// are not terminated. Sorted by node-id sequence.
    pub fn extract_terminated_paths(&self) -> Vec<Path> {
        let mut out = Vec::new();
        if self.node(ROOT_ID).is_none() {
            return out;
        }
        let mut obs = vec![ROOT_ID.to_string()];
        let mut acts = Vec::new();
        self.dfs_paths(&mut obs, &mut acts, &mut out);
        out.sort_by(|a, b| {
            natural_seq_cmp(&a.observations, &b.observations)
                .then_with(|| natural_seq_cmp(&a.actions, &b.actions))
        });
        out
    }

    fn dfs_paths(&self, obs: &mut Vec<String>, acts: &mut Vec<String>, out: &mut Vec<Path>) {
        let cur = obs.last().unwrap().clone();
        let mut any = false;
        for a in self.outgoing(&cur) {
            any = true;
            obs.push(a.to.clone());
            acts.push(a.id.clone());
            self.dfs_paths(obs, acts, out);
            obs.pop();
            acts.pop();
        }
        if !any && self.is_terminal(&cur) {
            out.push(Path { observations: obs.clone(), actions: acts.clone() });
        }
    }

    /// Checks that `p` starts at the root and follows existing actions.
    pub fn is_valid_path(&self, p: &Path) -> bool {
        if p.observations.first().map(String::as_str) != Some(ROOT_ID)
            || p.actions.len() + 1 != p.observations.len()
        {
            return false;
        }
        p.actions.iter().enumerate().all(|(i, aid)| {
            self.action(aid).is_some_and(|a| a.from == p.observations[i] && a.to == p.observations[i + 1])
        })
    }

    /// Renders a path as hop clauses followed by the observation texts.
    pub fn describe_path(&self, p: &Path) -> String {
        let text = |id: &str| self.node(id).map(|n| n.text.as_str()).unwrap_or("");
        if p.actions.is_empty() {
            return text(p.last()).to_string();
        }
        let hops: Vec<String> = p
            .actions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                format!(
                    "from the observation {}, we ask LLM to take the action {}, and the next operation is {}",
                    p.observations[i],
                    a,
                    p.observations[i + 1]
                )
            })
            .collect();
        let texts: Vec<String> = p.observations.iter().map(|o| format!("({})", text(o))).collect();
        format!("{} {}", hops.join("; "), texts.join(" "))
    }

    pub fn describe_graph(&self) -> String {
        self.extract_terminated_paths().iter().map(|p| self.describe_path(p)).collect::<Vec<_>>().join("\n")
    }

    /// Induced copy restricted to the given nodes and actions, keeping the
    /// original insertion order.
    pub fn restrict(&self, nodes: &BTreeSet<String>, edges: &BTreeSet<String>) -> ReasoningGraph {
        ReasoningGraph {
            ir_id: self.ir_id.clone(),
            nodes: self.nodes.iter().filter(|n| nodes.contains(&n.id)).cloned().collect(),
            edges: self
                .edges
                .iter()
                .filter(|a| edges.contains(&a.id) && nodes.contains(&a.from) && nodes.contains(&a.to))
                .cloned()
                .collect(),
            partial: self.partial,
            warnings: Vec::new(),
        }
    }

    pub fn max_depth(&self) -> usize {
        fn depth(g: &ReasoningGraph, id: &str) -> usize {
            g.outgoing(id).map(|a| 1 + depth(g, &a.to)).max().unwrap_or(1)
        }
        if self.nodes.is_empty() {
            0
        } else {
            depth(self, ROOT_ID)
        }
    }
}

/// File name of a graph inside `<db>/graphs/`.
pub fn graph_file_name(ir_id: &str) -> String {
    format!("{}.json", utf8_percent_encode(ir_id, FILE_ENCODE))
}

pub fn ir_id_from_file_name(name: &str) -> Option<String> {
    let stem = name.strip_suffix(".json")?;
    percent_decode_str(stem).decode_utf8().ok().map(|s| s.into_owned())
}

pub fn graph_path(db: &FsPath, ir_id: &str) -> PathBuf {
    db.join("graphs").join(graph_file_name(ir_id))
}

pub fn save_graph(db: &FsPath, g: &ReasoningGraph) -> Result<PathBuf, GraphError> {
    let path = graph_path(db, &g.ir_id);
    fs::create_dir_all(path.parent().unwrap())?;
    let json = serde_json::to_string_pretty(g)
        .map_err(|source| GraphError::Json { path: path.display().to_string(), source })?;
    fs::write(&path, json + "\n")?;
    Ok(path)
}

pub fn load_graph(path: &FsPath) -> Result<ReasoningGraph, GraphError> {
    let raw = fs::read_to_string(path)?;
    let g: ReasoningGraph =
        serde_json::from_str(&raw).map_err(|source| GraphError::Json { path: path.display().to_string(), source })?;
    g.validate()?;
    Ok(g)
}

/// Loads every graph under `<db>/graphs/`, sorted by IR id.
pub fn load_all_graphs(db: &FsPath) -> Result<Vec<ReasoningGraph>, GraphError> {
    let dir = db.join("graphs");
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for p in paths {
        out.push(load_graph(&p)?);
    }
    out.sort_by(|a, b| a.ir_id.cmp(&b.ir_id));
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn obs(id: &str, text: &str, verdict: Verdict) -> Observation {
        Observation { id: id.into(), text: text.into(), focus_tags: vec![], verdict }
    }

    pub(crate) fn act(id: &str, from: &str, to: &str, tool: Tool, arg: &str) -> Action {
        Action { id: id.into(), from: from.into(), to: to.into(), tool, argument: arg.into() }
    }

    /// The seven-observation, ten-action example graph.
    pub(crate) fn fig_graph() -> ReasoningGraph {
        let u = || Verdict::Undecided;
        let mut g = ReasoningGraph::new("fuel-cms/fuel-cms#536");
        for o in [
            obs("O1", "the issue describes a page redirection after saving a title", u()),
            obs("O2.1", "the main page shows the saved title field", u()),
            obs("O2.2", "the settings page lists the navigation entries", u()),
            obs("O2.3", "the login page has no input related to the title", u()),
            obs("O2.4", "the preview page renders the title unescaped", u()),
            obs("O3.1", "a script payload in the title executes on the main page", Verdict::Vul(Some("CWE-79".into()))),
            obs("O3.2", "the payload is triggered on the redirected page", Verdict::Vul(Some("CWE-79".into()))),
        ] {
            g.add_observation(o).unwrap();
        }
        for a in [
            act("A1.1", "O1", "O2.1", Tool::ScrAnalyzer, "[SCR1]"),
            act("A1.2", "O1", "O2.2", Tool::ScrAnalyzer, "[SCR2]"),
            act("A1.3", "O1", "O2.3", Tool::ScrAnalyzer, "[SCR3]"),
            act("A1.4", "O1", "O2.4", Tool::ScrAnalyzer, "[SCR4]"),
            act("A2.1", "O2.1", "O3.1", Tool::ScrAnalyzer, "[SCR2]"),
            act("A2.2", "O2.1", "O2.3", Tool::ScrAnalyzer, "[SCR3]"),
            act("A2.3", "O2.2", "O3.2", Tool::ScrAnalyzer, "[SCR4]"),
            act("A2.4", "O2.4", "O3.2", Tool::ScrAnalyzer, "[SCR2]"),
            act("A2.5", "O2.4", "O3.1", Tool::ScrAnalyzer, "[SCR1]"),
            act("A2.6", "O2.4", "O2.3", Tool::ScrAnalyzer, "[SCR3]"),
        ] {
            g.add_action(a).unwrap();
        }
        g
    }

    #[test]
    fn dangling_endpoint() {
        let mut g = ReasoningGraph::new("x");
        g.add_observation(obs("O1", "a", Verdict::Undecided)).unwrap();
        let err = g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "[SCR1]")).unwrap_err();
        assert!(matches!(err, GraphError::DanglingEndpoint(id) if id == "O2"));
    }

    #[test]
    fn cycle_is_rejected() {
        let mut g = ReasoningGraph::new("x");
        g.add_observation(obs("O1", "a", Verdict::Undecided)).unwrap();
        g.add_observation(obs("O2", "b", Verdict::Undecided)).unwrap();
        g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "[SCR1]")).unwrap();
        let err = g.add_action(act("A2", "O2", "O1", Tool::ScrAnalyzer, "[SCR2]")).unwrap_err();
        assert!(matches!(err, GraphError::CycleIntroduced { .. }));
        assert!(matches!(
            g.add_action(act("A3", "O2", "O2", Tool::ScrAnalyzer, "")),
            Err(GraphError::CycleIntroduced { .. })
        ));
    }

    #[test]
    fn duplicates_are_rejected() {
        let mut g = ReasoningGraph::new("x");
        g.add_observation(obs("O1", "a", Verdict::Undecided)).unwrap();
        assert!(matches!(g.add_observation(obs("O1", "b", Verdict::Undecided)), Err(GraphError::DuplicateId(_))));
        g.add_observation(obs("O2", "b", Verdict::Undecided)).unwrap();
        g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "[SCR1]")).unwrap();
        assert!(matches!(
            g.add_action(act("A2", "O1", "O2", Tool::ScrAnalyzer, "[SCR1]")),
            Err(GraphError::DuplicateAction { .. })
        ));
        assert!(matches!(
            g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "[SCR2]")),
            Err(GraphError::DuplicateId(_))
        ));
    }

    #[test]
    fn root_must_come_first_and_verdict_nodes_stay_terminal() {
        let mut g = ReasoningGraph::new("x");
        assert!(g.add_observation(obs("O2", "a", Verdict::Undecided)).is_err());
        g.add_observation(obs("O1", "a", Verdict::NotVul)).unwrap();
        g.add_observation(obs("O2", "b", Verdict::Undecided)).unwrap();
        assert!(matches!(
            g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "")),
            Err(GraphError::InvariantViolation(_))
        ));
    }

    #[test]
    fn fig_graph_counts() {
        let g = fig_graph();
        g.validate().unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (7, 10));
        let paths = g.extract_terminated_paths();
        assert_eq!(paths.len(), 4);
        let steps: Vec<Vec<&str>> = paths.iter().map(|p| p.steps()).collect();
        assert_eq!(steps, vec![
            vec!["O1", "A1.1", "O2.1", "A2.1", "O3.1"],
            vec!["O1", "A1.2", "O2.2", "A2.3", "O3.2"],
            vec!["O1", "A1.4", "O2.4", "A2.5", "O3.1"],
            vec!["O1", "A1.4", "O2.4", "A2.4", "O3.2"],
        ]);
        assert!(paths.iter().all(|p| g.is_valid_path(p)));
    }

    #[test]
    fn pruned_fig_graph_has_two_lines() {
        let g = fig_graph();
        let nodes = ["O1", "O2.1", "O2.4", "O3.1", "O3.2"].map(String::from).into_iter().collect();
        let edges = ["A1.1", "A1.4", "A2.1", "A2.4"].map(String::from).into_iter().collect();
        let r = g.restrict(&nodes, &edges);
        let paths = r.extract_terminated_paths();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].steps(), ["O1", "A1.1", "O2.1", "A2.1", "O3.1"]);
        assert_eq!(paths[1].steps(), ["O1", "A1.4", "O2.4", "A2.4", "O3.2"]);
        assert_eq!(r.describe_graph().lines().count(), 2);
    }

    #[test]
    fn single_chain() {
        let mut g = ReasoningGraph::new("x");
        g.add_observation(obs("O1", "start", Verdict::Undecided)).unwrap();
        g.add_observation(obs("O2", "done", Verdict::NotVul)).unwrap();
        g.add_action(act("A1", "O1", "O2", Tool::AgentTerminator, "")).unwrap();
        let paths = g.extract_terminated_paths();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].steps().len(), 3);
        assert_eq!(
            g.describe_path(&paths[0]),
            "from the observation O1, we ask LLM to take the action A1, and the next operation is O2 (start) (done)"
        );
        assert_eq!(g.describe_graph(), g.describe_path(&paths[0]));
    }

    #[test]
    fn two_hop_and_single_node_descriptions() {
        let mut g = ReasoningGraph::new("x");
        g.add_observation(obs("O1", "a", Verdict::Undecided)).unwrap();
        let single = Path { observations: vec!["O1".into()], actions: vec![] };
        assert_eq!(g.describe_path(&single), "a");
        g.add_observation(obs("O2", "b", Verdict::Undecided)).unwrap();
        g.add_observation(obs("O3", "c", Verdict::NotVul)).unwrap();
        g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "[SCR1]")).unwrap();
        g.add_action(act("A2", "O2", "O3", Tool::CodeAnalyzer, "[CODE1]")).unwrap();
        let d = g.describe_graph();
        assert_eq!(
            d,
            "from the observation O1, we ask LLM to take the action A1, and the next operation is O2; \
             from the observation O2, we ask LLM to take the action A2, and the next operation is O3 (a) (b) (c)"
        );
    }

    #[test]
    fn undecided_dead_end_is_not_terminated() {
        let mut g = ReasoningGraph::new("x");
        g.add_observation(obs("O1", "a", Verdict::Undecided)).unwrap();
        g.add_observation(obs("O2", "b", Verdict::Undecided)).unwrap();
        g.add_action(act("A1", "O1", "O2", Tool::ScrAnalyzer, "[SCR1]")).unwrap();
        assert!(g.extract_terminated_paths().is_empty());
        assert_eq!(g.describe_graph(), "");
    }

    #[test]
    fn natural_order() {
        assert_eq!(natural_cmp("O2.9", "O2.10"), Ordering::Less);
        assert_eq!(natural_cmp("O3.1", "O2.10"), Ordering::Greater);
        assert_eq!(natural_cmp("O2", "O2.1"), Ordering::Less);
        assert_eq!(natural_cmp("O9.1", "TERMINATE"), Ordering::Less);
    }

    #[test]
    fn storage_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = fig_graph();
        let p = save_graph(dir.path(), &g).unwrap();
        assert_eq!(p.file_name().unwrap(), "fuel-cms%2Ffuel-cms%23536.json");
        assert_eq!(ir_id_from_file_name("fuel-cms%2Ffuel-cms%23536.json").unwrap(), g.ir_id);
        assert_eq!(load_graph(&p).unwrap(), g);
        assert_eq!(load_all_graphs(dir.path()).unwrap(), vec![g]);
    }

    #[test]
    fn load_rejects_invalid_graph() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = fig_graph();
        g.edges.push(act("A9", "O3.1", "O1", Tool::ScrAnalyzer, ""));
        let p = dir.path().join("bad.json");
        fs::write(&p, serde_json::to_string(&g).unwrap()).unwrap();
        assert!(load_graph(&p).is_err());
    }

    /// Random DAG over `n` nodes where edges only go from lower to higher
    /// index; the last layer may carry verdicts.
    pub(crate) fn arb_dag(max_nodes: usize) -> impl Strategy<Value = ReasoningGraph> {
        (2..=max_nodes)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(any::<bool>(), n * n),
                    proptest::collection::vec(0..3u8, n),
                    proptest::collection::vec(proptest::sample::select(&["xss", "payload", "page", "token", "sql", "login"][..]), n * 2),
                )
            })
            .prop_map(|(n, bits, verdicts, words)| random_dag(n, &bits, &verdicts, &words))
    }

    pub(crate) fn random_dag(n: usize, bits: &[bool], verdicts: &[u8], words: &[&str]) -> ReasoningGraph {
        let id = |i: usize| if i == 0 { ROOT_ID.to_string() } else { format!("O{}", i + 1) };
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for j in 1..n {
            // guarantee reachability through one parent
            let parent = (0..j).rev().find(|&i| bits[i * n + j]).unwrap_or(j - 1);
            edges.push((parent, j));
            for i in 0..j {
                if i != parent && bits[i * n + j] && bits[j * n + i] {
                    edges.push((i, j));
                }
            }
        }
        let has_out: HashSet<usize> = edges.iter().map(|e| e.0).collect();
        let mut g = ReasoningGraph::new("dag");
        for i in 0..n {
            let verdict = if has_out.contains(&i) {
                Verdict::Undecided
            } else {
                match verdicts[i] {
                    0 => Verdict::Undecided,
                    1 => Verdict::NotVul,
                    _ => Verdict::Vul(Some("CWE-79".into())),
                }
            };
            let text = format!("{} {}", words[2 * i], words[2 * i + 1]);
            g.add_observation(obs(&id(i), &text, verdict)).unwrap();
        }
        for (k, (i, j)) in edges.iter().enumerate() {
            g.add_action(act(&format!("A{}", k + 1), &id(*i), &id(*j), Tool::ScrAnalyzer, &format!("[SCR{}]", k + 1)))
                .unwrap();
        }
        g
    }

    proptest! {
        #[test]
        fn serialization_round_trip(g in arb_dag(12)) {
            let json = serde_json::to_string(&g).unwrap();
            let back: ReasoningGraph = serde_json::from_str(&json).unwrap();
            back.validate().unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn terminated_paths_are_valid_and_bounded(g in arb_dag(10)) {
            let paths = g.extract_terminated_paths();
            let bound: usize = g.nodes.iter().map(|n| g.out_degree(&n.id).max(1)).product();
            prop_assert!(paths.len() <= bound);
            for p in &paths {
                prop_assert!(g.is_valid_path(p));
                prop_assert!(g.is_terminal(p.last()));
            }
            prop_assert_eq!(g.describe_graph(), g.clone().describe_graph());
        }
    }
}
