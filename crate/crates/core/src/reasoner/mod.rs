//! Agent loop that turns a historical IR into a reasoning graph: prompt,
//! parse, filter, run tools, grow the graph breadth-first and correct
//! terminated paths against golden knowledge.

mod correct;
mod step;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CanonicalIR;
use crate::graph::{Action, GraphError, Observation, Path, ReasoningGraph, Tool, Verdict, ROOT_ID};
use crate::knowledge::KnowledgeStore;
use crate::llm::{Gateway, LlmError, LlmRequest};
use crate::tools::{ToolRunner, TERMINATE};

pub use correct::{apply_corrections, build_correction_prompt, correct_path, CORRECTION_SYSTEM_PROMPT};
pub use step::{
    build_reason_prompt, enforce_inclusion_order, filter_actions, parse_step, verdict_statement, PromptContext,
    ProposedAction, StepParse, INCLUSION_NOTE, REASON_SYSTEM_PROMPT,
};

/// Id of the shared node that terminator actions point to.
pub const TERMINATE_ID: &str = "TERMINATE";

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("invalid reasoner config: {0}")]
    InvalidConfig(String),
    #[error("gateway exhausted before the first step: {0}")]
    GatewayExhausted(LlmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    pub max_depth: usize,
    pub max_nodes: usize,
    pub branch_limit: usize,
    pub correction_enabled: bool,
    pub theta_sim: f64,
    /// Defer code snippets until every screenshot on the path is explored.
    pub inclusion_order: bool,
    pub seed: u64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            max_nodes: 24,
            branch_limit: 4,
            correction_enabled: true,
            theta_sim: 0.7,
            inclusion_order: true,
            seed: 0,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<(), ReasonerError> {
        let bad = |m: &str| Err(ReasonerError::InvalidConfig(m.into()));
        if self.max_depth < 2 {
            return bad("max_depth must be at least 2 (root plus a terminal)");
        }
        if self.max_nodes < 2 {
            return bad("max_nodes must be at least 2");
        }
        if self.branch_limit < 1 {
            return bad("branch_limit must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.theta_sim) {
            return bad("theta_sim must lie in [0, 1]");
        }
        Ok(())
    }
}

pub struct Reasoner<'a> {
    pub cfg: &'a ReasonerConfig,
    pub llm: &'a Gateway,
    pub tools: &'a ToolRunner,
    /// Golden knowledge; correction is skipped when absent or empty.
    pub store: Option<&'a KnowledgeStore>,
}

impl Reasoner<'_> {
    /// Builds the reasoning graph of one IR. A gateway failure after the
    /// first step returns the graph built so far with `partial` set.
    pub fn generate_reasoning_graph(&self, ir: &CanonicalIR) -> Result<ReasoningGraph, ReasonerError> {
        self.cfg.validate()?;
        let mut b = Build {
            r: self,
            ir,
            g: ReasoningGraph::new(ir.id.clone()),
            level: HashMap::new(),
            original_text: HashMap::new(),
            node_counter: BTreeMap::new(),
            action_counter: BTreeMap::new(),
            frontier: VecDeque::new(),
            pending: HashSet::new(),
            seen_paths: HashSet::new(),
        };
        let explored = BTreeSet::new();
        let ctx = PromptContext {
            path_description: None,
            explored: &explored,
            current_step: None,
            include_inclusion_note: self.cfg.inclusion_order,
        };
        let root_step = b.ask(build_reason_prompt(ir, &ctx)).map_err(ReasonerError::GatewayExhausted)?;
        b.warn_all(&root_step.warnings);
        b.add_node(ROOT_ID.to_string(), 1, root_step.observation_text.clone(), vec![], Verdict::Undecided)?;

        if root_step.verdict.is_decided() {
            let id = b.next_node_id(2);
            b.add_node(id.clone(), 2, verdict_statement(&root_step.verdict), vec![], root_step.verdict.clone())?;
            b.add_edge(ROOT_ID, &id, Tool::AgentTerminator, "")?;
        } else {
            b.pending.insert(ROOT_ID.to_string());
            b.frontier.push_back((ROOT_ID.to_string(), root_step));
        }
        b.run_corrections();

        while let Some((x, s)) = b.frontier.pop_front() {
            if let Err(e) = b.expand(&x, s) {
                match e {
                    Expand::Llm(e) => {
                        b.g.partial = true;
                        b.g.warnings.push(format!("generation stopped at {x}: {e}"));
                        break;
                    }
                    Expand::Graph(e) => return Err(e.into()),
                }
            }
            b.run_corrections();
        }
        Ok(b.g)
    }
}

enum Expand {
    Llm(LlmError),
    Graph(GraphError),
}

impl From<LlmError> for Expand {
    fn from(e: LlmError) -> Self {
        Expand::Llm(e)
    }
}

impl From<GraphError> for Expand {
    fn from(e: GraphError) -> Self {
        Expand::Graph(e)
    }
}

struct Build<'a, 'r> {
    r: &'a Reasoner<'r>,
    ir: &'a CanonicalIR,
    g: ReasoningGraph,
    level: HashMap<String, usize>,
    /// Texts before correction; merges compare against these.
    original_text: HashMap<String, String>,
    node_counter: BTreeMap<usize, usize>,
    action_counter: BTreeMap<usize, usize>,
    frontier: VecDeque<(String, StepParse)>,
    /// Undecided nodes whose expansion has not finished.
    pending: HashSet<String>,
    seen_paths: HashSet<Path>,
}

impl Build<'_, '_> {
    fn cfg(&self) -> &ReasonerConfig {
        self.r.cfg
    }

    fn ask(&self, prompt: String) -> Result<StepParse, LlmError> {
        let req = LlmRequest::new(REASON_SYSTEM_PROMPT, prompt).with_seed(self.cfg().seed);
        let resp = self.r.llm.complete(&req)?;
        Ok(parse_step(&resp.text))
    }

    fn warn_all(&mut self, warnings: &[String]) {
        for w in warnings {
            tracing::debug!(ir = %self.ir.id, "{w}");
        }
    }

    fn next_node_id(&mut self, level: usize) -> String {
        let k = self.node_counter.entry(level).or_default();
        *k += 1;
        format!("O{level}.{k}")
    }

    fn add_node(&mut self, id: String, level: usize, text: String, focus_tags: Vec<String>, verdict: Verdict) -> Result<(), GraphError> {
        self.level.insert(id.clone(), level);
        self.original_text.insert(id.clone(), text.clone());
        self.g.add_observation(Observation { id, text, focus_tags, verdict })
    }

    fn add_edge(&mut self, from: &str, to: &str, tool: Tool, argument: &str) -> Result<(), GraphError> {
        let level = self.level[from];
        let k = self.action_counter.entry(level).or_default();
        *k += 1;
        let id = format!("A{level}.{k}");
        self.g.add_action(Action { id, from: from.into(), to: to.into(), tool, argument: argument.into() })
    }

    fn ancestors_or_self(&self, x: &str) -> HashSet<String> {
        let mut seen = HashSet::new();
        let mut stack = vec![x.to_string()];
        while let Some(cur) = stack.pop() {
            if seen.insert(cur.clone()) {
                stack.extend(self.g.incoming(&cur).map(|a| a.from.clone()));
            }
        }
        seen
    }

    /// Tags used by any action leading into `x` or one of its ancestors.
    fn explored(&self, x: &str) -> BTreeSet<String> {
        let anc = self.ancestors_or_self(x);
        self.g
            .edges
            .iter()
            .filter(|a| anc.contains(&a.to) && !a.argument.is_empty())
            .map(|a| a.argument.clone())
            .collect()
    }

    /// Longest root path to `x`, counted in nodes.
    fn depth(&self, x: &str) -> usize {
        fn go(b: &Build, x: &str, memo: &mut HashMap<String, usize>) -> usize {
            if let Some(&d) = memo.get(x) {
                return d;
            }
            let d = b.g.incoming(x).map(|a| go(b, &a.from, memo) + 1).max().unwrap_or(1);
            memo.insert(x.to_string(), d);
            d
        }
        go(self, x, &mut HashMap::new())
    }

    /// Longest downward path from `y` in nodes, counting one more level for
    /// every node that may still need a closing terminator.
    fn reserved_height(&self, y: &str) -> usize {
        let below = self.g.outgoing(y).map(|a| self.reserved_height(&a.to)).max().unwrap_or(0);
        let pending = usize::from(self.pending.contains(y));
        1 + below.max(pending)
    }

    fn subtree_tags(&self, y: &str) -> BTreeSet<String> {
        let mut tags = BTreeSet::new();
        let mut stack = vec![y.to_string()];
        let mut seen = HashSet::new();
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur.clone()) {
                continue;
            }
            for a in self.g.outgoing(&cur) {
                if !a.argument.is_empty() {
                    tags.insert(a.argument.clone());
                }
                stack.push(a.to.clone());
            }
        }
        tags
    }

    /// Path to `x` following the first recorded incoming action at each node.
    fn primary_path(&self, x: &str) -> Path {
        let mut obs = vec![x.to_string()];
        let mut acts = Vec::new();
        let mut cur = x.to_string();
        loop {
            let Some((id, from)) = self.g.incoming(&cur).next().map(|a| (a.id.clone(), a.from.clone())) else {
                break;
            };
            acts.push(id);
            obs.push(from.clone());
            cur = from;
        }
        obs.reverse();
        acts.reverse();
        Path { observations: obs, actions: acts }
    }

    fn merge_target(&self, x: &str, tag: &str, text: &str, explored: &BTreeSet<String>) -> Option<String> {
        let depth_x = self.depth(x);
        let mut blocked = explored.clone();
        blocked.insert(tag.to_string());
        self.g
            .nodes
            .iter()
            .map(|n| n.id.as_str())
            .filter(|&y| y != TERMINATE_ID && self.original_text.get(y).map(String::as_str) == Some(text))
            .find(|&y| {
                !self.g.is_ancestor_or_self(y, x)
                    && self.subtree_tags(y).is_disjoint(&blocked)
                    && depth_x + self.reserved_height(y) <= self.cfg().max_depth
            })
            .map(str::to_string)
    }

    fn node_budget_left(&self) -> bool {
        let reserve = usize::from(self.g.node(TERMINATE_ID).is_none());
        self.g.nodes.len() + 1 + reserve <= self.cfg().max_nodes
    }

    fn close(&mut self, x: &str) -> Result<(), GraphError> {
        if self.g.node(TERMINATE_ID).is_none() {
            let level = self.depth(x) + 1;
            self.add_node(TERMINATE_ID.into(), level, TERMINATE.into(), vec![], Verdict::Undecided)?;
        }
        self.add_edge(x, TERMINATE_ID, Tool::AgentTerminator, "")?;
        self.pending.remove(x);
        Ok(())
    }

    fn expand(&mut self, x: &str, step: StepParse) -> Result<(), Expand> {
        if step.terminate {
            self.close(x)?;
            return Ok(());
        }
        let explored = self.explored(x);
        let step = if self.cfg().inclusion_order { enforce_inclusion_order(&step, self.ir, &explored) } else { step };
        let (mut kept, dropped) = filter_actions(&step, self.ir, &explored);
        self.warn_all(&dropped);
        kept.truncate(self.cfg().branch_limit);
        if kept.is_empty() {
            // every proposal was filtered out: an undecided dead end
            self.pending.remove(x);
            return Ok(());
        }

        let path_description = self.g.describe_path(&self.primary_path(x));
        let level_x = self.level[x];
        let mut children = 0;
        for a in kept {
            let el = self.ir.element(&a.tag).expect("filtered tags exist");
            let output = match self.r.tools.analyze_element(el) {
                Ok(r) => r.output_text,
                Err(e) => {
                    self.g.warnings.push(format!("{x}: {}: {e}", a.tag));
                    String::new()
                }
            };
            let ctx = PromptContext {
                path_description: Some(&path_description),
                explored: &explored,
                current_step: Some((a.tool, &a.tag, output.trim())),
                include_inclusion_note: self.cfg().inclusion_order,
            };
            let child = self.ask(build_reason_prompt(self.ir, &ctx))?;
            self.warn_all(&child.warnings);

            if let Some(y) = self.merge_target(x, &a.tag, &child.observation_text, &explored) {
                self.add_edge(x, &y, a.tool, &a.tag)?;
                children += 1;
                continue;
            }
            let decided = child.verdict.is_decided();
            let needed = self.depth(x) + 1 + usize::from(!decided);
            if needed > self.cfg().max_depth || !self.node_budget_left() {
                tracing::debug!(ir = %self.ir.id, node = x, tag = %a.tag, "budget exhausted, action skipped");
                continue;
            }
            let id = self.next_node_id(level_x + 1);
            self.add_node(id.clone(), level_x + 1, child.observation_text.clone(), vec![a.tag.clone()], child.verdict.clone())?;
            self.add_edge(x, &id, a.tool, &a.tag)?;
            children += 1;
            if !decided {
                self.pending.insert(id.clone());
                self.frontier.push_back((id, child));
            }
        }
        if children == 0 {
            self.close(x)?;
        }
        self.pending.remove(x);
        Ok(())
    }

    fn run_corrections(&mut self) {
        let fresh: Vec<Path> = self
            .g
            .extract_terminated_paths()
            .into_iter()
            .filter(|p| !self.seen_paths.contains(p))
            .collect();
        for p in fresh {
            self.seen_paths.insert(p.clone());
            let Some(store) = self.r.store.filter(|s| self.cfg().correction_enabled && !s.is_empty()) else {
                continue;
            };
            match correct_path(&self.g, &p, store, self.r.llm, self.cfg().theta_sim, self.cfg().seed) {
                Ok(edits) => apply_corrections(&mut self.g, &edits),
                Err(e) => self.g.warnings.push(format!("correction of path ending {} failed: {e}", p.last())),
            }
        }
    }
}
