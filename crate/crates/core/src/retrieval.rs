//! Target-conditioned pruning of stored reasoning graphs by weighted random
//! walks, and threshold selection of the graphs relevant to a target IR.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::CanonicalIR;
use crate::graph::{ReasoningGraph, Tool, ROOT_ID};
use crate::text_index::{IndexError, TfIdfIndex, TokenizerConfig};
use crate::tools::ToolRunner;

/// Floor added to every adjacency weight so each action stays walkable.
pub const EPSILON: f64 = 1e-6;
pub const DEFAULT_WALKS: usize = 4;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("reasoning database is empty")]
    EmptyDatabase,
    #[error("node {0} has outgoing actions but no probability mass")]
    IsolatedNonTerminal(String),
    #[error("walk count must be at least 1")]
    NoWalks,
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Sparse M̃ over node positions; only pairs joined by an action are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub node_ids: Vec<String>,
    pub weights: BTreeMap<(usize, usize), f64>,
}

impl AdjacencyMatrix {
    pub fn weight(&self, from: &str, to: &str) -> f64 {
        let pos = |id: &str| self.node_ids.iter().position(|n| n == id);
        match (pos(from), pos(to)) {
            (Some(i), Some(j)) => self.weights.get(&(i, j)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }
}

/// Sampling probability per action id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProbabilities {
    pub probs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservedGraph {
    pub graph: ReasoningGraph,
    pub origin_ir: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedGraph {
    pub ir_id: String,
    pub similarity: f64,
    pub description: String,
    #[serde(skip)]
    pub reserved: Arc<ReservedGraph>,
}

/// Text standing for a target IR: its title followed by the flattened
/// content with tool outputs inlined after each tag.
pub fn target_text(ir: &CanonicalIR, tools: &ToolRunner) -> (String, Vec<String>) {
    let (flat, warnings) = tools.flatten_ir(ir);
    let text = if ir.title.is_empty() { flat } else { format!("{} {}", ir.title, flat) };
    (text, warnings)
}

/// Index over the target text and the node texts of `g`.
pub fn adjacency_index(g: &ReasoningGraph, target_text: &str) -> Result<TfIdfIndex, IndexError> {
    let mut docs: Vec<&str> = vec![target_text];
    docs.extend(g.nodes.iter().map(|n| n.text.as_str()));
    TfIdfIndex::build(&docs, TokenizerConfig::default())
}

pub fn build_adjacency(g: &ReasoningGraph, target_text: &str, index: &TfIdfIndex) -> AdjacencyMatrix {
    let node_ids: Vec<String> = g.nodes.iter().map(|n| n.id.clone()).collect();
    let target = index.vectorize(target_text);
    let mut weights = BTreeMap::new();
    for a in &g.edges {
        let (Some(i), Some(j)) = (g.node_position(&a.from), g.node_position(&a.to)) else { continue };
        if weights.contains_key(&(i, j)) {
            continue;
        }
        let ti = &g.nodes[i].text;
        let joined = format!("{} {}", ti, g.nodes[j].text);
        let base = target.cosine(&index.vectorize(ti));
        let with = target.cosine(&index.vectorize(&joined));
        weights.insert((i, j), (with - base).max(0.0) + EPSILON);
    }
    AdjacencyMatrix { node_ids, weights }
}

/// Degree-weighted probabilities, normalized over each node's actions.
pub fn edge_probabilities(m: &AdjacencyMatrix, g: &ReasoningGraph) -> Result<EdgeProbabilities, RetrievalError> {
    let mut probs = BTreeMap::new();
    for n in &g.nodes {
        let raw: Vec<(&str, f64)> = g
            .outgoing(&n.id)
            .map(|a| {
                let w = m.weight(&a.from, &a.to);
                let d = 1.0 / g.degree(&a.from) as f64 + 1.0 / g.degree(&a.to) as f64;
                (a.id.as_str(), w * d)
            })
            .collect();
        if raw.is_empty() {
            continue;
        }
        let total: f64 = raw.iter().map(|(_, r)| r).sum();
        if !(total > 0.0) {
            return Err(RetrievalError::IsolatedNonTerminal(n.id.clone()));
        }
        for (id, r) in raw {
            probs.insert(id.to_string(), r / total);
        }
    }
    Ok(EdgeProbabilities { probs })
}

fn graph_seed(seed: u64, ir_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(ir_id.as_bytes());
    h.finalize().into()
}

/// Marks the root and its children, then runs `walks` walks over unvisited
/// successors. Each walk draws from its own ChaCha stream.
pub fn random_walk_prune(
    g: &ReasoningGraph,
    p: &EdgeProbabilities,
    walks: usize,
    seed: u64,
) -> Result<ReservedGraph, RetrievalError> {
    if walks == 0 {
        return Err(RetrievalError::NoWalks);
    }
    let mut nodes: BTreeSet<String> = BTreeSet::new();
    let mut edges: BTreeSet<String> = BTreeSet::new();
    if g.node(ROOT_ID).is_some() {
        nodes.insert(ROOT_ID.to_string());
        for a in g.outgoing(ROOT_ID) {
            nodes.insert(a.to.clone());
            edges.insert(a.id.clone());
        }
    }
    let key = graph_seed(seed, &g.ir_id);
    for w in 0..walks {
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(w as u64);
        let frontier: Vec<&str> = g
            .nodes
            .iter()
            .map(|n| n.id.as_str())
            .filter(|id| nodes.contains(*id) && g.outgoing(id).any(|a| !nodes.contains(&a.to)))
            .collect();
        if frontier.is_empty() {
            break;
        }
        let mut cur = frontier[rng.random_range(0..frontier.len())].to_string();
        loop {
            let options: Vec<_> = g.outgoing(&cur).filter(|a| !nodes.contains(&a.to)).collect();
            if options.is_empty() {
                break;
            }
            let total: f64 = options.iter().map(|a| p.probs.get(&a.id).copied().unwrap_or(0.0)).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = options[options.len() - 1];
            for a in &options {
                u -= p.probs.get(&a.id).copied().unwrap_or(0.0);
                if u < 0.0 {
                    pick = a;
                    break;
                }
            }
            nodes.insert(pick.to.clone());
            edges.insert(pick.id.clone());
            if pick.tool == Tool::AgentTerminator {
                break;
            }
            cur = pick.to.clone();
        }
    }
    // unterminated reserved sinks take their terminator action when g has one
    let partial = g.restrict(&nodes, &edges);
    for n in &partial.nodes {
        if !partial.is_sink(&n.id) || partial.is_terminal(&n.id) {
            continue;
        }
        let best = g
            .outgoing(&n.id)
            .filter(|a| a.tool == Tool::AgentTerminator)
            .max_by(|a, b| {
                let pa = p.probs.get(&a.id).copied().unwrap_or(0.0);
                let pb = p.probs.get(&b.id).copied().unwrap_or(0.0);
                pa.total_cmp(&pb).then_with(|| crate::graph::natural_cmp(&b.id, &a.id))
            });
        if let Some(a) = best {
            nodes.insert(a.to.clone());
            edges.insert(a.id.clone());
        }
    }
    let graph = g.restrict(&nodes, &edges);
    let description = graph.describe_graph();
    Ok(ReservedGraph { origin_ir: g.ir_id.clone(), graph, description })
}

/// Full pruning pipeline for one stored graph.
pub fn prune_for_target(
    g: &ReasoningGraph,
    target_text: &str,
    walks: usize,
    seed: u64,
) -> Result<ReservedGraph, RetrievalError> {
    let index = adjacency_index(g, target_text)?;
    let m = build_adjacency(g, target_text, &index);
    let p = edge_probabilities(&m, g)?;
    random_walk_prune(g, &p, walks, seed)
}

type CacheKey = (String, [u8; 32], u64, usize);

/// The reasoning database as loaded for retrieval, with a prune cache keyed
/// by (graph, target hash, seed, walks).
pub struct Retriever {
    graphs: Vec<ReasoningGraph>,
    cache: Mutex<HashMap<CacheKey, Arc<ReservedGraph>>>,
}

impl Retriever {
    pub fn new(graphs: Vec<ReasoningGraph>) -> Self {
        Self { graphs, cache: Mutex::new(HashMap::new()) }
    }

    pub fn graphs(&self) -> &[ReasoningGraph] {
        &self.graphs
    }

    pub fn prune_all(&self, target_text: &str, walks: usize, seed: u64) -> Result<Vec<Arc<ReservedGraph>>, RetrievalError> {
        let th: [u8; 32] = Sha256::digest(target_text.as_bytes()).into();
        self.graphs
            .par_iter()
            .map(|g| {
                let key = (g.ir_id.clone(), th, seed, walks);
                if let Some(hit) = self.cache.lock().get(&key) {
                    return Ok(hit.clone());
                }
                let r = Arc::new(prune_for_target(g, target_text, walks, seed)?);
                self.cache.lock().insert(key, r.clone());
                Ok(r)
            })
            .collect()
    }

    /// Pruned graphs whose description is strictly more similar than
    /// `theta_sim` to the target text, best first (ties by ir id). The
    /// similarity index covers all descriptions plus the target.
    pub fn retrieve_relevant(
        &self,
        target_text: &str,
        theta_sim: f64,
        walks: usize,
        seed: u64,
    ) -> Result<Vec<RetrievedGraph>, RetrievalError> {
        let scored = self.score_all(target_text, walks, seed)?;
        Ok(scored.into_iter().filter(|r| r.similarity > theta_sim).collect())
    }

    /// Every pruned graph with its similarity, sorted like `retrieve_relevant`.
    pub fn score_all(&self, target_text: &str, walks: usize, seed: u64) -> Result<Vec<RetrievedGraph>, RetrievalError> {
        if self.graphs.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        let pruned = self.prune_all(target_text, walks, seed)?;
        let mut docs: Vec<&str> = pruned.iter().map(|r| r.description.as_str()).collect();
        docs.push(target_text);
        let index = TfIdfIndex::build(&docs, TokenizerConfig::default())?;
        let q = index.vectorize(target_text);
        let mut out: Vec<RetrievedGraph> = pruned
            .into_iter()
            .map(|r| RetrievedGraph {
                ir_id: r.origin_ir.clone(),
                similarity: index.vectorize(&r.description).cosine(&q),
                description: r.description.clone(),
                reserved: r,
            })
            .collect();
        out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.ir_id.cmp(&b.ir_id)));
        Ok(out)
    }
}
