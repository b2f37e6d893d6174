//! The U-Net as an explicit graph of named operators.
//!
//! Nodes are stored in pre-order: a composite (ResBlock, BasicTransformerBlock)
//! is immediately followed by its children, whose ids extend the parent id
//! with a `.` separated suffix. The top-level data flow is the [`Step`]
//! program; composites have fixed internal wiring (see `exec`).

mod build;
mod exec;
mod shape;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ldprune_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::modify::Edit;

pub use build::{build_unet, UNetSpec};
pub use exec::{ForwardOptions, ForwardOutput};
pub use shape::ShapeTrace;

/// Operator category, as reported in score tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Conv,
    GroupNorm,
    Activation,
    Attention,
    BasicTransformerBlock,
    ResBlock,
    Downsample,
    Upsample,
    Linear,
    Embedding,
}

impl NodeKind {
    pub fn is_composite(self) -> bool {
        matches!(self, NodeKind::ResBlock | NodeKind::BasicTransformerBlock)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Operator with its static attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Group norm; on token input (`[N, T, C]`) it normalizes each token.
    GroupNorm {
        groups: usize,
        eps: f32,
    },
    /// SiLU.
    Activation,
    Attention {
        cross: bool,
    },
    BasicTransformerBlock,
    ResBlock,
    /// 3x3 conv with stride `factor`.
    Downsample {
        factor: usize,
    },
    /// Nearest upsampling by `factor` followed by a 3x3 conv.
    Upsample {
        factor: usize,
    },
    Linear,
    /// Condition table, `[num_conditions, tokens * dim]`.
    Embedding {
        tokens: usize,
        dim: usize,
    },
}

impl Op {
    pub fn kind(&self) -> NodeKind {
        match self {
            Op::Conv { .. } => NodeKind::Conv,
            Op::GroupNorm { .. } => NodeKind::GroupNorm,
            Op::Activation => NodeKind::Activation,
            Op::Attention { .. } => NodeKind::Attention,
            Op::BasicTransformerBlock => NodeKind::BasicTransformerBlock,
            Op::ResBlock => NodeKind::ResBlock,
            Op::Downsample { .. } => NodeKind::Downsample,
            Op::Upsample { .. } => NodeKind::Upsample,
            Op::Linear => NodeKind::Linear,
            Op::Embedding { .. } => NodeKind::Embedding,
        }
    }
}

/// Channel + spatial signature of an operator's input or output.
/// Vectors (time embeddings) use a 1x1 grid; token streams use the grid
/// they were flattened from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Signature {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn vector(channels: usize) -> Self {
        Self::new(channels, 1, 1)
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct OperatorNode {
    /// Hierarchical path, e.g. `down.1.res.0.conv2`.
    pub id: String,
    pub op: Op,
    pub params: Vec<Param>,
    pub in_sig: Signature,
    pub out_sig: Signature,
    pub parent: Option<String>,
    pub children: Vec<String>,
    /// Relative latency weight (seconds of one calibration forward, inclusive).
    pub est_cost: f64,
    pub edit: Option<Edit>,
}

impl OperatorNode {
    pub fn kind(&self) -> NodeKind {
        self.op.kind()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// True if `other` lies strictly inside this node's subtree.
    pub fn is_ancestor_of(&self, other: &str) -> bool {
        is_ancestor(&self.id, other)
    }

    /// Top-level block the node belongs to, e.g. `down.1` for `down.1.res.0.conv1`.
    pub fn block(&self) -> String {
        block_of(&self.id)
    }
}

pub fn is_ancestor(ancestor: &str, id: &str) -> bool {
    id.len() > ancestor.len() && id.starts_with(ancestor) && id.as_bytes()[ancestor.len()] == b'.'
}

pub(crate) fn block_of(id: &str) -> String {
    let parts: Vec<&str> = id.split('.').collect();
    match parts.first() {
        Some(&"down") | Some(&"up") if parts.len() > 1 => format!("{}.{}", parts[0], parts[1]),
        Some(p) => p.to_string(),
        None => String::new(),
    }
}

/// One step of the top-level program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    /// Run a top-level operator on the hidden state.
    Node(String),
    /// Remember the hidden state for the decoder level `level`.
    SaveSkip(usize),
    /// Concatenate the saved encoder state of `level` onto the hidden state.
    ConcatSkip(usize),
    /// Expose the hidden state as a named feature tap.
    Tap(String),
}

/// Encoder output feeding a decoder block through concatenation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipLink {
    pub level: usize,
    pub from: String,
    pub to: String,
}

/// Data dependency between two top-level operators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

/// Number of latent evaluations (batch items through the full U-Net).
/// Shared by every clone of a graph.
#[derive(Debug, Clone, Default)]
pub struct ForwardCounter(Arc<AtomicU64>);

impl ForwardCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::SeqCst);
    }

    pub(crate) fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone)]
pub struct OperatorGraph {
    spec: UNetSpec,
    nodes: Vec<OperatorNode>,
    index: HashMap<String, usize>,
    program: Vec<Step>,
    time_program: Vec<String>,
    skip_links: Vec<SkipLink>,
    /// Target of the reversible modification currently applied, if any.
    pub(crate) active_plan: Option<String>,
    /// Targets of committed modifications, in application order.
    pub(crate) committed: Vec<String>,
    total_cost: f64,
    counter: ForwardCounter,
}

impl OperatorGraph {
    pub(crate) fn from_parts(
        spec: UNetSpec,
        nodes: Vec<OperatorNode>,
        program: Vec<Step>,
        time_program: Vec<String>,
        skip_links: Vec<SkipLink>,
    ) -> Result<Self> {
        let mut g = Self {
            spec,
            nodes,
            index: HashMap::new(),
            program,
            time_program,
            skip_links,
            active_plan: None,
            committed: Vec::new(),
            total_cost: 0.0,
            counter: ForwardCounter::default(),
        };
        g.reindex()?;
        Ok(g)
    }

    pub(crate) fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, n) in self.nodes.iter().enumerate() {
            if self.index.insert(n.id.clone(), i).is_some() {
                return Err(CoreError::InvalidSpec(format!("duplicate operator id `{}`", n.id)));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut Vec<OperatorNode> {
        &mut self.nodes
    }

    pub fn program(&self) -> &[Step] {
        &self.program
    }

    pub fn time_program(&self) -> &[String] {
        &self.time_program
    }

    pub fn skip_links(&self) -> &[SkipLink] {
        &self.skip_links
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Result<&OperatorNode> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| CoreError::UnknownOperator(id.to_string()))
    }

    pub(crate) fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| CoreError::UnknownOperator(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Number of nodes following `pos` that belong to its subtree.
    pub(crate) fn subtree_len(&self, pos: usize) -> usize {
        let id = &self.nodes[pos].id;
        self.nodes[pos + 1..]
            .iter()
            .take_while(|n| is_ancestor(id, &n.id))
            .count()
    }

    pub fn active_plan(&self) -> Option<&str> {
        self.active_plan.as_deref()
    }

    /// Targets of committed (permanent) modifications.
    pub fn committed_edits(&self) -> &[String] {
        &self.committed
    }

    pub fn counter(&self) -> &ForwardCounter {
        &self.counter
    }

    /// Gives this graph its own forward counter, detached from clones.
    pub fn with_fresh_counter(mut self) -> Self {
        self.counter = ForwardCounter::default();
        self
    }

    /// Exact parameter count; composites own no parameters, so nothing is
    /// counted twice.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(OperatorNode::param_count).sum()
    }

    /// `(node id + "." + param name, tensor)` in checkpoint order.
    pub fn params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter().map(move |p| (format!("{}.{}", n.id, p.name), &p.value)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.nodes.iter_mut().flat_map(|n| {
            let id = n.id.clone();
            n.params
                .iter_mut()
                .map(move |p| (format!("{}.{}", id, p.name), &mut p.value))
        })
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn set_costs(&mut self, costs: &HashMap<String, f64>, total: f64) {
        for n in &mut self.nodes {
            n.est_cost = costs.get(&n.id).copied().unwrap_or(0.0);
        }
        self.total_cost = total;
    }

    /// Top-level data edges plus the skip connections.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        let mut last: Option<&str> = None;
        let mut saved: HashMap<usize, &str> = HashMap::new();
        let mut pending_skip: Option<&str> = None;
        for step in &self.program {
            match step {
                Step::Node(id) => {
                    if let Some(prev) = last {
                        edges.push(Edge {
                            from: prev.to_string(),
                            to: id.clone(),
                        });
                    }
                    if let Some(src) = pending_skip.take() {
                        edges.push(Edge {
                            from: src.to_string(),
                            to: id.clone(),
                        });
                    }
                    last = Some(id);
                }
                Step::SaveSkip(level) => {
                    if let Some(prev) = last {
                        saved.insert(*level, prev);
                    }
                }
                Step::ConcatSkip(level) => pending_skip = saved.get(level).copied(),
                Step::Tap(_) => {}
            }
        }
        edges
    }

    /// Operators eligible for modification, in pre-order: everything except
    /// the condition table and operators already modified, filtered to those
    /// whose share of the calibrated latency is at least `min_cost_fraction`.
    pub fn enumerate_candidates(&self, min_cost_fraction: f64) -> Vec<String> {
        let threshold = min_cost_fraction * self.total_cost;
        self.nodes
            .iter()
            .filter(|n| n.kind() != NodeKind::Embedding && n.edit.is_none())
            .filter(|n| min_cost_fraction <= 0.0 || n.est_cost >= threshold)
            .map(|n| n.id.clone())
            .collect()
    }
}
