//! The FFN search space: expression DAGs over elementwise primitives and linear maps,
//! stack numbers and intermediate expansion ratios.

mod canonical;
mod eval;
mod sample;

pub use eval::{evaluate_dag, LayerWeights, LinearWeights, StackWeights};
pub use sample::{sample_uniform, Choice, DagChoice, SearchSpaceDef};

use std::fmt;

use serde::{Deserialize, Serialize};

pub use crate::tensor::PrimitiveOp;

/// Stack numbers a layer may use.
pub const STACK_NUMBERS: [u32; 4] = [1, 2, 3, 4];

/// Structural limits on a single layer's DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceLimits {
    /// Total node count, input and output included.
    pub max_nodes: usize,
    /// Expand (d -> intermediate) linear nodes per DAG; sized to the supernet's expand bank.
    pub max_expand: usize,
    /// Contract (intermediate -> d) linear nodes per DAG; sized to the contract bank.
    pub max_contract: usize,
}

impl Default for SpaceLimits {
    fn default() -> Self {
        SpaceLimits {
            max_nodes: 8,
            max_expand: 2,
            max_contract: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExpansionRatio {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1/3")]
    Third,
    #[serde(rename = "1/4")]
    Quarter,
}

impl ExpansionRatio {
    pub const ALL: [ExpansionRatio; 4] = [
        ExpansionRatio::One,
        ExpansionRatio::Half,
        ExpansionRatio::Third,
        ExpansionRatio::Quarter,
    ];

    pub fn denominator(self) -> usize {
        match self {
            ExpansionRatio::One => 1,
            ExpansionRatio::Half => 2,
            ExpansionRatio::Third => 3,
            ExpansionRatio::Quarter => 4,
        }
    }

    pub fn value(self) -> f64 {
        1.0 / self.denominator() as f64
    }

    /// Intermediate width: `round(ratio * d_ref)`, at least 1.
    pub fn width(self, d_ref: usize) -> usize {
        ((d_ref as f64 / self.denominator() as f64).round() as usize).max(1)
    }
}

impl fmt::Display for ExpansionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpansionRatio::One => f.write_str("1"),
            r => write!(f, "1/{}", r.denominator()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Input,
    /// Linear map; `expand` goes d -> intermediate, otherwise intermediate -> d.
    Linear {
        expand: bool,
    },
    Math(PrimitiveOp),
}

impl NodeKind {
    pub fn arity(self) -> usize {
        match self {
            NodeKind::Input => 0,
            NodeKind::Linear { .. } => 1,
            NodeKind::Math(op) => op.arity(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Linear { expand: true } => "expand",
            NodeKind::Linear { expand: false } => "contract",
            NodeKind::Math(op) => op.name(),
        }
    }

    fn parse(s: &str) -> Option<NodeKind> {
        match s {
            "input" => Some(NodeKind::Input),
            "expand" => Some(NodeKind::Linear { expand: true }),
            "contract" => Some(NodeKind::Linear { expand: false }),
            other => other.parse().ok().map(NodeKind::Math),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DagNode {
    pub kind: NodeKind,
    pub preds: Vec<usize>,
}

impl DagNode {
    pub fn input() -> Self {
        DagNode {
            kind: NodeKind::Input,
            preds: vec![],
        }
    }

    pub fn expand(pred: usize) -> Self {
        DagNode {
            kind: NodeKind::Linear { expand: true },
            preds: vec![pred],
        }
    }

    pub fn contract(pred: usize) -> Self {
        DagNode {
            kind: NodeKind::Linear { expand: false },
            preds: vec![pred],
        }
    }

    pub fn math(op: PrimitiveOp, preds: &[usize]) -> Self {
        DagNode {
            kind: NodeKind::Math(op),
            preds: preds.to_vec(),
        }
    }
}

/// One layer's FFN. The last node is the output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerFfnSpec {
    pub nodes: Vec<DagNode>,
    pub stack: u32,
    pub ratio: ExpansionRatio,
}

/// Where a value sits relative to the expand/contract pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Model,
    Intermediate,
    Contracted,
}

impl LayerFfnSpec {
    pub fn new(nodes: Vec<DagNode>, stack: u32, ratio: ExpansionRatio) -> Self {
        LayerFfnSpec {
            nodes,
            stack,
            ratio,
        }
    }

    /// input -> expand -> GeLU -> contract.
    pub fn baseline_dag() -> Vec<DagNode> {
        vec![
            DagNode::input(),
            DagNode::expand(0),
            DagNode::math(PrimitiveOp::Gelu, &[1]),
            DagNode::contract(2),
        ]
    }

    /// The supernet's complete graph: both expand and both contract bank slots in use.
    pub fn complete_dag() -> Vec<DagNode> {
        vec![
            DagNode::input(),
            DagNode::expand(0),
            DagNode::expand(0),
            DagNode::math(PrimitiveOp::Gelu, &[1]),
            DagNode::math(PrimitiveOp::Mul, &[3, 2]),
            DagNode::contract(4),
            DagNode::contract(2),
            DagNode::math(PrimitiveOp::Add, &[5, 6]),
        ]
    }

    pub fn output(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn width(&self, d_ref: usize) -> usize {
        self.ratio.width(d_ref)
    }

    pub fn count_linear(&self, expand: bool) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Linear { expand })
            .count()
    }

    /// Channel width of every node's value: `d` before expand and after contract, `w` between.
    pub fn node_widths(&self, d: usize, w: usize) -> Vec<usize> {
        let mut widths: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let width = match n.kind {
                NodeKind::Input | NodeKind::Linear { expand: false } => d,
                NodeKind::Linear { expand: true } => w,
                NodeKind::Math(_) => n
                    .preds
                    .first()
                    .and_then(|&p| widths.get(p).copied())
                    .unwrap_or(d),
            };
            widths.push(width);
        }
        widths
    }

    /// Histogram of math primitives, indexed by [`PrimitiveOp::index`].
    pub fn op_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for n in &self.nodes {
            if let NodeKind::Math(op) = n.kind {
                h[op.index()] += 1;
            }
        }
        h
    }

    /// Structural violations of this layer; empty when valid.
    pub fn violations(&self, limits: &SpaceLimits) -> Vec<String> {
        let mut v = Vec::new();
        if !STACK_NUMBERS.contains(&self.stack) {
            v.push(format!("stack number {} not in {{1, 2, 3, 4}}", self.stack));
        }
        if self.nodes.is_empty() {
            v.push("dag has no nodes".into());
            return v;
        }
        if self.nodes.len() > limits.max_nodes {
            v.push(format!(
                "dag has {} nodes, limit is {}",
                self.nodes.len(),
                limits.max_nodes
            ));
        }
        if self.nodes[0].kind != NodeKind::Input {
            v.push("node 0 must be the input".into());
        }
        let mut phases: Vec<Option<Phase>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if i > 0 && node.kind == NodeKind::Input {
                v.push(format!("node {i}: extra input node"));
            }
            if node.preds.len() != node.kind.arity() {
                v.push(format!(
                    "node {i} ({}): arity {} but {} predecessor(s)",
                    node.kind.name(),
                    node.kind.arity(),
                    node.preds.len()
                ));
                phases.push(None);
                continue;
            }
            if let Some(&p) = node.preds.iter().find(|&&p| p >= i) {
                v.push(format!("node {i}: predecessor {p} is not earlier (cycle)"));
                phases.push(None);
                continue;
            }
            let pred_phases: Vec<Option<Phase>> = node.preds.iter().map(|&p| phases[p]).collect();
            if pred_phases.iter().any(Option::is_none) {
                phases.push(None);
                continue;
            }
            let pp: Vec<Phase> = pred_phases.into_iter().flatten().collect();
            let phase = match node.kind {
                NodeKind::Input => Some(Phase::Model),
                NodeKind::Linear { expand: true } => {
                    if pp[0] == Phase::Model {
                        Some(Phase::Intermediate)
                    } else {
                        v.push(format!("node {i}: expand must read a model-width value"));
                        None
                    }
                }
                NodeKind::Linear { expand: false } => {
                    if pp[0] == Phase::Intermediate {
                        Some(Phase::Contracted)
                    } else {
                        v.push(format!("node {i}: contract must read an expanded value"));
                        None
                    }
                }
                NodeKind::Math(op) => {
                    if pp.iter().all(|&p| p == pp[0]) {
                        Some(pp[0])
                    } else {
                        v.push(format!("node {i} ({op}): operands have different widths"));
                        None
                    }
                }
            };
            phases.push(phase);
        }
        match phases.last().copied().flatten() {
            Some(Phase::Contracted) => {}
            Some(_) => v.push("output does not pass expand then contract back to width d".into()),
            None => {}
        }
        let (ne, nc) = (self.count_linear(true), self.count_linear(false));
        if ne == 0 || nc == 0 {
            v.push("dag needs at least one expand and one contract linear".into());
        }
        if ne > limits.max_expand {
            v.push(format!(
                "{ne} expand linears, limit is {}",
                limits.max_expand
            ));
        }
        if nc > limits.max_contract {
            v.push(format!(
                "{nc} contract linears, limit is {}",
                limits.max_contract
            ));
        }
        if v.is_empty() {
            let live = self.live_nodes();
            if let Some(dead) = live.iter().position(|&l| !l) {
                v.push(format!("node {dead} does not reach the output"));
            }
        }
        v
    }

    /// Nodes on some path to the output.
    fn live_nodes(&self) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        let mut stack = vec![self.output()];
        while let Some(i) = stack.pop() {
            if !live[i] {
                live[i] = true;
                stack.extend(self.nodes[i].preds.iter().copied().filter(|&p| p < i));
            }
        }
        live
    }

    /// Equivalent spec with nodes in canonical order, so structurally equal DAGs compare
    /// and serialize identically.
    pub fn canonical(&self) -> LayerFfnSpec {
        LayerFfnSpec {
            nodes: canonical::canonicalize(&self.nodes),
            stack: self.stack,
            ratio: self.ratio,
        }
    }
}

/// Per-layer FFN description of a whole encoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FfnGenotype {
    pub layers: Vec<LayerFfnSpec>,
}

/// Outcome of [`validate`]; violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks arity, acyclicity, dimension flow and domain membership of every layer.
pub fn validate(g: &FfnGenotype, num_layers: usize, limits: &SpaceLimits) -> ValidationReport {
    let mut violations = Vec::new();
    if g.layers.len() != num_layers {
        violations.push(format!(
            "genotype has {} layers, model has {num_layers}",
            g.layers.len()
        ));
    }
    for (l, spec) in g.layers.iter().enumerate() {
        violations.extend(
            spec.violations(limits)
                .into_iter()
                .map(|m| format!("layer {l}: {m}")),
        );
    }
    ValidationReport { violations }
}

impl FfnGenotype {
    pub fn uniform(num_layers: usize, spec: LayerFfnSpec) -> Self {
        FfnGenotype {
            layers: vec![spec; num_layers],
        }
    }

    /// Standard transformer FFN in every layer.
    pub fn baseline(num_layers: usize) -> Self {
        Self::uniform(
            num_layers,
            LayerFfnSpec::new(LayerFfnSpec::baseline_dag(), 1, ExpansionRatio::One),
        )
    }

    /// Maximal genotype every candidate can be sliced from.
    pub fn supernet(num_layers: usize) -> Self {
        Self::uniform(
            num_layers,
            LayerFfnSpec::new(LayerFfnSpec::complete_dag(), 4, ExpansionRatio::One),
        )
    }

    pub fn canonical(&self) -> FfnGenotype {
        FfnGenotype {
            layers: self.layers.iter().map(LayerFfnSpec::canonical).collect(),
        }
    }

    /// Feature vector: per layer, the 10-bin primitive histogram, stack number and ratio.
    pub fn encode(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers.len() * 12);
        for l in &self.layers {
            out.extend(l.op_histogram().iter().map(|&c| c as f64));
            out.push(l.stack as f64);
            out.push(l.ratio.value());
        }
        out
    }

    /// Each layer spec repeated twice in place (depth doubling).
    pub fn deepen(&self) -> FfnGenotype {
        FfnGenotype {
            layers: self
                .layers
                .iter()
                .flat_map(|l| [l.clone(), l.clone()])
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        canonical::to_json(self)
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        canonical::from_json(text)
    }

    /// Short stable digest of the canonical form.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the canonical text keeps this stable across platforms and releases.
        self.to_json()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }
}
