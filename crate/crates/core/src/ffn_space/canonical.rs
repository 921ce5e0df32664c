//! Canonical node ordering and the JSON genotype format.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{DagNode, ExpansionRatio, FfnGenotype, LayerFfnSpec, NodeKind, SpaceLimits};
use crate::error::{Error, Result};

/// Post-order relabeling from the output, minimized over operand orders of every binary
/// node. Binary primitives are commutative, so the minimum is invariant under any
/// relabeling of an isomorphic DAG.
pub(super) fn canonicalize(nodes: &[DagNode]) -> Vec<DagNode> {
    let well_formed = !nodes.is_empty()
        && nodes[0].kind == NodeKind::Input
        && nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.preds.iter().all(|&p| p < i));
    if !well_formed {
        return nodes.to_vec();
    }
    let binaries: Vec<usize> = (0..nodes.len())
        .filter(|&i| nodes[i].preds.len() == 2)
        .collect();
    let mut best: Option<Vec<DagNode>> = None;
    for mask in 0u32..(1 << binaries.len()) {
        let flipped = |i: usize| {
            binaries
                .iter()
                .position(|&b| b == i)
                .is_some_and(|pos| mask & (1 << pos) != 0)
        };
        let candidate = relabel(nodes, &flipped);
        if best.as_ref().is_none_or(|b| candidate < *b) {
            best = Some(candidate);
        }
    }
    best.expect("at least one ordering")
}

fn relabel(nodes: &[DagNode], flipped: &dyn Fn(usize) -> bool) -> Vec<DagNode> {
    let n = nodes.len();
    let mut new_index: Vec<Option<usize>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    new_index[0] = Some(0);
    order.push(0);

    fn visit(
        i: usize,
        nodes: &[DagNode],
        flipped: &dyn Fn(usize) -> bool,
        new_index: &mut [Option<usize>],
        order: &mut Vec<usize>,
    ) {
        if new_index[i].is_some() {
            return;
        }
        let mut preds = nodes[i].preds.clone();
        if flipped(i) {
            preds.reverse();
        }
        for p in preds {
            visit(p, nodes, flipped, new_index, order);
        }
        new_index[i] = Some(order.len());
        order.push(i);
    }

    visit(n - 1, nodes, flipped, &mut new_index, &mut order);
    for i in 0..n {
        visit(i, nodes, flipped, &mut new_index, &mut order);
    }
    order
        .iter()
        .map(|&old| {
            let mut preds: Vec<usize> = nodes[old]
                .preds
                .iter()
                .map(|&p| new_index[p].expect("visited"))
                .collect();
            if flipped(old) {
                preds.reverse();
            }
            DagNode {
                kind: nodes[old].kind,
                preds,
            }
        })
        .collect()
}

impl Serialize for NodeKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for NodeKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        NodeKind::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown node op `{s}`")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRepr {
    op: NodeKind,
    #[serde(rename = "in", default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    nodes: Vec<NodeRepr>,
    stack: u32,
    ratio: ExpansionRatio,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeRepr {
    layers: Vec<LayerRepr>,
}

fn to_repr(g: &FfnGenotype) -> GenotypeRepr {
    GenotypeRepr {
        layers: g
            .layers
            .iter()
            .map(|l| {
                let c = l.canonical();
                LayerRepr {
                    nodes: c
                        .nodes
                        .into_iter()
                        .map(|n| NodeRepr {
                            op: n.kind,
                            inputs: n.preds,
                        })
                        .collect(),
                    stack: c.stack,
                    ratio: c.ratio,
                }
            })
            .collect(),
    }
}

pub(super) fn to_json(g: &FfnGenotype) -> String {
    serde_json::to_string_pretty(&to_repr(g)).expect("genotype serialization is infallible")
}

pub(super) fn from_json(text: &str) -> Result<FfnGenotype> {
    let repr: GenotypeRepr = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    from_repr(repr)
}

fn from_repr(repr: GenotypeRepr) -> Result<FfnGenotype> {
    let g = FfnGenotype {
        layers: repr
            .layers
            .into_iter()
            .map(|l| LayerFfnSpec {
                nodes: l
                    .nodes
                    .into_iter()
                    .map(|n| DagNode {
                        kind: n.op,
                        preds: n.inputs,
                    })
                    .collect(),
                stack: l.stack,
                ratio: l.ratio,
            })
            .collect(),
    };
    let report = super::validate(&g, g.layers.len(), &SpaceLimits::default());
    if !report.is_ok() {
        return Err(Error::Input(format!(
            "invalid genotype: {}",
            report.violations.join("; ")
        )));
    }
    Ok(g)
}

/// Serializes the canonical form, in the same schema as [`FfnGenotype::to_json`].
impl Serialize for FfnGenotype {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_repr(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FfnGenotype {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = GenotypeRepr::deserialize(d)?;
        from_repr(repr).map_err(serde::de::Error::custom)
    }
}
