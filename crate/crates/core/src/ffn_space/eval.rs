use super::{LayerFfnSpec, NodeKind};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// `y = x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearWeights {
    pub weight: Var,
    pub bias: Var,
}

impl LinearWeights {
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Weights of one stack repetition; the k-th expand (contract) node in DAG order uses
/// `expand[k]` (`contract[k]`).
#[derive(Debug, Clone, Default)]
pub struct StackWeights {
    pub expand: Vec<LinearWeights>,
    pub contract: Vec<LinearWeights>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerWeights {
    pub stacks: Vec<StackWeights>,
}

/// Runs the DAG `spec.stack` times in sequence, each repetition with its own weights.
pub fn evaluate_dag(
    tape: &mut Tape<'_>,
    spec: &LayerFfnSpec,
    x: Var,
    weights: &LayerWeights,
) -> Result<Var> {
    if weights.stacks.len() < spec.stack as usize {
        return Err(Error::Shape(format!(
            "{} stacks requested, weights for {}",
            spec.stack,
            weights.stacks.len()
        )));
    }
    let mut h = x;
    for sw in weights.stacks.iter().take(spec.stack as usize) {
        h = run_once(tape, spec, h, sw)?;
    }
    Ok(h)
}

fn run_once(tape: &mut Tape<'_>, spec: &LayerFfnSpec, x: Var, w: &StackWeights) -> Result<Var> {
    let mut vals: Vec<Var> = Vec::with_capacity(spec.nodes.len());
    let (mut ne, mut nc) = (0, 0);
    for (i, node) in spec.nodes.iter().enumerate() {
        let arg = |k: usize| -> Result<Var> {
            node.preds
                .get(k)
                .and_then(|&p| vals.get(p).copied())
                .ok_or_else(|| Error::Shape(format!("node {i}: missing operand {k}")))
        };
        let v = match node.kind {
            NodeKind::Input => x,
            NodeKind::Linear { expand: true } => {
                let lw = w.expand.get(ne).ok_or_else(|| {
                    Error::Shape(format!("node {i}: no weights for expand slot {ne}"))
                })?;
                ne += 1;
                lw.apply(tape, arg(0)?)?
            }
            NodeKind::Linear { expand: false } => {
                let lw = w.contract.get(nc).ok_or_else(|| {
                    Error::Shape(format!("node {i}: no weights for contract slot {nc}"))
                })?;
                nc += 1;
                lw.apply(tape, arg(0)?)?
            }
            NodeKind::Math(op) => {
                let args: Vec<Var> = (0..op.arity()).map(arg).collect::<Result<_>>()?;
                tape.apply_primitive(op, &args)?
            }
        };
        vals.push(v);
    }
    vals.last()
        .copied()
        .ok_or_else(|| Error::Shape("empty dag".into()))
}
