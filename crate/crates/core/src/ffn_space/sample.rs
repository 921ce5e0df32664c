use rand::seq::IndexedRandom;
use rand::Rng;

use super::{
    DagNode, ExpansionRatio, FfnGenotype, LayerFfnSpec, PrimitiveOp, SpaceLimits, STACK_NUMBERS,
};
use crate::error::{Error, Result};

/// A searchable dimension: drawn uniformly from a domain, or pinned per layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Choice<T> {
    Free(Vec<T>),
    Fixed(Vec<T>),
}

/// The DAG dimension; free DAGs come from the random generator under the space limits.
#[derive(Debug, Clone, PartialEq)]
pub enum DagChoice {
    Free,
    Fixed(Vec<Vec<DagNode>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpaceDef {
    pub num_layers: usize,
    pub dags: DagChoice,
    pub stacks: Choice<u32>,
    pub ratios: Choice<ExpansionRatio>,
    pub limits: SpaceLimits,
}

impl SearchSpaceDef {
    /// Everything free.
    pub fn stage1(num_layers: usize) -> Self {
        SearchSpaceDef {
            num_layers,
            dags: DagChoice::Free,
            stacks: Choice::Free(STACK_NUMBERS.to_vec()),
            ratios: Choice::Free(ExpansionRatio::ALL.to_vec()),
            limits: SpaceLimits::default(),
        }
    }

    /// DAGs free; stacks and ratios pinned to `winner`'s.
    pub fn stage2(winner: &FfnGenotype) -> Self {
        SearchSpaceDef {
            num_layers: winner.layers.len(),
            dags: DagChoice::Free,
            stacks: Choice::Fixed(winner.layers.iter().map(|l| l.stack).collect()),
            ratios: Choice::Fixed(winner.layers.iter().map(|l| l.ratio).collect()),
            limits: SpaceLimits::default(),
        }
    }

    /// DAGs pinned to `winner`'s; stacks and ratios free.
    pub fn stage3(winner: &FfnGenotype) -> Self {
        SearchSpaceDef {
            num_layers: winner.layers.len(),
            dags: DagChoice::Fixed(winner.layers.iter().map(|l| l.nodes.clone()).collect()),
            stacks: Choice::Free(STACK_NUMBERS.to_vec()),
            ratios: Choice::Free(ExpansionRatio::ALL.to_vec()),
            limits: SpaceLimits::default(),
        }
    }

    /// Whether `g` lies in this space.
    pub fn contains(&self, g: &FfnGenotype) -> bool {
        if g.layers.len() != self.num_layers {
            return false;
        }
        g.layers.iter().enumerate().all(|(i, l)| {
            let dag_ok = match &self.dags {
                DagChoice::Free => true,
                DagChoice::Fixed(d) => {
                    LayerFfnSpec::new(d[i].clone(), l.stack, l.ratio)
                        .canonical()
                        .nodes
                        == l.canonical().nodes
                }
            };
            let stack_ok = match &self.stacks {
                Choice::Free(dom) => dom.contains(&l.stack),
                Choice::Fixed(v) => v[i] == l.stack,
            };
            let ratio_ok = match &self.ratios {
                Choice::Free(dom) => dom.contains(&l.ratio),
                Choice::Fixed(v) => v[i] == l.ratio,
            };
            dag_ok && stack_ok && ratio_ok && l.violations(&self.limits).is_empty()
        })
    }

    fn check(&self) -> Result<()> {
        let empty = |what: &str| Err(Error::EmptySpace(what.to_string()));
        if self.num_layers == 0 {
            return empty("zero layers");
        }
        match &self.stacks {
            Choice::Free(d) if d.is_empty() || !d.iter().all(|s| STACK_NUMBERS.contains(s)) => {
                return empty("no admissible stack numbers")
            }
            Choice::Fixed(v) if v.len() != self.num_layers => {
                return empty("fixed stacks do not cover every layer")
            }
            _ => {}
        }
        match &self.ratios {
            Choice::Free(d) if d.is_empty() => return empty("no admissible ratios"),
            Choice::Fixed(v) if v.len() != self.num_layers => {
                return empty("fixed ratios do not cover every layer")
            }
            _ => {}
        }
        match &self.dags {
            DagChoice::Free if self.limits.max_nodes < 3 => {
                return empty("node budget too small for expand + contract")
            }
            DagChoice::Free if self.limits.max_expand == 0 || self.limits.max_contract == 0 => {
                return empty("no linear capacity")
            }
            DagChoice::Fixed(v) if v.len() != self.num_layers => {
                return empty("fixed dags do not cover every layer")
            }
            _ => {}
        }
        Ok(())
    }
}

/// Draws every free dimension uniformly; pinned dimensions are copied.
pub fn sample_uniform<R: Rng + ?Sized>(space: &SearchSpaceDef, rng: &mut R) -> Result<FfnGenotype> {
    space.check()?;
    let mut layers = Vec::with_capacity(space.num_layers);
    for i in 0..space.num_layers {
        let nodes = match &space.dags {
            DagChoice::Free => random_dag(&space.limits, rng),
            DagChoice::Fixed(d) => d[i].clone(),
        };
        let stack = match &space.stacks {
            Choice::Free(d) => *d.choose(rng).expect("non-empty"),
            Choice::Fixed(v) => v[i],
        };
        let ratio = match &space.ratios {
            Choice::Free(d) => *d.choose(rng).expect("non-empty"),
            Choice::Fixed(v) => v[i],
        };
        layers.push(LayerFfnSpec::new(nodes, stack, ratio).canonical());
    }
    Ok(FfnGenotype { layers })
}

/// Generative DAG sampler: optional pre-activation, one or two expands, up to two
/// intermediate primitives, one or two contracts (merged by a binary primitive).
/// Every choice is uniform; draws over the node budget are redrawn and unused nodes pruned.
pub(crate) fn random_dag<R: Rng + ?Sized>(limits: &SpaceLimits, rng: &mut R) -> Vec<DagNode> {
    loop {
        let mut nodes = vec![DagNode::input()];
        let mut model_pool = vec![0];
        if rng.random_bool(0.25) {
            let op = *PrimitiveOp::UNARY.choose(rng).unwrap();
            nodes.push(DagNode::math(op, &[0]));
            model_pool.push(nodes.len() - 1);
        }
        let n_expand = rng.random_range(1..=limits.max_expand.min(2));
        let mut pool = Vec::new();
        for _ in 0..n_expand {
            let src = *model_pool.choose(rng).unwrap();
            nodes.push(DagNode::expand(src));
            pool.push(nodes.len() - 1);
        }
        let n_mid = rng.random_range(0..=2);
        for _ in 0..n_mid {
            let op = *PrimitiveOp::ALL.choose(rng).unwrap();
            let preds: Vec<usize> = if op.arity() == 1 {
                vec![*pool.choose(rng).unwrap()]
            } else if pool.len() >= 2 {
                pool.choose_multiple(rng, 2).copied().collect()
            } else {
                vec![pool[0], pool[0]]
            };
            nodes.push(DagNode::math(op, &preds));
            pool.push(nodes.len() - 1);
        }
        let last = *pool.last().unwrap();
        nodes.push(DagNode::contract(last));
        let first_contract = nodes.len() - 1;
        if limits.max_contract >= 2 && rng.random_bool(0.5) {
            let src = *pool.choose(rng).unwrap();
            nodes.push(DagNode::contract(src));
            let op = *PrimitiveOp::BINARY.choose(rng).unwrap();
            nodes.push(DagNode::math(op, &[first_contract, nodes.len() - 1]));
        }
        let pruned = prune(&nodes);
        let spec = LayerFfnSpec::new(pruned, 1, ExpansionRatio::One);
        if spec.violations(limits).is_empty() {
            return spec.nodes;
        }
    }
}

/// Drops nodes that do not reach the output (the last node) and reindexes.
fn prune(nodes: &[DagNode]) -> Vec<DagNode> {
    let n = nodes.len();
    let mut live = vec![false; n];
    live[0] = true;
    live[n - 1] = true;
    for i in (0..n).rev() {
        if live[i] {
            for &p in &nodes[i].preds {
                live[p] = true;
            }
        }
    }
    let mut remap = vec![usize::MAX; n];
    let mut out = Vec::new();
    for i in 0..n {
        if live[i] {
            remap[i] = out.len();
            out.push(DagNode {
                kind: nodes[i].kind,
                preds: nodes[i].preds.iter().map(|&p| remap[p]).collect(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage3_space_keeps_fixed_dags() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let winner = sample_uniform(&SearchSpaceDef::stage1(3), &mut rng).unwrap();
        let space = SearchSpaceDef::stage3(&winner);
        for _ in 0..20 {
            let g = sample_uniform(&space, &mut rng).unwrap();
            for (a, b) in g.layers.iter().zip(&winner.layers) {
                assert_eq!(a.nodes, b.nodes);
            }
            assert!(space.contains(&g));
        }
    }

    #[test]
    fn stage2_space_keeps_stacks_and_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let winner = sample_uniform(&SearchSpaceDef::stage1(2), &mut rng).unwrap();
        let space = SearchSpaceDef::stage2(&winner);
        assert!(space.contains(&winner));
        for _ in 0..20 {
            let g = sample_uniform(&space, &mut rng).unwrap();
            for (a, b) in g.layers.iter().zip(&winner.layers) {
                assert_eq!((a.stack, a.ratio), (b.stack, b.ratio));
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let space = SearchSpaceDef::stage1(4);
        let a = sample_uniform(&space, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_uniform(&space, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_spaces_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut space = SearchSpaceDef::stage1(2);
        space.stacks = Choice::Free(vec![]);
        assert!(matches!(
            sample_uniform(&space, &mut rng),
            Err(Error::EmptySpace(_))
        ));
        let mut space = SearchSpaceDef::stage1(2);
        space.limits.max_nodes = 2;
        assert!(matches!(
            sample_uniform(&space, &mut rng),
            Err(Error::EmptySpace(_))
        ));
        let mut space = SearchSpaceDef::stage1(2);
        space.ratios = Choice::Fixed(vec![ExpansionRatio::One]);
        assert!(matches!(
            sample_uniform(&space, &mut rng),
            Err(Error::EmptySpace(_))
        ));
    }

    #[test]
    fn stack_frequencies_are_uniform() {
        let space = SearchSpaceDef::stage1(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let g = sample_uniform(&space, &mut rng).unwrap();
            counts[g.layers[0].stack as usize - 1] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.22..=0.28).contains(&f), "{counts:?}");
        }
        // chi-square with 3 dof; 16.27 is the 0.001 critical value
        let e = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }
}
