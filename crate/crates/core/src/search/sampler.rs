//! A learnable partition of the search space: a binary tree whose nodes split their
//! records by a linear score predictor, walked by UCB to choose where to sample next.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ffn_space::{sample_uniform, FfnGenotype, SearchSpaceDef};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_depth: usize,
    pub exploration: f64,
    pub leaf_capacity: usize,
    /// Rejection-sampling attempts before falling back to uniform.
    pub max_retries: usize,
    pub ridge: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_depth: 4,
            exploration: 0.5,
            leaf_capacity: 10,
            max_retries: 500,
            ridge: 1e-3,
        }
    }
}

/// `w . x + b >= threshold` (good side) or `<` (other side).
#[derive(Debug, Clone, PartialEq)]
struct Split {
    weights: Vec<f64>,
    bias: f64,
    threshold: f64,
}

impl Split {
    fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn good(&self, x: &[f64]) -> bool {
        self.predict(x) >= self.threshold
    }
}

#[derive(Debug, Clone)]
struct Node {
    records: Vec<usize>,
    split: Option<Split>,
    /// Good child first.
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct SamplerTree {
    config: SamplerConfig,
    encodings: Vec<Vec<f64>>,
    scores: Vec<f64>,
    nodes: Vec<Node>,
}

impl SamplerTree {
    pub fn new(config: SamplerConfig) -> Self {
        SamplerTree {
            config,
            encodings: Vec::new(),
            scores: Vec::new(),
            nodes: vec![Node {
                records: Vec::new(),
                split: None,
                children: None,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn depth(&self) -> usize {
        fn d(t: &SamplerTree, i: usize) -> usize {
            match t.nodes[i].children {
                Some((a, b)) => 1 + d(t, a).max(d(t, b)),
                None => 0,
            }
        }
        d(self, 0)
    }

    /// Leaf that each record routes to, by record index.
    pub fn leaf_of_each(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.scores.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.children.is_none() {
                for &r in &n.records {
                    out[r] = i;
                }
            }
        }
        out
    }

    /// Inserts a scored genotype and refits the whole tree.
    pub fn update(&mut self, genotype: &FfnGenotype, score: f64) {
        self.encodings.push(genotype.encode());
        self.scores.push(score);
        self.rebuild();
    }

    fn rebuild(&mut self) {
        self.nodes = vec![Node {
            records: (0..self.scores.len()).collect(),
            split: None,
            children: None,
        }];
        let mut frontier = vec![(0usize, 0usize)];
        while let Some((i, depth)) = frontier.pop() {
            if depth >= self.config.max_depth
                || self.nodes[i].records.len() <= self.config.leaf_capacity
            {
                continue;
            }
            let Some(split) = self.fit_split(&self.nodes[i].records) else {
                continue;
            };
            let (good, bad): (Vec<usize>, Vec<usize>) = self.nodes[i]
                .records
                .iter()
                .partition(|&&r| split.good(&self.encodings[r]));
            if good.is_empty() || bad.is_empty() {
                continue;
            }
            let (a, b) = (self.nodes.len(), self.nodes.len() + 1);
            self.nodes.push(Node {
                records: good,
                split: None,
                children: None,
            });
            self.nodes.push(Node {
                records: bad,
                split: None,
                children: None,
            });
            self.nodes[i].split = Some(split);
            self.nodes[i].children = Some((a, b));
            frontier.push((a, depth + 1));
            frontier.push((b, depth + 1));
        }
    }

    /// Ridge regression of score on encoding, thresholded at the median prediction.
    fn fit_split(&self, records: &[usize]) -> Option<Split> {
        let n = records.len();
        let k = self.encodings[records[0]].len();
        let mean_x: Vec<f64> = (0..k)
            .map(|j| records.iter().map(|&r| self.encodings[r][j]).sum::<f64>() / n as f64)
            .collect();
        let mean_y = records.iter().map(|&r| self.scores[r]).sum::<f64>() / n as f64;
        let x = DMatrix::from_fn(n, k, |i, j| self.encodings[records[i]][j] - mean_x[j]);
        let y = DVector::from_fn(n, |i, _| self.scores[records[i]] - mean_y);
        let gram = x.transpose() * &x + DMatrix::identity(k, k) * self.config.ridge * n as f64;
        let w = gram.cholesky()?.solve(&(x.transpose() * y));
        let weights: Vec<f64> = w.iter().copied().collect();
        let bias = mean_y - weights.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>();
        let mut split = Split {
            weights,
            bias,
            threshold: 0.0,
        };
        let mut preds: Vec<f64> = records
            .iter()
            .map(|&r| split.predict(&self.encodings[r]))
            .collect();
        preds.sort_by(f64::total_cmp);
        // strictly above the lower median, so ties at the median land on the other side
        let lower_median = preds[(n - 1) / 2];
        let above = preds.iter().copied().find(|&p| p > lower_median)?;
        split.threshold = (lower_median + above) / 2.0;
        Some(split)
    }

    fn mean_score(&self, node: usize) -> f64 {
        let r = &self.nodes[node].records;
        r.iter().map(|&i| self.scores[i]).sum::<f64>() / r.len() as f64
    }

    /// Constraints of the UCB-chosen path: `(split, want_good)` per level.
    fn select_path(&self) -> Vec<(&Split, bool)> {
        let mut path = Vec::new();
        let mut i = 0;
        while let Some((good, bad)) = self.nodes[i].children {
            let parent_n = self.nodes[i].records.len() as f64;
            let ucb = |c: usize| {
                let n = self.nodes[c].records.len() as f64;
                self.mean_score(c) + self.config.exploration * (2.0 * parent_n.ln() / n).sqrt()
            };
            let take_good = ucb(good) >= ucb(bad);
            path.push((
                self.nodes[i].split.as_ref().expect("internal node"),
                take_good,
            ));
            i = if take_good { good } else { bad };
        }
        path
    }

    /// Samples from the chosen region by rejection, falling back to uniform.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        space: &SearchSpaceDef,
        rng: &mut R,
    ) -> Result<FfnGenotype> {
        let path = self.select_path();
        if path.is_empty() {
            return sample_uniform(space, rng);
        }
        for _ in 0..self.config.max_retries {
            let g = sample_uniform(space, rng)?;
            let x = g.encode();
            if path.iter().all(|(s, want)| s.good(&x) == *want) {
                return Ok(g);
            }
        }
        debug!(
            "sampler region too small after {} tries, sampling uniformly",
            self.config.max_retries
        );
        sample_uniform(space, rng)
    }
}
