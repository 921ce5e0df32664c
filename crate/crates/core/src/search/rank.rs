use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::proxy_evaluate;
use crate::data::ToyTask;
use crate::error::{Error, Result};
use crate::ffn_space::FfnGenotype;
use crate::warmup::{
    inherit_alignment, inherit_weights, task_metrics, train_student, KdContext, SupernetHandle,
    TrainProtocol,
};

/// Zero-based rank of each value in ascending order; equal values keep input order.
pub fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; values.len()];
    for (r, i) in order.into_iter().enumerate() {
        out[i] = r;
    }
    out
}

/// Number of unordered pairs with equal values.
pub fn tied_pairs(values: &[f64]) -> usize {
    let mut n = 0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            n += (values[i] == values[j]) as usize;
        }
    }
    n
}

/// Kendall rank correlation `(concordant - discordant) / (n (n - 1) / 2)`.
///
/// Ties are broken by input order (see [`ranks`]), so every pair counts one way or the other.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "rankings differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Contract(
            "kendall tau needs at least two items".into(),
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len();
    let mut balance = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (rx[i] as i64 - rx[j] as i64).signum() * (ry[i] as i64 - ry[j] as i64).signum();
            balance += s;
        }
    }
    Ok(balance as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub genotype: FfnGenotype,
    /// Search-phase proxy score per task.
    pub proxy: BTreeMap<String, f64>,
    /// Negative holdout task loss after the full retrain, per task.
    #[serde(rename = "final")]
    pub final_score: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub per_task: BTreeMap<String, f64>,
    /// Tau between task-summed proxy and task-summed final scores.
    pub overall: f64,
    /// Tied pairs broken by input order, over all compared score lists.
    pub ties: usize,
    pub candidates: Vec<RankEntry>,
}

/// Scores every candidate twice, with the brief search-time protocol and after a full
/// retrain, and correlates the two orderings.
pub fn rank_correlation_study(
    candidates: &[FfnGenotype],
    handle: &SupernetHandle,
    ctx: &KdContext,
    tasks: &[ToyTask],
    proxy: &TrainProtocol,
    retrain: &TrainProtocol,
) -> Result<TauReport> {
    if candidates.len() < 2 {
        return Err(Error::Contract(
            "rank study needs at least two candidates".into(),
        ));
    }
    if tasks.is_empty() {
        return Err(Error::Input("rank study needs at least one task".into()));
    }
    let mut entries = Vec::with_capacity(candidates.len());
    for g in candidates {
        let mut entry = RankEntry {
            genotype: g.canonical(),
            proxy: BTreeMap::new(),
            final_score: BTreeMap::new(),
        };
        for &task in tasks {
            let (loss, _, _) = proxy_evaluate(handle, g, ctx, proxy, task)?;
            entry.proxy.insert(task.name().to_string(), -loss);
            let mut model = inherit_weights(handle, g)?;
            let mut align = inherit_alignment(handle);
            train_student(&mut model, &mut align, ctx, &[task], retrain)?;
            let m = task_metrics(&model, ctx, task)?;
            entry.final_score.insert(task.name().to_string(), -m.loss);
        }
        entries.push(entry);
    }
    let column = |f: &dyn Fn(&RankEntry) -> f64| entries.iter().map(f).collect::<Vec<f64>>();
    let mut per_task = BTreeMap::new();
    let mut ties = 0;
    for task in tasks {
        let name = task.name();
        let p = column(&|e| e.proxy[name]);
        let f = column(&|e| e.final_score[name]);
        ties += tied_pairs(&p) + tied_pairs(&f);
        per_task.insert(name.to_string(), kendall_tau(&p, &f)?);
    }
    let p = column(&|e| e.proxy.values().sum());
    let f = column(&|e| e.final_score.values().sum());
    ties += tied_pairs(&p) + tied_pairs(&f);
    let overall = kendall_tau(&p, &f)?;
    Ok(TauReport {
        per_task,
        overall,
        ties,
        candidates: entries,
    })
}
