//! The three-stage coarse-to-fine search driver, the sampling tree, and rank-correlation
//! analysis between search-time proxies and retrained scores.

mod rank;
mod sampler;

use std::collections::HashMap;
use std::io::Write;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ToyTask;
use crate::error::{Error, Result};
use crate::ffn_space::{sample_uniform, FfnGenotype, SearchSpaceDef};
use crate::model::{count_params, CostReport, Head, ParamStore};
use crate::tensor::{AdamConfig, AdamState, Tensor};
use crate::warmup::{
    holdout_kd_loss, inherit_alignment, inherit_weights, shared_subnet_step, sliced_eval,
    train_student, KdContext, Mode, SupernetHandle, TrainProtocol,
};

pub use rank::{kendall_tau, rank_correlation_study, ranks, tied_pairs, RankEntry, TauReport};
pub use sampler::{SamplerConfig, SamplerTree};

/// Feature vector the sampler regresses on: per layer, the primitive histogram, stack
/// number and ratio.
pub fn encode_genotype(g: &FfnGenotype) -> Vec<f64> {
    g.encode()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        match n {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            3 => Some(Stage::Three),
            _ => None,
        }
    }
}

/// How a record's score was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Inherit from the frozen supernet, train briefly, score on the holdout split.
    Inherit,
    /// Read through the shared stage-3 supernet, no standalone training.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub stage: Stage,
    /// Discovery order within the stage.
    pub index: usize,
    pub seed: u64,
    pub genotype: FfnGenotype,
    pub proxy_score: f64,
    pub holdout_loss: f64,
    pub protocol: Protocol,
    /// Carried over from the previous stage rather than proposed.
    pub incumbent: bool,
    /// Optimizer steps spent on this record.
    pub steps: u64,
    pub cost: CostReport,
}

/// Proposal strategy for stages 1 and 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Tree,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: usize,
    pub seed: u64,
    /// Brief training each candidate gets before scoring.
    pub proxy: TrainProtocol,
    pub proxy_task: ToyTask,
    pub sampler: SamplerConfig,
    pub sampler_kind: SamplerKind,
    /// Subtracted from the score per unit of parameters relative to the baseline FFN.
    pub cost_penalty: f64,
    /// Proposals drawn per sampler refit; evaluated concurrently.
    pub proposal_batch: usize,
    pub threads: usize,
    /// Stage 3: shared-weight steps per sampled sub-network (each visits every task).
    pub shared_steps: usize,
    pub lr_shared: f64,
    /// Stage 3: best shared-score candidates re-scored with the inherit protocol.
    pub shortlist: usize,
}

impl SearchConfig {
    fn check(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Contract("search budget must be positive".into()));
        }
        if self.proposal_batch == 0 || self.threads == 0 {
            return Err(Error::Config(
                "proposal_batch and threads must be positive".into(),
            ));
        }
        if !self.cost_penalty.is_finite() || self.cost_penalty < 0.0 {
            return Err(Error::Config(
                "cost_penalty must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// What a stage needs beyond the frozen warm-up supernet.
#[derive(Debug)]
pub enum StageInput<'a> {
    One,
    Two {
        winner: &'a FfnGenotype,
    },
    Three {
        winner: &'a FfnGenotype,
        supernet: &'a mut SupernetHandle,
    },
}

impl StageInput<'_> {
    pub fn stage(&self) -> Stage {
        match self {
            StageInput::One => Stage::One,
            StageInput::Two { .. } => Stage::Two,
            StageInput::Three { .. } => Stage::Three,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub best: SearchRecord,
    pub log: Vec<SearchRecord>,
}

fn baseline_params(handle: &SupernetHandle) -> f64 {
    let cfg = handle
        .model()
        .cfg
        .clone()
        .with_genotype(FfnGenotype::baseline(handle.model().cfg.num_layers));
    count_params(&cfg).params_total as f64
}

/// Proxy evaluation: inherit, train briefly on the proxy task, score by negative holdout
/// distillation loss. A pure function of the genotype for a fixed handle and context.
pub fn proxy_evaluate(
    handle: &SupernetHandle,
    genotype: &FfnGenotype,
    ctx: &KdContext,
    proto: &TrainProtocol,
    task: ToyTask,
) -> Result<(f64, u64, CostReport)> {
    let mut model = inherit_weights(handle, genotype)?;
    let mut align = inherit_alignment(handle);
    let log = train_student(&mut model, &mut align, ctx, &[task], proto)?;
    let loss = holdout_kd_loss(&model, &align, ctx, task)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: log.len(),
            loss,
        });
    }
    Ok((loss, log.len() as u64, count_params(&model.cfg)))
}

fn score_of(loss: f64, cost: &CostReport, penalty: f64, base: f64) -> f64 {
    -loss - penalty * cost.params_total as f64 / base
}

#[allow(clippy::too_many_arguments)]
fn evaluate_all(
    handle: &SupernetHandle,
    ctx: &KdContext,
    cfg: &SearchConfig,
    stage: Stage,
    genotypes: &[(usize, FfnGenotype, bool)],
    cache: &mut HashMap<FfnGenotype, (f64, u64, CostReport)>,
) -> Result<Vec<SearchRecord>> {
    let todo: Vec<&FfnGenotype> = {
        let mut seen = Vec::new();
        for (_, g, _) in genotypes {
            if !cache.contains_key(g) && !seen.contains(&g) {
                seen.push(g);
            }
        }
        seen
    };
    let results: Vec<Result<(f64, u64, CostReport)>> = if cfg.threads <= 1 || todo.len() <= 1 {
        todo.iter()
            .map(|g| proxy_evaluate(handle, g, ctx, &cfg.proxy, cfg.proxy_task))
            .collect()
    } else {
        let per = todo.len().div_ceil(cfg.threads);
        std::thread::scope(|s| {
            let jobs: Vec<_> = todo
                .chunks(per)
                .map(|chunk| {
                    s.spawn(move || {
                        chunk
                            .iter()
                            .map(|g| proxy_evaluate(handle, g, ctx, &cfg.proxy, cfg.proxy_task))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            jobs.into_iter()
                .flat_map(|j| j.join().expect("evaluation thread panicked"))
                .collect()
        })
    };
    for (g, r) in todo.into_iter().zip(results) {
        cache.insert(g.clone(), r?);
    }
    let base = baseline_params(handle);
    Ok(genotypes
        .iter()
        .map(|(index, g, incumbent)| {
            let (loss, steps, cost) = cache[g].clone();
            SearchRecord {
                stage,
                index: *index,
                seed: cfg.seed,
                genotype: g.clone(),
                proxy_score: score_of(loss, &cost, cfg.cost_penalty, base),
                holdout_loss: loss,
                protocol: Protocol::Inherit,
                incumbent: *incumbent,
                steps,
                cost,
            }
        })
        .collect())
}

/// Highest score; ties go to fewer parameters, then fewer Mult-Adds, then earlier discovery.
pub fn best_record<'r>(
    records: impl IntoIterator<Item = &'r SearchRecord>,
) -> Option<&'r SearchRecord> {
    records.into_iter().reduce(|a, b| {
        let key = |r: &SearchRecord| (r.cost.params_total, r.cost.mult_adds_total, r.index);
        match b.proxy_score.total_cmp(&a.proxy_score) {
            std::cmp::Ordering::Greater => b,
            std::cmp::Ordering::Less => a,
            std::cmp::Ordering::Equal => {
                if key(b) < key(a) {
                    b
                } else {
                    a
                }
            }
        }
    })
}

fn sampled_search(
    handle: &SupernetHandle,
    ctx: &KdContext,
    cfg: &SearchConfig,
    stage: Stage,
    space: &SearchSpaceDef,
    incumbent: Option<&FfnGenotype>,
) -> Result<Vec<SearchRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((stage.number() as u64) << 32));
    let mut tree = SamplerTree::new(cfg.sampler);
    let mut cache = HashMap::new();
    let mut log = Vec::with_capacity(cfg.budget + 1);
    if let Some(g) = incumbent {
        let rec = evaluate_all(
            handle,
            ctx,
            cfg,
            stage,
            &[(0, g.canonical(), true)],
            &mut cache,
        )?;
        tree.update(&rec[0].genotype, rec[0].proxy_score);
        log.extend(rec);
    }
    let offset = log.len();
    let mut proposed = 0;
    while proposed < cfg.budget {
        let n = cfg.proposal_batch.min(cfg.budget - proposed);
        let mut batch = Vec::with_capacity(n);
        for k in 0..n {
            let g = match cfg.sampler_kind {
                SamplerKind::Tree => tree.propose(space, &mut rng)?,
                SamplerKind::Uniform => sample_uniform(space, &mut rng)?,
            };
            batch.push((offset + proposed + k, g.canonical(), false));
        }
        let records = evaluate_all(handle, ctx, cfg, stage, &batch, &mut cache)?;
        for r in &records {
            tree.update(&r.genotype, r.proxy_score);
        }
        proposed += n;
        log.extend(records);
    }
    Ok(log)
}

/// Runs one search stage against the frozen warm-up supernet `handle`.
///
/// Stages 2 and 3 re-score the previous winner under the same protocol, so the stage best
/// never falls below it.
pub fn run_stage(
    input: StageInput<'_>,
    handle: &SupernetHandle,
    ctx: &KdContext,
    cfg: &SearchConfig,
) -> Result<StageOutcome> {
    cfg.check()?;
    if handle.mode() != Mode::Frozen {
        return Err(Error::Mode(
            "stages score candidates against a frozen supernet".into(),
        ));
    }
    if ctx.task(cfg.proxy_task)?.holdout.is_empty() {
        return Err(Error::Input("proxy task has no holdout batches".into()));
    }
    let num_layers = handle.model().cfg.num_layers;
    let stage = input.stage();
    let log = match input {
        StageInput::One => sampled_search(
            handle,
            ctx,
            cfg,
            stage,
            &SearchSpaceDef::stage1(num_layers),
            None,
        )?,
        StageInput::Two { winner } => sampled_search(
            handle,
            ctx,
            cfg,
            stage,
            &SearchSpaceDef::stage2(winner),
            Some(winner),
        )?,
        StageInput::Three { winner, supernet } => stage_three(handle, supernet, ctx, cfg, winner)?,
    };
    let best = best_record(log.iter().filter(|r| r.protocol == Protocol::Inherit))
        .expect("budget is positive")
        .clone();
    info!(
        "stage {} best score {:.6} after {} records",
        stage.number(),
        best.proxy_score,
        log.len()
    );
    Ok(StageOutcome { best, log })
}

/// Mean distillation loss of a sub-network read through `supernet`, over every task's
/// holdout batches.
fn shared_holdout_loss(supernet: &SupernetHandle, g: &FfnGenotype, ctx: &KdContext) -> Result<f64> {
    let (mut sum, mut rows) = (0.0, 0usize);
    for td in &ctx.tasks {
        for b in &td.holdout {
            let r = sliced_eval(
                supernet,
                g,
                b,
                Head::Task(td.task.name()),
                &td.kd_config(),
                &ctx.mapping,
            )?;
            sum += r.total * b.tokens.batch as f64;
            rows += b.tokens.batch;
        }
    }
    Ok(sum / rows.max(1) as f64)
}

fn stage_three(
    handle: &SupernetHandle,
    supernet: &mut SupernetHandle,
    ctx: &KdContext,
    cfg: &SearchConfig,
    winner: &FfnGenotype,
) -> Result<Vec<SearchRecord>> {
    if supernet.mode() != Mode::Activated {
        return Err(Error::Mode("stage 3 trains an activated supernet".into()));
    }
    if ctx.tasks.is_empty() {
        return Err(Error::Input("stage 3 needs at least one task".into()));
    }
    let space = SearchSpaceDef::stage3(winner);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (3 << 32));
    let total = (cfg.budget * cfg.shared_steps * ctx.tasks.len()) as u64;
    let mut opt = AdamState::new(AdamConfig::scheduled(cfg.lr_shared, total.max(1)));
    let base = baseline_params(handle);
    let mut log = Vec::with_capacity(cfg.budget + cfg.shortlist + 1);
    let mut cursor = 0usize;
    for index in 0..cfg.budget {
        let g = sample_uniform(&space, &mut rng)?.canonical();
        let mut steps = 0u64;
        for _ in 0..cfg.shared_steps {
            for td in &ctx.tasks {
                let batch = &td.train[cursor % td.train.len()];
                shared_subnet_step(
                    supernet,
                    &g,
                    batch,
                    Head::Task(td.task.name()),
                    &td.kd_config(),
                    &ctx.mapping,
                    &mut opt,
                )?;
                steps += 1;
            }
            cursor += 1;
        }
        let loss = shared_holdout_loss(supernet, &g, ctx)?;
        let cost = count_params(&supernet.model().cfg.clone().with_genotype(g.clone()));
        log.push(SearchRecord {
            stage: Stage::Three,
            index,
            seed: cfg.seed,
            genotype: g,
            proxy_score: score_of(loss, &cost, cfg.cost_penalty, base),
            holdout_loss: loss,
            protocol: Protocol::Shared,
            incumbent: false,
            steps,
            cost,
        });
    }
    // Shortlist distinct genotypes by shared score, then re-score them and the incumbent.
    let mut order: Vec<&SearchRecord> = log.iter().collect();
    order.sort_by(|a, b| {
        b.proxy_score
            .total_cmp(&a.proxy_score)
            .then(a.index.cmp(&b.index))
    });
    let mut shortlist: Vec<FfnGenotype> = vec![winner.canonical()];
    for r in order {
        if shortlist.len() > cfg.shortlist {
            break;
        }
        if !shortlist.contains(&r.genotype) {
            shortlist.push(r.genotype.clone());
        }
    }
    let entries: Vec<(usize, FfnGenotype, bool)> = shortlist
        .into_iter()
        .enumerate()
        .map(|(k, g)| (cfg.budget + k, g, k == 0))
        .collect();
    let mut cache = HashMap::new();
    log.extend(evaluate_all(
        handle,
        ctx,
        cfg,
        Stage::Three,
        &entries,
        &mut cache,
    )?);
    Ok(log)
}

/// Per-task prediction layers over one shared trunk.
#[derive(Debug)]
pub struct MultiTaskHead<'a> {
    trunk: &'a ParamStore,
    tasks: Vec<ToyTask>,
}

impl<'a> MultiTaskHead<'a> {
    pub fn new(supernet: &'a SupernetHandle, tasks: &[ToyTask]) -> Result<Self> {
        let cfg = &supernet.model().cfg;
        for t in tasks {
            if cfg.head(t.name()).is_none() {
                return Err(Error::Contract(format!(
                    "supernet has no head for `{}`",
                    t.name()
                )));
            }
        }
        Ok(MultiTaskHead {
            trunk: &supernet.model().params,
            tasks: tasks.to_vec(),
        })
    }

    pub fn tasks(&self) -> &[ToyTask] {
        &self.tasks
    }

    /// The parameter storage a task's forward pass reads its trunk from.
    pub fn trunk(&self, task: ToyTask) -> Option<&'a ParamStore> {
        self.tasks.contains(&task).then_some(self.trunk)
    }

    /// `(weight, bias)` of a task's prediction layer.
    pub fn head(&self, task: ToyTask) -> Option<(&'a Tensor, &'a Tensor)> {
        let name = task.name();
        let w = self.trunk.get(&format!("head.{name}.weight"))?;
        let b = self.trunk.get(&format!("head.{name}.bias"))?;
        self.tasks.contains(&task).then_some((w, b))
    }
}

/// Writes records as JSON lines after an optional `#` provenance line.
pub fn write_search_log<W: Write>(
    mut out: W,
    header: Option<&str>,
    records: &[SearchRecord],
) -> Result<()> {
    if let Some(h) = header {
        writeln!(out, "# {h}")?;
    }
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
