use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, ToyTask};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::search::SamplerConfig;
use crate::warmup::TrainProtocol;

/// Every knob of a run, as one flat table. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub vocab_size: usize,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub task_size: usize,
    pub train_fraction: f64,
    pub tasks: Vec<String>,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub pretrain_batches: usize,

    pub teacher_layers: usize,
    pub teacher_hidden: usize,
    pub teacher_heads: usize,
    pub teacher_intermediate: usize,
    pub teacher_steps: usize,
    pub lr_teacher: f64,

    pub student_layers: usize,
    pub student_hidden: usize,
    pub student_heads: usize,
    pub student_d_ref: usize,
    pub supernet_steps: usize,
    pub lr_supernet: f64,

    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub proxy_task: String,
    pub proxy_pretrain_steps: usize,
    pub proxy_finetune_steps: usize,
    pub budget_stage1: usize,
    pub budget_stage2: usize,
    pub budget_stage3: usize,
    pub stage3_shared_steps: usize,
    pub stage3_shortlist: usize,
    pub sampler_depth: usize,
    pub sampler_exploration: f64,
    pub sampler_leaf_capacity: usize,
    pub sampler_retries: usize,
    pub proposal_batch: usize,
    pub threads: usize,
    pub cost_penalty: f64,

    pub retrain_pretrain_steps: usize,
    pub retrain_finetune_steps: usize,
    pub lr_retrain_finetune: f64,

    pub rank_candidates: usize,

    pub cost_seq_len: usize,
    pub surface_lo: f64,
    pub surface_hi: f64,
    pub surface_steps: usize,
    pub deepen_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            vocab_size: 512,
            seq_len: 16,
            corpus_size: 1024,
            task_size: 1000,
            train_fraction: 0.8,
            tasks: ToyTask::ALL.iter().map(|t| t.name().to_string()).collect(),
            batch_size: 16,
            mask_prob: 0.15,
            pretrain_batches: 64,
            teacher_layers: 4,
            teacher_hidden: 64,
            teacher_heads: 4,
            teacher_intermediate: 256,
            teacher_steps: 300,
            lr_teacher: 1e-3,
            student_layers: 2,
            student_hidden: 32,
            student_heads: 4,
            student_d_ref: 32,
            supernet_steps: 200,
            lr_supernet: 1e-3,
            lr_pretrain: 1e-4,
            lr_finetune: 4e-4,
            proxy_task: ToyTask::Which.name().to_string(),
            proxy_pretrain_steps: 10,
            proxy_finetune_steps: 30,
            budget_stage1: 50,
            budget_stage2: 30,
            budget_stage3: 30,
            stage3_shared_steps: 2,
            stage3_shortlist: 3,
            sampler_depth: 4,
            sampler_exploration: 0.5,
            sampler_leaf_capacity: 10,
            sampler_retries: 500,
            proposal_batch: 5,
            threads: 1,
            cost_penalty: 0.0,
            retrain_pretrain_steps: 100,
            retrain_finetune_steps: 100,
            lr_retrain_finetune: 5e-5,
            rank_candidates: 8,
            cost_seq_len: 128,
            surface_lo: -15.0,
            surface_hi: 5.0,
            surface_steps: 100,
            deepen_hidden: 24,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Loads `path` (if any), applies `key=value` overrides, and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("corpus_size", self.corpus_size),
            ("batch_size", self.batch_size),
            ("pretrain_batches", self.pretrain_batches),
            ("teacher_layers", self.teacher_layers),
            ("student_layers", self.student_layers),
            ("budget_stage1", self.budget_stage1),
            ("budget_stage2", self.budget_stage2),
            ("budget_stage3", self.budget_stage3),
            ("proposal_batch", self.proposal_batch),
            ("threads", self.threads),
            ("surface_steps", self.surface_steps),
            ("cost_seq_len", self.cost_seq_len),
        ] {
            if v == 0 {
                return bad(format!("`{name}` must be positive"));
            }
        }
        if self.task_size < 2 {
            return bad("`task_size` must be at least 2".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("`train_fraction` must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad("`mask_prob` must lie in [0, 1)".into());
        }
        for (name, v) in [
            ("lr_teacher", self.lr_teacher),
            ("lr_supernet", self.lr_supernet),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
            ("lr_retrain_finetune", self.lr_retrain_finetune),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("`{name}` must be a positive number"));
            }
        }
        if !(self.cost_penalty.is_finite() && self.cost_penalty >= 0.0) {
            return bad("`cost_penalty` must be non-negative".into());
        }
        if !(self.sampler_exploration.is_finite() && self.sampler_exploration >= 0.0) {
            return bad("`sampler_exploration` must be non-negative".into());
        }
        if !(self.surface_lo.is_finite()
            && self.surface_hi.is_finite()
            && self.surface_lo < self.surface_hi)
        {
            return bad("surface range needs finite `surface_lo` < `surface_hi`".into());
        }
        if self.rank_candidates < 2 {
            return bad("`rank_candidates` must be at least 2".into());
        }
        if self.tasks.is_empty() {
            return bad("`tasks` must name at least one task".into());
        }
        self.task_list()?;
        let proxy = self.proxy()?;
        if !self.task_list()?.contains(&proxy) {
            return bad(format!(
                "`proxy_task` {} is not among `tasks`",
                proxy.name()
            ));
        }
        if self.seq_len + 1 > self.max_len() {
            return bad("sequence does not fit the position table".into());
        }
        self.data()
            .check()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.teacher_model().check()?;
        self.student_model().check()?;
        self.deepened_model().check()?;
        Ok(())
    }

    pub fn task_list(&self) -> Result<Vec<ToyTask>> {
        let mut out = Vec::new();
        for name in &self.tasks {
            let t = ToyTask::parse(name)
                .ok_or_else(|| Error::Config(format!("unknown task `{name}`")))?;
            if out.contains(&t) {
                return Err(Error::Config(format!("task `{name}` listed twice")));
            }
            out.push(t);
        }
        Ok(out)
    }

    pub fn proxy(&self) -> Result<ToyTask> {
        ToyTask::parse(&self.proxy_task)
            .ok_or_else(|| Error::Config(format!("unknown task `{}`", self.proxy_task)))
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
        }
    }

    /// Position table size: the sequence plus `[CLS]`, rounded up to a multiple of 16.
    pub fn max_len(&self) -> usize {
        (self.seq_len + 1).div_ceil(16) * 16
    }

    pub fn teacher_model(&self) -> ModelConfig {
        ModelConfig::standard(
            self.teacher_layers,
            self.teacher_hidden,
            self.teacher_heads,
            self.teacher_intermediate,
            self.vocab_size,
            self.max_len(),
        )
    }

    pub fn student_model(&self) -> ModelConfig {
        ModelConfig::standard(
            self.student_layers,
            self.student_hidden,
            self.student_heads,
            self.student_d_ref,
            self.vocab_size,
            self.max_len(),
        )
    }

    /// Student base for depth-doubled genotypes.
    pub fn deepened_model(&self) -> ModelConfig {
        ModelConfig::standard(
            self.student_layers * 2,
            self.deepen_hidden,
            self.student_heads,
            self.student_d_ref,
            self.vocab_size,
            self.max_len(),
        )
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            max_depth: self.sampler_depth,
            exploration: self.sampler_exploration,
            leaf_capacity: self.sampler_leaf_capacity,
            max_retries: self.sampler_retries,
            ..SamplerConfig::default()
        }
    }

    pub fn proxy_protocol(&self) -> TrainProtocol {
        TrainProtocol {
            pretrain_steps: self.proxy_pretrain_steps,
            finetune_steps: self.proxy_finetune_steps,
            lr_pretrain: self.lr_pretrain,
            lr_finetune: self.lr_finetune,
        }
    }

    pub fn retrain_protocol(&self) -> TrainProtocol {
        TrainProtocol {
            pretrain_steps: self.retrain_pretrain_steps,
            finetune_steps: self.retrain_finetune_steps,
            lr_pretrain: self.lr_pretrain,
            lr_finetune: self.lr_retrain_finetune,
        }
    }
}
