//! The end-to-end workflow behind the command-line tool: every command reads its upstream
//! artifacts from an output directory and writes its own next to them.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::data::{fixture_hash, gen_corpus, gen_task, to_jsonl, Corpus, TaskDataset, ToyTask};
use crate::distill::{alignment_params, write_loss_log};
use crate::error::{Error, Result};
use crate::ffn_space::{sample_uniform, FfnGenotype, SearchSpaceDef, SpaceLimits};
use crate::model::{
    build_supernet, count_mult_adds, count_params, nonlinearity_surface, GridSpec, HeadSpec, Model,
    ModelConfig,
};
use crate::search::{
    rank_correlation_study, run_stage, write_search_log, SamplerKind, SearchConfig, Stage,
    StageInput,
};
use crate::teacher::{train_teacher, TeacherOptions};
use crate::tensor::Checkpoint;
use crate::warmup::{
    inherit_alignment, inherit_weights, pretrain_supernet, task_metrics, train_student,
    ContextOptions, KdContext, Mode, SupernetHandle, TrainProtocol,
};

pub use config::RunConfig;

pub const TEACHER: &str = "teacher.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.jsonl";
pub const SUPERNET: &str = "supernet.ckpt";
pub const SUPERNET_LOG: &str = "supernet_log.jsonl";
pub const STAGE3_SUPERNET: &str = "stage3_supernet.ckpt";
pub const COST: &str = "cost.csv";
pub const SURFACE: &str = "surface.csv";
pub const TAU: &str = "tau.json";
pub const EVAL: &str = "eval.json";
pub const REPORT: &str = "report.json";
pub const DEEPENED: &str = "deepened.json";
pub const DATA_DIR: &str = "data";
pub const HASHES: &str = "hashes.json";

pub fn stage_log(stage: Stage) -> String {
    format!("stage{}.jsonl", stage.number())
}

pub fn stage_winner(stage: Stage) -> String {
    format!("stage{}_winner.json", stage.number())
}

pub fn retrain_ckpt(plus: bool) -> &'static str {
    if plus {
        "retrain_plus.ckpt"
    } else {
        "retrain.ckpt"
    }
}

pub fn retrain_log(plus: bool) -> &'static str {
    if plus {
        "retrain_plus_log.jsonl"
    } else {
        "retrain_log.jsonl"
    }
}

/// Crate version with the git description of the build, e.g. `0.1.0+3f2a1bc`.
pub fn version() -> String {
    format!(
        "{}+{}",
        env!("CARGO_PKG_VERSION"),
        env!("FFN_NAS_GIT_DESCRIBE")
    )
}

/// A run: resolved configuration plus the directory artifacts live in.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig, out_dir: impl Into<PathBuf>) -> Result<Run> {
        let out_dir = out_dir.into();
        fs::create_dir_all(&out_dir)?;
        Ok(Run { cfg, out_dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Path of an upstream artifact, or a missing-artifact error naming it.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    pub fn provenance(&self) -> Value {
        json!({ "version": version(), "config": self.cfg })
    }

    /// Single-line provenance for `#` headers.
    pub fn provenance_line(&self) -> String {
        serde_json::to_string(&self.provenance()).expect("provenance serializes")
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes)?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn write_json(&self, name: &str, mut value: Value) -> Result<PathBuf> {
        if let Value::Object(m) = &mut value {
            m.insert("provenance".into(), self.provenance());
        }
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn save_checkpoint(&self, name: &str, mut ck: Checkpoint) -> Result<PathBuf> {
        if let Value::Object(m) = &mut ck.meta {
            m.insert("provenance".into(), self.provenance());
        }
        let p = self.path(name);
        ck.save(&p)?;
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn tasks(&self) -> Result<Vec<ToyTask>> {
        self.cfg.task_list()
    }

    pub fn corpus(&self) -> Result<Corpus> {
        gen_corpus(self.cfg.seed, self.cfg.corpus_size, &self.cfg.data())
    }

    pub fn task_data(&self) -> Result<Vec<TaskDataset>> {
        self.tasks()?
            .into_iter()
            .map(|t| {
                gen_task(
                    self.cfg.seed,
                    t,
                    &self.cfg.data(),
                    self.cfg.task_size,
                    self.cfg.train_fraction,
                )
            })
            .collect()
    }

    fn head_specs(&self) -> Result<Vec<HeadSpec>> {
        Ok(self
            .tasks()?
            .iter()
            .map(|t| HeadSpec::new(t.name(), t.head_width()))
            .collect())
    }

    pub fn load_teacher(&self) -> Result<Model> {
        let teacher = Model::from_checkpoint(Checkpoint::load(&self.require(TEACHER)?)?)?;
        for t in self.tasks()? {
            if teacher.cfg.head(t.name()).is_none() {
                return Err(Error::Config(format!(
                    "teacher has no head for task `{}`",
                    t.name()
                )));
            }
        }
        Ok(teacher)
    }

    pub fn load_supernet(&self, name: &str) -> Result<SupernetHandle> {
        SupernetHandle::from_checkpoint(Checkpoint::load(&self.require(name)?)?)
    }

    pub fn context(&self, teacher: &Model) -> Result<KdContext> {
        let opts = ContextOptions {
            batch_size: self.cfg.batch_size,
            pretrain_batches: self.cfg.pretrain_batches,
            mask_prob: self.cfg.mask_prob,
            seed: self.cfg.seed,
            student_layers: self.cfg.student_layers,
        };
        KdContext::build(teacher, &self.corpus()?, &self.task_data()?, &opts)
    }

    pub fn search_config(&self, stage: Stage) -> Result<SearchConfig> {
        let c = &self.cfg;
        Ok(SearchConfig {
            budget: match stage {
                Stage::One => c.budget_stage1,
                Stage::Two => c.budget_stage2,
                Stage::Three => c.budget_stage3,
            },
            seed: c.seed,
            proxy: c.proxy_protocol(),
            proxy_task: c.proxy()?,
            sampler: c.sampler(),
            sampler_kind: SamplerKind::Tree,
            cost_penalty: c.cost_penalty,
            proposal_batch: c.proposal_batch,
            threads: c.threads,
            shared_steps: c.stage3_shared_steps,
            lr_shared: c.lr_finetune,
            shortlist: c.stage3_shortlist,
        })
    }

    /// Genotype from a file holding either a bare genotype or a winner record.
    pub fn read_genotype(&self, path: &Path) -> Result<FfnGenotype> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        let g = v.get("genotype").cloned().unwrap_or(v);
        Ok(serde_json::from_value(g)?)
    }

    fn final_genotype(&self, explicit: Option<&Path>) -> Result<FfnGenotype> {
        match explicit {
            Some(p) => self.read_genotype(p),
            None => self.read_genotype(&self.require(&stage_winner(Stage::Three))?),
        }
    }

    /// Writes the corpus and task fixtures with their hashes, or checks them against the
    /// recorded hashes when `verify` is set.
    pub fn gen_data(&self, verify: bool) -> Result<BTreeMap<String, String>> {
        let mut files = vec![(
            "corpus.jsonl".to_string(),
            to_jsonl(&self.corpus()?.sequences)?,
        )];
        for ds in self.task_data()? {
            files.push((format!("{}_train.jsonl", ds.name()), to_jsonl(&ds.train)?));
            files.push((
                format!("{}_holdout.jsonl", ds.name()),
                to_jsonl(&ds.holdout)?,
            ));
        }
        let hashes: BTreeMap<String, String> = files
            .iter()
            .map(|(n, text)| (n.clone(), fixture_hash(text.as_bytes())))
            .collect();
        let hash_path = format!("{DATA_DIR}/{HASHES}");
        if verify {
            let recorded: BTreeMap<String, String> =
                serde_json::from_str(&fs::read_to_string(self.require(&hash_path)?)?)?;
            // both the regenerated text and the file on disk must match the record
            for (name, h) in &hashes {
                let on_disk =
                    fixture_hash(&fs::read(self.require(&format!("{DATA_DIR}/{name}"))?)?);
                match recorded.get(name) {
                    Some(r) if r == h && *r == on_disk => {}
                    Some(_) => {
                        return Err(Error::Input(format!(
                            "fixture `{name}` does not match its recorded hash"
                        )))
                    }
                    None => {
                        return Err(Error::Input(format!(
                            "fixture `{name}` has no recorded hash"
                        )))
                    }
                }
            }
            return Ok(hashes);
        }
        for (name, text) in &files {
            self.write(&format!("{DATA_DIR}/{name}"), text)?;
        }
        let mut text = serde_json::to_string_pretty(&hashes)?;
        text.push('\n');
        self.write(&hash_path, text)?;
        Ok(hashes)
    }

    pub fn train_teacher(&self) -> Result<Model> {
        let c = &self.cfg;
        self.gen_data(false)?;
        let opts = TeacherOptions {
            steps: c.teacher_steps,
            lr: c.lr_teacher,
            batch_size: c.batch_size,
            mask_prob: c.mask_prob,
            seed: c.seed,
        };
        let (teacher, log) = train_teacher(
            c.teacher_model(),
            &self.corpus()?,
            &self.task_data()?,
            &opts,
        )?;
        self.save_checkpoint(
            TEACHER,
            teacher.to_checkpoint(json!({ "steps": c.teacher_steps }))?,
        )?;
        let mut text = format!("# {}\n", self.provenance_line());
        text.push_str(&to_jsonl(&log)?);
        self.write(TEACHER_LOG, text)?;
        Ok(teacher)
    }

    pub fn pretrain_supernet(&self) -> Result<SupernetHandle> {
        let teacher = self.load_teacher()?;
        let ctx = self.context(&teacher)?;
        let cfg = self
            .cfg
            .student_model()
            .with_heads(self.head_specs()?, false);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
        let supernet = build_supernet(&cfg, &mut rng)?;
        let align = alignment_params(cfg.hidden, teacher.cfg.hidden, &mut rng);
        let (handle, log) = pretrain_supernet(
            supernet,
            align,
            &ctx,
            self.cfg.supernet_steps,
            self.cfg.lr_supernet,
            Mode::Frozen,
        )?;
        self.save_checkpoint(SUPERNET, handle.to_checkpoint()?)?;
        let mut buf = format!("# {}\n", self.provenance_line()).into_bytes();
        write_loss_log(&mut buf, &log)?;
        self.write(SUPERNET_LOG, buf)?;
        Ok(handle)
    }

    /// Runs one search stage; returns the winning record's genotype.
    pub fn search(&self, stage: Stage) -> Result<FfnGenotype> {
        let incumbent = match stage {
            Stage::One => None,
            Stage::Two => Some(self.read_genotype(&self.require(&stage_winner(Stage::One))?)?),
            Stage::Three => Some(self.read_genotype(&self.require(&stage_winner(Stage::Two))?)?),
        };
        let handle = self.load_supernet(SUPERNET)?;
        let teacher = self.load_teacher()?;
        let ctx = self.context(&teacher)?;
        let scfg = self.search_config(stage)?;
        let mut stage3 = None;
        let outcome = match (&incumbent, stage) {
            (None, _) => run_stage(StageInput::One, &handle, &ctx, &scfg)?,
            (Some(w), Stage::Two) => {
                run_stage(StageInput::Two { winner: w }, &handle, &ctx, &scfg)?
            }
            (Some(w), _) => {
                let mut active = handle.clone().activate("stage3");
                let out = run_stage(
                    StageInput::Three {
                        winner: w,
                        supernet: &mut active,
                    },
                    &handle,
                    &ctx,
                    &scfg,
                )?;
                stage3 = Some(active.freeze("stage3-done"));
                out
            }
        };
        let mut buf = Vec::new();
        write_search_log(&mut buf, Some(&self.provenance_line()), &outcome.log)?;
        self.write(&stage_log(stage), buf)?;
        self.write_json(
            &stage_winner(stage),
            json!({ "stage": stage, "genotype": outcome.best.genotype, "record": outcome.best }),
        )?;
        if let Some(h) = stage3 {
            self.save_checkpoint(STAGE3_SUPERNET, h.to_checkpoint()?)?;
        }
        Ok(outcome.best.genotype)
    }

    /// Plain: inherit from the warm-up supernet, then pre-train and fine-tune. Plus: inherit
    /// from the multi-task stage-3 supernet and fine-tune directly.
    pub fn retrain(&self, plus: bool, genotype: Option<&Path>) -> Result<Model> {
        let g = self.final_genotype(genotype)?;
        let handle = self.load_supernet(if plus { STAGE3_SUPERNET } else { SUPERNET })?;
        let teacher = self.load_teacher()?;
        let ctx = self.context(&teacher)?;
        let mut model = inherit_weights(&handle, &g)?;
        let mut align = inherit_alignment(&handle);
        let proto = TrainProtocol {
            pretrain_steps: if plus {
                0
            } else {
                self.cfg.retrain_pretrain_steps
            },
            ..self.cfg.retrain_protocol()
        };
        let log = train_student(&mut model, &mut align, &ctx, &self.tasks()?, &proto)?;
        self.save_checkpoint(
            retrain_ckpt(plus),
            model.to_checkpoint(json!({ "plus": plus, "protocol": proto }))?,
        )?;
        let mut buf = format!("# {}\n", self.provenance_line()).into_bytes();
        write_loss_log(&mut buf, &log)?;
        self.write(retrain_log(plus), buf)?;
        Ok(model)
    }

    /// Holdout metrics of the retrained models (and the teacher for reference), plus the
    /// run report.
    pub fn eval(&self, model: Option<&Path>) -> Result<Value> {
        let mut models: Vec<(String, PathBuf)> = Vec::new();
        match model {
            Some(p) if p.is_file() => models.push(("model".into(), p.to_path_buf())),
            Some(p) => return Err(Error::MissingArtifact(p.to_path_buf())),
            None => {
                for plus in [false, true] {
                    let p = self.path(retrain_ckpt(plus));
                    if p.is_file() {
                        models.push((retrain_ckpt(plus).trim_end_matches(".ckpt").to_string(), p));
                    }
                }
                if models.is_empty() {
                    return Err(Error::MissingArtifact(self.path(retrain_ckpt(false))));
                }
            }
        }
        let teacher = self.load_teacher()?;
        let ctx = self.context(&teacher)?;
        let mut out = serde_json::Map::new();
        let mut describe = |name: &str, m: &Model| -> Result<()> {
            let mut tasks = serde_json::Map::new();
            for t in self.tasks()? {
                tasks.insert(
                    t.name().into(),
                    serde_json::to_value(task_metrics(m, &ctx, t)?)?,
                );
            }
            let cost = count_mult_adds(&m.cfg, self.cfg.seq_len + 1);
            out.insert(
                name.into(),
                json!({
                    "params": m.num_params(),
                    "mult_adds": cost.mult_adds_total,
                    "genotype": m.cfg.genotype,
                    "tasks": tasks,
                }),
            );
            Ok(())
        };
        describe("teacher", &teacher)?;
        for (name, p) in &models {
            describe(name, &Model::from_checkpoint(Checkpoint::load(p)?)?)?;
        }
        let eval = json!({ "models": out });
        self.write_json(EVAL, eval.clone())?;
        self.write_json(REPORT, self.report()?)?;
        Ok(eval)
    }

    /// `{stage_winners, tau_report, budgets, seeds}` from whatever artifacts exist.
    pub fn report(&self) -> Result<Value> {
        let mut winners = serde_json::Map::new();
        for stage in [Stage::One, Stage::Two, Stage::Three] {
            let p = self.path(&stage_winner(stage));
            if p.is_file() {
                let v: Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
                winners.insert(
                    stage.number().to_string(),
                    json!({ "genotype": v["genotype"], "proxy_score": v["record"]["proxy_score"] }),
                );
            }
        }
        let tau = match self.path(TAU) {
            p if p.is_file() => {
                let mut v: Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
                if let Value::Object(m) = &mut v {
                    m.remove("provenance");
                }
                v
            }
            _ => Value::Null,
        };
        let c = &self.cfg;
        Ok(json!({
            "stage_winners": winners,
            "tau_report": tau,
            "budgets": { "stage1": c.budget_stage1, "stage2": c.budget_stage2, "stage3": c.budget_stage3 },
            "seeds": [c.seed],
            "choices": {
                "dag_limits": SpaceLimits::default(),
                "stage3_shared_updates": "every parameter the subnet touches: embeddings, attention, FFN slices, task heads",
                "attention_maps": "post-softmax",
                "precision": "f64",
            },
        }))
    }

    /// Per-layer and total cost rows for the teacher, the baseline student and every stage
    /// winner present.
    pub fn cost(&self) -> Result<String> {
        let mut rows: Vec<(String, ModelConfig)> = vec![
            ("teacher".into(), self.cfg.teacher_model()),
            ("student_baseline".into(), self.cfg.student_model()),
        ];
        for stage in [Stage::One, Stage::Two, Stage::Three] {
            let p = self.path(&stage_winner(stage));
            if p.is_file() {
                let g = self.read_genotype(&p)?;
                rows.push((
                    format!("stage{}_winner", stage.number()),
                    self.cfg.student_model().with_genotype(g),
                ));
            }
        }
        let mut csv = format!("# {}\n", self.provenance_line());
        csv.push_str("model,layer,params_mha,params_ffn,mult_adds_mha,mult_adds_ffn\n");
        for (name, cfg) in rows {
            let p = count_params(&cfg);
            let m = count_mult_adds(&cfg, self.cfg.cost_seq_len);
            for (lp, lm) in p.per_layer.iter().zip(&m.per_layer) {
                let _ = writeln!(
                    csv,
                    "{name},{},{},{},{},{}",
                    lp.layer, lp.params_mha, lp.params_ffn, lm.mult_adds_mha, lm.mult_adds_ffn
                );
            }
            let _ = writeln!(
                csv,
                "{name},total,{},{},{},{}",
                p.params_mha, p.params_ffn, m.mult_adds_mha, m.mult_adds_ffn
            );
        }
        self.write(COST, &csv)?;
        Ok(csv)
    }

    /// Nonlinearity surface of a genotype (default: the stage-3 winner, else the baseline).
    pub fn surface(&self, genotype: Option<&Path>) -> Result<String> {
        let g = match genotype {
            Some(p) => self.read_genotype(p)?,
            None => match self.path(&stage_winner(Stage::Three)) {
                p if p.is_file() => self.read_genotype(&p)?,
                _ => FfnGenotype::baseline(self.cfg.student_layers),
            },
        };
        let mut cfg = self.cfg.student_model().with_genotype(g);
        cfg.num_layers = cfg.genotype.layers.len();
        cfg.hidden = 2;
        cfg.num_heads = 1;
        let grid = GridSpec {
            lo: self.cfg.surface_lo,
            hi: self.cfg.surface_hi,
            steps: self.cfg.surface_steps,
        };
        let csv = nonlinearity_surface(&cfg, &grid)?.to_csv(Some(&self.provenance_line()));
        self.write(SURFACE, &csv)?;
        Ok(csv)
    }

    /// Samples candidates uniformly and correlates their search and retrain rankings; the
    /// run report is refreshed to include the result.
    pub fn rankcorr(&self) -> Result<Value> {
        let handle = self.load_supernet(SUPERNET)?;
        let teacher = self.load_teacher()?;
        let ctx = self.context(&teacher)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7a);
        let space = SearchSpaceDef::stage1(self.cfg.student_layers);
        let candidates: Vec<FfnGenotype> = (0..self.cfg.rank_candidates)
            .map(|_| sample_uniform(&space, &mut rng))
            .collect::<Result<_>>()?;
        let report = rank_correlation_study(
            &candidates,
            &handle,
            &ctx,
            &self.tasks()?,
            &self.cfg.proxy_protocol(),
            &self.cfg.retrain_protocol(),
        )?;
        let v = serde_json::to_value(&report)?;
        self.write_json(TAU, v.clone())?;
        self.write_json(REPORT, self.report()?)?;
        Ok(v)
    }

    /// Depth doubling: every layer spec repeated in place, on the narrower deepened base.
    pub fn deepen(&self, genotype: Option<&Path>) -> Result<FfnGenotype> {
        let g = self.final_genotype(genotype)?.deepen();
        let cfg = self.cfg.deepened_model().with_genotype(g.clone());
        cfg.check()?;
        let cost = count_params(&cfg);
        self.write_json(
            DEEPENED,
            json!({
                "genotype": g,
                "num_layers": cfg.num_layers,
                "hidden": cfg.hidden,
                "params_total": cost.params_total,
            }),
        )?;
        Ok(g)
    }
}
